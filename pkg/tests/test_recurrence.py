import numpy as np
import pytest

from lattice.errors import DegenerateStateError, ShapeError
from lattice.recurrence import (EPS, Mode, StateMatrix, TokenTriple,
                                compression_loss, dec_update_linearized,
                                init_state, ista_step, lattice_scan,
                                lattice_step, normalize_update, osr_gradient,
                                project_orthogonal, soft_threshold)

rng = np.random.default_rng(7)


def random_token(m, d, gamma=None, mu=1.0):
    return TokenTriple(k=rng.standard_normal(m), v=rng.standard_normal(d),
                       q=rng.standard_normal(m),
                       gamma=gamma if gamma is not None else float(rng.uniform(0.1, 1.0)),
                       mu=mu)


def test_single_slot_unit_write():
    # one slot at e1, write toward e2: the slot rotates to the diagonal
    S = StateMatrix(np.array([[1.0, 0.0]]))
    t = TokenTriple(k=[1.0], v=[0.0, 1.0], q=[1.0], gamma=1.0, mu=1.0)
    grad, _ = osr_gradient(S, t, Mode.DEC)
    np.testing.assert_allclose(grad, [[0.0, -1.0]], atol=1e-15)
    S2, y, tr = lattice_step(S, t, Mode.DEC)
    r = np.sqrt(0.5)
    np.testing.assert_allclose(S2.slots, [[r, r]], atol=1e-15)
    np.testing.assert_allclose(y, [r, r], atol=1e-15)
    np.testing.assert_allclose(tr.beta, [r], atol=1e-15)


def test_project_orthogonal_removes_parallel_component():
    s = rng.standard_normal(6)
    h = rng.standard_normal(6)
    p = project_orthogonal(h, s)
    assert abs(p @ s) < 1e-12
    np.testing.assert_allclose(p + s * (s @ h) / (s @ s), h, atol=1e-12)


def test_project_orthogonal_zero_vector_raises():
    with pytest.raises(DegenerateStateError):
        project_orthogonal(np.ones(3), np.zeros(3))


@pytest.mark.parametrize("mode", list(Mode))
def test_gradient_matches_finite_differences(mode):
    m, d = 5, 7
    S = StateMatrix(rng.standard_normal((m, d)))
    t = random_token(m, d)
    grad, _ = osr_gradient(S, t, mode)
    eps = 1e-6
    fd = np.zeros_like(S.slots)
    for i in range(m):
        for j in range(d):
            for sign in (1, -1):
                P = S.slots.copy()
                P[i, j] += sign * eps
                fd[i, j] += sign * compression_loss(StateMatrix(P), t, mode) / (2 * eps)
    denom = max(np.abs(fd).max(), 1e-8)
    assert np.abs(grad - fd).max() / denom < 1e-6


@pytest.mark.parametrize("mode", list(Mode))
def test_update_rows_orthogonal_to_slots(mode):
    S = init_state(6, 9, seed=2)
    t = random_token(6, 9)
    _, tr = osr_gradient(S, t, mode)
    dots = np.abs(np.einsum("id,id->i", tr.delta, S.slots))
    assert dots.max() < 1e-12


def test_normalize_update_preserves_norms():
    S = StateMatrix(rng.standard_normal((4, 5)) * 3.0)
    t = random_token(4, 5)
    grad, _ = osr_gradient(S, t, Mode.DEC)
    S2, beta = normalize_update(S, -t.gamma * grad, mu=0.97)
    np.testing.assert_allclose(S2.slot_norms(), S.slot_norms(), rtol=1e-12)
    assert np.all(beta > 0)


def test_normalize_update_beta_closed_form_on_unit_slots():
    # unit slots, mu=1: beta = 1/sqrt(1 + ||delta||^2)
    S = init_state(3, 8, seed=5)
    t = random_token(3, 8, gamma=0.7)
    grad, _ = osr_gradient(S, t, Mode.DEC)
    delta = -t.gamma * grad
    _, beta = normalize_update(S, delta, mu=1.0)
    expected = 1.0 / np.sqrt(1.0 + np.einsum("id,id->i", delta, delta))
    np.testing.assert_allclose(beta, expected, rtol=1e-12)


def test_long_scan_stays_on_sphere():
    S = init_state(4, 6, seed=1)
    toks = [random_token(4, 6, mu=0.99) for _ in range(500)]
    S_final, outputs, _ = lattice_scan(S, toks, Mode.DEC)
    np.testing.assert_allclose(S_final.slot_norms(), 1.0, atol=1e-9)
    assert outputs.shape == (500, 6)


def test_readout_uses_post_update_state():
    S = init_state(3, 4, seed=9)
    t = random_token(3, 4)
    S2, y, _ = lattice_step(S, t, Mode.SIM)
    np.testing.assert_allclose(y, t.q @ S2.slots, atol=1e-15)
    assert np.abs(y - t.q @ S.slots).max() > 1e-6


def test_loss_values_by_mode():
    S = init_state(3, 4, seed=11)
    t = random_token(3, 4)
    phi = S.slots / S.slot_norms()[:, None]
    np.testing.assert_allclose(compression_loss(S, t, Mode.DEC),
                               0.5 * np.sum((t.k @ phi - t.v) ** 2))
    np.testing.assert_allclose(compression_loss(S, t, Mode.SIM),
                               -(t.k @ phi) @ t.v)
    np.testing.assert_allclose(compression_loss(S, t, Mode.ENC),
                               0.5 * np.sum((phi @ t.v - t.k) ** 2))


def test_gamma_zero_is_identity_up_to_mu():
    S = init_state(3, 4, seed=4)
    t = random_token(3, 4, gamma=0.0, mu=1.0)
    S2, _, tr = lattice_step(S, t, Mode.DEC)
    np.testing.assert_allclose(S2.slots, S.slots, atol=1e-15)
    np.testing.assert_allclose(tr.delta, 0.0, atol=1e-15)


def test_degenerate_state_raises():
    S = StateMatrix(np.array([[1e-9, 0.0], [1.0, 0.0]]))
    with pytest.raises(DegenerateStateError):
        osr_gradient(S, TokenTriple(k=[1.0, 1.0], v=[1.0, 0.0], q=[0.0, 1.0]),
                     Mode.DEC)


def test_shape_and_gate_validation():
    S = init_state(3, 4, seed=0)
    with pytest.raises(ShapeError):
        lattice_step(S, TokenTriple(k=[1.0, 0.0], v=np.zeros(4), q=[1.0, 0.0]),
                     Mode.DEC)
    with pytest.raises(ShapeError):
        lattice_step(S, TokenTriple(k=np.zeros(3), v=np.zeros(5), q=np.zeros(3)),
                     Mode.DEC)
    with pytest.raises(ValueError):
        TokenTriple(k=np.zeros(3), v=np.zeros(4), q=np.zeros(3), gamma=1.5)
    with pytest.raises(ShapeError):
        lattice_scan(S, [], Mode.DEC)


def test_soft_threshold():
    x = np.array([-2.0, -0.3, 0.0, 0.3, 2.0])
    np.testing.assert_allclose(soft_threshold(x, 0.5),
                               [-1.5, 0.0, 0.0, 0.0, 1.5])
    with pytest.raises(ValueError):
        soft_threshold(x, -0.1)


def test_ista_step_sparsifies():
    S = StateMatrix(rng.standard_normal((4, 6)) * 0.05)
    t = random_token(4, 6, gamma=0.5)
    S2 = ista_step(S, t, lam=0.2)
    # heavy shrinkage relative to tiny entries produces exact zeros
    assert (S2.slots == 0.0).sum() > 0


def test_delta_rule_from_linearized_dec():
    m = d = 5
    S = StateMatrix(rng.standard_normal((m, d)))
    t = random_token(m, d, gamma=0.8)
    lin = dec_update_linearized(S, t).slots
    expected = S.slots - t.gamma * np.outer(t.k, t.k @ S.slots - t.v)
    np.testing.assert_allclose(lin, expected, atol=1e-15)


def test_trace_contents():
    S = init_state(3, 4, seed=2)
    t = random_token(3, 4)
    _, _, tr = lattice_step(S, t, Mode.DEC)
    assert tr.e is not None and tr.e.shape == (4,)
    assert np.isfinite(tr.loss)
    norms = S.slot_norms()
    np.testing.assert_allclose(tr.k_hat, t.gamma * tr.beta * t.k / norms,
                               rtol=1e-12)
