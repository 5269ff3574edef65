import numpy as np
import pytest

from lattice.autodiff import Var
from lattice.errors import ConfigError, ShapeError, TrainingFault
from lattice.model import ModelConfig, init_params, param_count
from lattice.training import (GradCheckReport, OptState, adamw_step, backward,
                              clip_gradients, cross_entropy_masked, grad_check,
                              lr_at, model_loss, train_loop)

rng = np.random.default_rng(17)

TINY = ModelConfig(vocab_size=11, d_model=8, n_blocks=1, n_heads=2, m=3,
                   d_head=4, kind="lattice-dec", seed=0)


def tiny_batch(B=2, T=6, vocab=11, seed=0):
    g = np.random.default_rng(seed)
    tokens = g.integers(0, vocab, (B, T))
    targets = g.integers(0, vocab, (B, T))
    mask = g.random((B, T)) < 0.5
    mask[:, 0] = True  # never empty
    return tokens, targets, mask


def test_cross_entropy_uniform_logits():
    B, T, V = 2, 3, 7
    logits = Var(np.zeros((B, T, V)), requires_grad=True)
    targets = np.zeros((B, T), dtype=int)
    loss = cross_entropy_masked(logits, targets)
    np.testing.assert_allclose(loss.data, np.log(V), rtol=1e-12)


def test_cross_entropy_gradient_closed_form():
    # d loss / d logits = (softmax - onehot) / n at masked positions, 0 elsewhere
    B, T, V = 2, 4, 5
    raw = rng.standard_normal((B, T, V))
    logits = Var(raw.copy(), requires_grad=True)
    targets = rng.integers(0, V, (B, T))
    mask = np.array([[True, False, True, False], [False, True, True, False]])
    cross_entropy_masked(logits, targets, mask).backward()
    z = np.exp(raw - raw.max(axis=-1, keepdims=True))
    sm = z / z.sum(axis=-1, keepdims=True)
    onehot = np.zeros((B, T, V))
    bi, ti = np.nonzero(mask)
    onehot[bi, ti, targets[bi, ti]] = 1.0
    expected = (sm - onehot) * mask[..., None] / mask.sum()
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


def test_cross_entropy_shift_invariance():
    B, T, V = 2, 3, 6
    raw = rng.standard_normal((B, T, V))
    targets = rng.integers(0, V, (B, T))
    a = cross_entropy_masked(Var(raw), targets).data
    b = cross_entropy_masked(Var(raw + 1000.0), targets).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_cross_entropy_rejects_empty_mask_and_bad_shapes():
    logits = Var(np.zeros((1, 2, 3)))
    with pytest.raises(ShapeError):
        cross_entropy_masked(logits, np.zeros((1, 2), dtype=int),
                             np.zeros((1, 2), dtype=bool))
    with pytest.raises(ShapeError):
        cross_entropy_masked(logits, np.zeros((2, 2), dtype=int))


def test_lr_schedule_shape():
    opt = OptState(base_lr=1e-2, final_lr=1e-4, warmup_steps=100,
                   total_steps=1000)
    np.testing.assert_allclose(lr_at(opt, 1), 1e-4)  # base_lr / warmup
    np.testing.assert_allclose(lr_at(opt, 50), 5e-3)
    np.testing.assert_allclose(lr_at(opt, 100), 1e-2)
    np.testing.assert_allclose(lr_at(opt, 550), (1e-2 + 1e-4) / 2, rtol=1e-12)
    np.testing.assert_allclose(lr_at(opt, 1000), 1e-4, atol=1e-12)
    np.testing.assert_allclose(lr_at(opt, 5000), 1e-4, atol=1e-12)  # clamped


def test_adamw_matches_hand_formula_single_scalar():
    p = {"w": Var(np.array([2.0]), requires_grad=True)}
    opt = OptState(base_lr=0.1, warmup_steps=0, total_steps=10,
                   weight_decay=0.01)
    g = np.array([0.5])
    adamw_step(opt, p, {"w": g})
    lr = lr_at(opt, 1)
    m = 0.1 * 0.5 / (1 - 0.9)
    v = 0.001 * 0.25 / (1 - 0.999)
    expected = 2.0 - lr * (m / (np.sqrt(v) + 1e-8) + 0.01 * 2.0)
    np.testing.assert_allclose(p["w"].data, [expected], rtol=1e-12)


def test_weight_decay_is_decoupled():
    # zero gradient still shrinks the weight, and the shrinkage is exactly
    # lr * wd * w (no interaction with the moment estimates)
    p = {"w": Var(np.array([4.0]), requires_grad=True)}
    opt = OptState(base_lr=0.1, warmup_steps=0, total_steps=10,
                   weight_decay=0.5)
    adamw_step(opt, p, {"w": np.array([0.0])})
    lr = lr_at(opt, 1)
    np.testing.assert_allclose(p["w"].data, [4.0 * (1 - 0.5 * lr)], rtol=1e-12)


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    np.testing.assert_allclose(norm, 5.0)
    total = np.sqrt(sum((g ** 2).sum() for g in clipped.values()))
    assert total <= 1.0 + 1e-12
    np.testing.assert_allclose(clipped["a"] / clipped["b"], 0.75)
    small = {"a": np.array([0.1])}
    same, norm2 = clip_gradients(small, 1.0)
    assert same["a"] is small["a"] and norm2 == pytest.approx(0.1)


def test_backward_returns_full_gradient_dict():
    params = init_params(TINY)
    tokens, targets, mask = tiny_batch()
    loss, grads = backward(TINY, params, tokens, targets, mask)
    assert np.isfinite(loss)
    names = {k for k, v in params.items() if v.requires_grad}
    assert set(grads) == names
    assert any(np.abs(g).max() > 0 for g in grads.values())
    assert "blocks.0.s0" not in grads  # buffer, not trainable


def test_training_step_is_deterministic():
    tokens, targets, mask = tiny_batch()

    def run():
        params = init_params(TINY)
        opt = OptState(base_lr=1e-2, warmup_steps=2, total_steps=10)
        for _ in range(3):
            _, grads = backward(TINY, params, tokens, targets, mask)
            grads, _ = clip_gradients(grads, opt.clip_norm)
            adamw_step(opt, params, grads)
        return {k: v.data.copy() for k, v in params.items()}

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_duplicated_batch_preserves_mean_loss_and_gradient():
    params = init_params(TINY)
    tokens, targets, mask = tiny_batch()
    l1, g1 = backward(TINY, params, tokens, targets, mask)
    l2, g2 = backward(TINY, params, np.concatenate([tokens, tokens]),
                      np.concatenate([targets, targets]),
                      np.concatenate([mask, mask]))
    np.testing.assert_allclose(l1, l2, rtol=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


def test_grad_check_passes_on_tiny_model():
    params = init_params(TINY)
    tokens, targets, mask = tiny_batch(B=1, T=5)
    # fd_eps 1e-5: the default 1e-6 leaves enough cancellation roundoff to
    # rival the tolerance on the smallest gate gradients
    report = grad_check(TINY, params, tokens, targets, mask, tolerance=1e-5,
                        fd_eps=1e-5)
    assert isinstance(report, GradCheckReport)
    assert report.passed, report.worst()


def test_grad_check_detects_corrupted_gradient(monkeypatch):
    # negative control: break one gradient and the check must fail
    import lattice.training as tr
    params = init_params(TINY)
    tokens, targets, mask = tiny_batch(B=1, T=5)
    real_backward = tr.backward

    def bad_backward(*a, **kw):
        loss, grads = real_backward(*a, **kw)
        grads["head_bias"] = grads["head_bias"] + 0.1
        return loss, grads

    monkeypatch.setattr(tr, "backward", bad_backward)
    report = tr.grad_check(TINY, params, tokens, targets, mask, tolerance=1e-5)
    assert not report.passed
    assert report.worst(1)[0][0] == "head_bias"


def test_grad_check_size_guard():
    cfg = ModelConfig(vocab_size=64, d_model=64, n_blocks=2, n_heads=1, m=32,
                      d_head=32, kind="lattice-dec")
    params = init_params(cfg)
    assert param_count(params) > 5000
    with pytest.raises(ConfigError):
        grad_check(cfg, params, *tiny_batch(B=1, T=4, vocab=64))


def test_non_finite_gradient_raises_training_fault():
    params = init_params(TINY)
    params["embed"].data[0, 0] = np.inf
    tokens, targets, mask = tiny_batch()
    with pytest.raises(TrainingFault):
        backward(TINY, params, tokens, targets, mask)


def test_train_loop_reduces_loss_and_reports_metrics():
    params = init_params(TINY)
    tokens, targets, mask = tiny_batch(B=8, T=6)
    opt = OptState(base_lr=1e-2, warmup_steps=5, total_steps=40)
    first = float(model_loss(TINY, params, tokens, targets, mask).data)
    rows = []
    train_loop(TINY, params, opt,
               [(tokens, targets, mask)] * 40, metrics_writer=rows.append)
    last = float(model_loss(TINY, params, tokens, targets, mask).data)
    assert last < first
    assert len(rows) == 40 and opt.step == 40
    assert {"step", "lr", "loss", "grad_norm", "tokens_per_sec"} <= set(rows[0])
