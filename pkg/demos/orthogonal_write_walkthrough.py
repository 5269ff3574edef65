"""Walk one small state matrix through a handful of orthogonal writes.

Prints, per step: the compression loss, the retraction scale beta, how far
the update strays from the slot directions (it shouldn't, up to roundoff),
and the slot norms (they shouldn't move at all).

Run:  python3 demos/orthogonal_write_walkthrough.py
"""
import numpy as np

from lattice.recurrence import Mode, TokenTriple, init_state, lattice_step

rng = np.random.default_rng(0)
m, d = 4, 8
S = init_state(m, d, seed=0)

print(f"state: {m} slots of dimension {d}, all unit norm\n")
print(f"{'step':>4} {'loss':>10} {'beta range':>19} {'orthogonality':>14} "
      f"{'norm drift':>11}")

for step in range(12):
    tok = TokenTriple(k=rng.standard_normal(m), v=rng.standard_normal(d),
                      q=rng.standard_normal(m), gamma=0.5, mu=1.0)
    S_new, y, trace = lattice_step(S, tok, Mode.DEC)
    # the update row for slot i should have no component along slot i
    dots = np.abs(np.einsum("id,id->i", trace.delta, S.slots))
    scale = np.linalg.norm(trace.delta, axis=1) * S.slot_norms() + 1e-300
    drift = np.abs(S_new.slot_norms() - 1.0).max()
    print(f"{step:>4} {trace.loss:>10.4f} "
          f"[{trace.beta.min():.4f}, {trace.beta.max():.4f}]"
          f" {np.max(dots / scale):>14.2e} {drift:>11.2e}")
    S = S_new

print("\nwrites only ever rotate the slots; the sphere constraint is free")
