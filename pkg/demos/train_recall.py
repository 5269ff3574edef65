"""Train a small model on multi-query associative recall, end to end.

A scaled-down version of the full experiment (smaller model, fewer samples,
fewer epochs) so the whole script finishes in about a minute on one core.
Prints the loss per epoch and the held-out recall accuracy at the end.

Run:  python3 demos/train_recall.py [kind]
      kind defaults to lattice-dec; try la to see the ungated baseline
"""
import sys

import numpy as np

from lattice.model import ModelConfig, init_params, lm_forward
from lattice.tasks import MqarConfig, dataset_arrays, mqar_accuracy, \
    mqar_generate
from lattice.training import OptState, model_loss, train_loop

kind = sys.argv[1] if len(sys.argv) > 1 else "lattice-dec"
seed = 0

mcfg = ModelConfig(vocab_size=32, d_model=32, n_blocks=2, n_heads=1, m=16,
                   d_head=16, kind=kind, seed=seed)
params = init_params(mcfg)

task = MqarConfig(vocab_size=32, seq_len=32, num_kv_pairs=2, num_samples=800,
                  seed=seed)
tokens, mask, dense = dataset_arrays(mqar_generate(task))
etask = MqarConfig(vocab_size=32, seq_len=32, num_kv_pairs=2, num_samples=200,
                   seed=seed + 1000)
esamples = mqar_generate(etask)
etokens, _, _ = dataset_arrays(esamples)

epochs, bs = 25, 32
opt = OptState(base_lr=3e-3, warmup_steps=20,
               total_steps=epochs * (task.num_samples // bs))
rng = np.random.default_rng(seed)

print(f"training {kind} on {task.num_samples} recall sequences\n")
for epoch in range(epochs):
    order = rng.permutation(task.num_samples)
    batches = ((tokens[idx], dense[idx], mask[idx])
               for idx in np.split(order, task.num_samples // bs))
    loss = train_loop(mcfg, params, opt, batches)
    print(f"epoch {epoch + 1}/{epochs}  loss {loss:.4f}")

logits = np.concatenate([lm_forward(mcfg, params, etokens[b : b + 50]).data
                         for b in range(0, 200, 50)])
acc = mqar_accuracy(logits, esamples)
_, emask, edense = dataset_arrays(esamples)
eloss = float(model_loss(mcfg, params, etokens, edense, emask).data)
print(f"\nheld-out recall accuracy: {acc:.3f} (eval loss {eloss:.4f})")
