"""Forward noising: the absorbing-mask kernel and a step-indexed schedule.

Each step independently replaces surviving tokens with the mask symbol; once
masked, a position stays masked. Run: python demos/01_forward_noising.py
"""
import numpy as np

from prrlab import SequenceState, Vocabulary, apply_forward_noise
from prrlab.diffusion import linear_schedule
from prrlab.util import derive_rng

vocab = Vocabulary(size=10, mask_id=0)
tokens = np.arange(1, 9, dtype=np.int64)
seq = SequenceState(tokens, tokens == 0, vocab)
print("clean sequence:", seq.tokens)

# one-shot corruption at a few probabilities
for p in (0.0, 0.25, 0.75, 1.0):
    noisy = apply_forward_noise(seq, p, derive_rng(7, int(p * 100)))
    print(f"mask_prob={p:4.2f} ->", noisy.tokens, f"({noisy.masked.sum()} masked)")

# a full forward pass under a linear schedule: masking accumulates
schedule = linear_schedule(total_steps=8)
state = seq.copy()
print("\nlinear schedule, 8 steps:")
for t in range(1, 9):
    state = apply_forward_noise(state, schedule.at(t), derive_rng(7, 100 + t))
    print(f"  t={t}: alpha={schedule.at(t):5.3f} masked={int(state.masked.sum())}/8")

# Monte-Carlo check of the kernel: masked count concentrates around n*p
big = SequenceState(np.ones(1000, dtype=np.int64), np.zeros(1000, bool), vocab)
counts = [apply_forward_noise(big, 0.5, derive_rng(11, i)).masked.sum() for i in range(100)]
print(f"\n1000 tokens at p=0.5, 100 streams: mean={np.mean(counts):.1f} "
      f"min={min(counts)} max={max(counts)} (binomial: 500 +/- ~16)")
