"""Recorded rollouts, convergence-progress labels, and redundancy.

The label of a masked cell (position, step) is nonzero only once the current
top-1 prediction equals the finally committed token, and grows with how
persistently the suffix of the rollout stays on that token (closer future
steps weigh more). Run: python demos/03_trajectories_and_labels.py
"""
import io

import numpy as np

from prrlab import (DecodeConfig, SequenceState, Threshold, Vocabulary, decode,
                    label_trajectory, read_trajectory, redundancy_fraction,
                    suffix_weights, write_trajectory)
from prrlab.denoiser import OracleSpec, RampConfidence, TabularOracle
from prrlab.util import derive_rng

vocab = Vocabulary(size=8, mask_id=0)
L = 16
target = derive_rng(5).integers(1, vocab.size, size=L)
# confidence starts below the uniform level 1/V, so early top-1 predictions
# sit on the wrong token and flip onto the target as context accumulates
oracle = TabularOracle(OracleSpec(target=target,
                                  confidence=RampConfidence(base=0.05, gain=0.55)),
                       vocab)
res = decode(oracle, SequenceState.fully_masked(L, vocab),
             DecodeConfig(length=L, step_budget=L, block_size=4, rule=Threshold(0.8)))
traj = res.trajectory
print(f"decoded in {res.nfe} steps; trajectory records "
      f"{sum(len(r.entries) for r in traj.steps)} masked-cell observations")

# the suffix weights decay linearly and always sum to one
w = suffix_weights(t=2, horizon=6)
print("suffix weights from t=2 of T=6:", np.round(w.weights, 4), "sum", w.weights.sum())

grid = label_trajectory(traj)
vals = np.array(list(grid.values.values()))
print(f"\nlabel grid: {len(grid)} cells, mean={vals.mean():.3f}, "
      f"unconverged (<0.5): {(vals < 0.5).mean():.1%}")
print(f"redundant refinement fraction: {redundancy_fraction(traj):.3f}")

# round trip through the canonical serialization
buf = io.BytesIO()
n = write_trajectory(traj, buf)
buf.seek(0)
back = read_trajectory(buf)
print(f"\nserialized to {n} bytes; round trip equal: {back == traj}")
