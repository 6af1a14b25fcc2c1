import numpy as np
import pytest

from prrlab.diffusion import SequenceState, Vocabulary
from prrlab.regulator import FEATURE_COUNT, FeatureContext, build_features_batch
from prrlab.trajectory import PositionEntry, StepRecord, Trajectory


def synthetic_trajectory(rng: np.random.Generator, length=6, horizon=8,
                         vocab=5, hidden_dim=4) -> Trajectory:
    """Random but invariant-valid trajectory for label-oracle testing.

    Every position gets a commit step in [1, horizon]; entries exist for each
    step the position is still masked, with a random top-1 path that ends on
    the committed token at the commit step.
    """
    commit = rng.integers(1, horizon + 1, size=length)
    commit[rng.integers(length)] = horizon     # keep the executed horizon tight
    finals = rng.integers(1, vocab, size=length)
    paths = {}
    for pos in range(length):
        path = rng.integers(1, vocab, size=commit[pos]).astype(np.int64)
        path[-1] = finals[pos]                 # commits are the argmax at commit time
        paths[pos] = path
    steps = []
    for t in range(1, horizon + 1):
        entries = []
        unmask = []
        for pos in range(length):
            if t <= commit[pos]:
                tok = int(paths[pos][t - 1])
                row = np.full(vocab, 0.1 / (vocab - 1))
                row[tok] = 0.9
                entries.append(PositionEntry(
                    position=pos, top1_token=tok, top1_prob=0.9,
                    margin=0.9 - 0.1 / (vocab - 1),
                    entropy=float(-(row * np.log(row)).sum()),
                    features=rng.random(FEATURE_COUNT),
                    hidden=rng.random(hidden_dim)))
            if t == commit[pos]:
                unmask.append((pos, int(finals[pos])))
        steps.append(StepRecord(step=t, block=0, entries=entries, unmask=unmask))
    return Trajectory(length=length, vocab=vocab, steps_executed=horizon,
                      block_size=length, rule="synthetic", seed=int(rng.integers(2**31)),
                      denoiser_id="synthetic", controller_id="none", prompt_len=0,
                      truncated=False, steps=steps,
                      final_tokens=finals.astype(np.int64))


def scripted_redundancy_trajectory():
    """The scripted single-position fixture: top-1 path B,A,B,B over four
    pre-commit steps, committed to B at step 5. Rows come from the tabular
    oracle with per-step confidences 0.6, 0.05, 0.6, 0.6, 0.9 (V=4, target B=2;
    at 0.05 the uniform remainder 0.95/3 beats the target, argmax ties break
    to token 0)."""
    from prrlab.denoiser import OracleSpec, TabularOracle

    vocab = Vocabulary(4, mask_id=0)
    confidences = [0.6, 0.05, 0.6, 0.6, 0.9]
    target = np.array([2])
    seq = SequenceState.fully_masked(1, vocab)
    steps = []
    for t, conf in enumerate(confidences, start=1):
        oracle = TabularOracle(OracleSpec(target=target, confidence=lambda p, f, c=conf: c),
                               vocab)
        state = oracle.denoise(seq, 1.0)
        row = state.probs[0]
        top = int(row.argmax())
        srt = np.sort(row)
        ctx = FeatureContext(step=t, step_budget=5, gen_start=0, gen_len=1,
                             unmasked_gen=0, block_size=1, block_count=1,
                             active_block=0, active_block_start=0,
                             active_block_len=1, active_block_unmasked=0,
                             masked_top1_mean=float(row.max()),
                             masked_top1_std=0.0)
        entry = PositionEntry(
            position=0, top1_token=top, top1_prob=float(row.max()),
            margin=float(srt[-1] - srt[-2]),
            entropy=float(-(row[row > 0] * np.log(row[row > 0])).sum()),
            features=build_features_batch(row[None, :], np.array([0]), ctx)[0],
            hidden=state.hidden[0])
        steps.append(StepRecord(step=t, block=0, entries=[entry],
                                unmask=[(0, 2)] if t == 5 else []))
    return Trajectory(length=1, vocab=4, steps_executed=5, block_size=1,
                      rule="scripted", seed=0, denoiser_id="oracle:scripted",
                      controller_id="none", prompt_len=0, truncated=False,
                      steps=steps, final_tokens=np.array([2], dtype=np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
