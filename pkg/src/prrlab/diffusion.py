"""Masked discrete diffusion core: sequence state, forward noising kernel,
unmasking rules, block-wise reverse decoding, and NFE accounting.

Decoding walks the generated region left to right in blocks. Within a block,
each step runs one denoiser forward pass (one NFE), optionally reshapes the
active rows through the refinement controller, selects positions to commit
under the configured rule, and commits them permanently. Commits are
absorbing: a position never re-masks. If the global step budget runs out,
remaining positions are force-committed to their current argmax and the
result is flagged truncated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import regulator
from .regulator import FeatureContext, RegulationConfig
from .trajectory import PositionEntry, StepRecord, Trajectory


@dataclass(frozen=True)
class Vocabulary:
    size: int
    mask_id: int = 0

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("vocabulary needs at least two symbols")
        if not 0 <= self.mask_id < self.size:
            raise ValueError("mask_id must be a valid token index")


@dataclass
class SequenceState:
    """Fixed-length token buffer plus mask flags; masked[i] <=> tokens[i] == mask."""

    tokens: np.ndarray
    masked: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.tokens.shape != self.masked.shape or self.tokens.ndim != 1:
            raise ValueError("tokens and masked must be 1-D arrays of equal length")
        if not np.array_equal(self.masked, self.tokens == self.vocab.mask_id):
            raise ValueError("mask flags must mirror mask_id placement exactly")

    def __len__(self):
        return len(self.tokens)

    def copy(self) -> "SequenceState":
        return SequenceState(self.tokens.copy(), self.masked.copy(), self.vocab)

    @classmethod
    def from_prompt(cls, prompt_tokens, gen_len: int, vocab: Vocabulary) -> "SequenceState":
        """Conditioning prefix followed by a fully masked generation region."""
        prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
        if np.any(prompt_tokens == vocab.mask_id):
            raise ValueError("prompt must not contain the mask symbol")
        if gen_len < 1:
            raise ValueError("generation region must be nonempty")
        tokens = np.concatenate([prompt_tokens, np.full(gen_len, vocab.mask_id, dtype=np.int64)])
        return cls(tokens, tokens == vocab.mask_id, vocab)

    @classmethod
    def fully_masked(cls, length: int, vocab: Vocabulary) -> "SequenceState":
        tokens = np.full(length, vocab.mask_id, dtype=np.int64)
        return cls(tokens, np.ones(length, dtype=bool), vocab)


@dataclass(frozen=True)
class NoiseSchedule:
    """Step-indexed masking probability for the forward kernel (training only)."""

    mask_prob: Callable[[int], float]

    def at(self, t: int) -> float:
        a = float(self.mask_prob(t))
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"schedule produced probability {a} outside [0,1] at t={t}")
        return a


def linear_schedule(total_steps: int) -> NoiseSchedule:
    return NoiseSchedule(lambda t: t / total_steps)


@dataclass
class PredictiveState:
    """Row-stochastic distribution and hidden vector per position."""

    probs: np.ndarray    # (L, V)
    hidden: np.ndarray   # (L, D)

    def validate(self, seq: SequenceState) -> None:
        length, vocab = self.probs.shape
        if length != len(seq):
            raise ValueError(f"predictive state covers {length} positions, sequence has {len(seq)}")
        if vocab != seq.vocab.size:
            raise ValueError("predictive state vocabulary width mismatch")
        if self.hidden.shape[0] != length:
            raise ValueError("hidden matrix row count mismatch")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("rows must be valid distributions")


def apply_forward_noise(seq: SequenceState, mask_prob: float,
                        rng_stream: np.random.Generator) -> SequenceState:
    """Independently replace unmasked tokens with the mask symbol."""
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError("mask probability must lie in [0,1]")
    out = seq.copy()
    hits = (rng_stream.random(len(seq)) < mask_prob) & ~out.masked
    out.tokens[hits] = seq.vocab.mask_id
    out.masked |= hits
    return out


# ---------------------------------------------------------------------------
# Unmasking rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Top1:
    def describe(self) -> str:
        return "top1"


@dataclass(frozen=True)
class Threshold:
    confidence: float

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError("threshold must lie in (0,1]")

    def describe(self) -> str:
        return f"threshold({self.confidence!r})"


@dataclass(frozen=True)
class EntropyBound:
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("entropy bound must be positive")

    def describe(self) -> str:
        return f"entropy_bound({self.gamma!r})"


@dataclass(frozen=True)
class Regulated:
    """Threshold rule applied to controller-reshaped confidences."""

    confidence: float
    regulation: RegulationConfig = RegulationConfig()

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError("threshold must lie in (0,1]")

    def describe(self) -> str:
        r = self.regulation
        return (f"regulated({self.confidence!r},tau0={r.tau0!r},"
                f"alpha={r.alpha!r},mode={r.mode})")


Rule = Top1 | Threshold | EntropyBound | Regulated


@dataclass
class UnmaskPlan:
    commits: list  # (position, token), position-ascending


def _row_stats(rows: np.ndarray):
    """(argmax token, top-1 prob) per row with lowest-token tie-breaking."""
    toks = rows.argmax(axis=1)
    confs = rows[np.arange(len(rows)), toks]
    return toks, confs


def plan_unmask(state: PredictiveState, masked_positions_in_block, rule: Rule) -> UnmaskPlan:
    """Select positions to commit this step under the given rule.

    For ``Regulated`` the caller must already have reshaped the relevant rows
    of ``state``; selection then reduces to its threshold on those rows.
    """
    positions = np.asarray(sorted(masked_positions_in_block), dtype=np.int64)
    if positions.size == 0:
        raise ValueError("plan_unmask requires at least one masked position in the block")
    rows = state.probs[positions]
    toks, confs = _row_stats(rows)

    if isinstance(rule, Top1):
        best = int(np.argmax(confs))  # first max -> lowest position on ties
        chosen = [best]
    elif isinstance(rule, (Threshold, Regulated)):
        qualifying = np.nonzero(confs > rule.confidence)[0]
        chosen = list(qualifying) if qualifying.size else [int(np.argmax(confs))]
    elif isinstance(rule, EntropyBound):
        ent = regulator.distribution_entropy(rows)
        order = np.lexsort((positions, -confs))  # confidence desc, then position asc
        chosen = [int(order[0])]                 # always commit the most confident
        budget = ent[order[0]]
        for idx in order[1:]:
            if budget + ent[idx] <= rule.gamma:
                chosen.append(int(idx))
                budget += ent[idx]
            else:
                break
    else:
        raise TypeError(f"unknown rule {rule!r}")

    chosen = sorted(chosen)
    return UnmaskPlan(commits=[(int(positions[i]), int(toks[i])) for i in chosen])


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeConfig:
    """Generation-region geometry and rule for one decode."""

    length: int           # generated tokens (prompt excluded)
    step_budget: int
    block_size: int
    rule: Rule
    seed: int = 0
    store_full_dist: bool = False

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("generation length must be >= 1")
        if not 1 <= self.block_size <= self.length:
            raise ValueError("block size must lie in [1, length]")
        if self.step_budget < self.block_count:
            raise ValueError("step budget must allow at least one step per block")

    @property
    def block_count(self) -> int:
        return -(-self.length // self.block_size)


@dataclass
class DecodeResult:
    output: np.ndarray
    trajectory: Trajectory
    nfe: int
    truncated: bool


def _effective_descriptor(config: DecodeConfig, controller) -> tuple[str, str]:
    """Header (rule, controller id). A regulated rule with alpha=0, tau0=1 is
    exactly the plain threshold rule, and is recorded as such."""
    rule = config.rule
    if isinstance(rule, Regulated):
        if controller is None:
            raise ValueError("regulated decoding requires a controller")
        if rule.regulation.is_identity:
            return Threshold(rule.confidence).describe(), "none"
        return rule.describe(), controller.controller_id
    return rule.describe(), "none"


def decode(denoiser, prompt: SequenceState, config: DecodeConfig,
           controller=None) -> DecodeResult:
    """Block-wise reverse decoding with full trajectory recording."""
    seq = prompt.copy()
    total = len(seq)
    prompt_len = total - config.length
    if prompt_len < 0:
        raise ValueError("configured generation length exceeds the sequence")
    if np.any(seq.masked[:prompt_len]) or not np.all(seq.masked[prompt_len:]):
        raise ValueError("prompt prefix must be unmasked and the generation region fully masked")

    rule_desc, controller_id = _effective_descriptor(config, controller)
    regulate = (isinstance(config.rule, Regulated) and controller is not None
                and not config.rule.regulation.is_identity)
    gen_start = prompt_len
    block_count = config.block_count

    steps: list[StepRecord] = []
    truncated = False
    nfe = 0
    last_state: Optional[PredictiveState] = None

    for block in range(block_count):
        b_start = gen_start + block * config.block_size
        b_end = min(gen_start + (block + 1) * config.block_size, total)
        while np.any(seq.masked[b_start:b_end]):
            if nfe >= config.step_budget:
                truncated = True
                break

            masked_frac = float(seq.masked[gen_start:].sum()) / config.length
            state = denoiser.denoise(seq, masked_frac)
            state.validate(seq)
            last_state = state
            nfe += 1
            t = nfe

            masked_all = np.nonzero(seq.masked)[0]
            rows = state.probs[masked_all]
            toks, confs = _row_stats(rows)
            second = np.partition(rows, rows.shape[1] - 2, axis=1)[:, -2]
            entropies = regulator.distribution_entropy(rows)
            ctx = FeatureContext(
                step=t, step_budget=config.step_budget,
                gen_start=gen_start, gen_len=config.length,
                unmasked_gen=int((~seq.masked[gen_start:]).sum()),
                block_size=config.block_size, block_count=block_count,
                active_block=block, active_block_start=b_start,
                active_block_len=b_end - b_start,
                active_block_unmasked=int((~seq.masked[b_start:b_end]).sum()),
                masked_top1_mean=float(confs.mean()),
                masked_top1_std=float(confs.std()),
            )
            feats = regulator.build_features_batch(rows, masked_all, ctx)
            entries = [PositionEntry(
                position=int(p), top1_token=int(toks[i]), top1_prob=float(confs[i]),
                margin=float(confs[i] - second[i]), entropy=float(entropies[i]),
                features=feats[i], hidden=state.hidden[p].copy(),
                full_row=rows[i].copy() if config.store_full_dist else None,
            ) for i, p in enumerate(masked_all)]

            in_block = masked_all[(masked_all >= b_start) & (masked_all < b_end)]
            plan_state = state
            if regulate:
                idx = np.searchsorted(masked_all, in_block)
                yhat, _ = controller.predict_batch(state.hidden[in_block], feats[idx])
                taus = regulator.effective_temperature(np.atleast_1d(yhat),
                                                       config.rule.regulation)
                reshaped = state.probs.copy()
                for j, p in enumerate(in_block):
                    reshaped[p] = regulator.reshape_distribution(state.probs[p], float(taus[j]))
                plan_state = PredictiveState(reshaped, state.hidden)

            plan = plan_unmask(plan_state, in_block, config.rule)
            for pos, tok in plan.commits:
                seq.tokens[pos] = tok
                seq.masked[pos] = False
            steps.append(StepRecord(step=t, block=block, entries=entries,
                                    unmask=list(plan.commits)))
        if truncated:
            break

    if truncated and np.any(seq.masked):
        # budget exhausted: commit every remaining position to its argmax under
        # the most recent predictive state (no extra forward pass, no extra NFE)
        remaining = np.nonzero(seq.masked)[0]
        toks, _ = _row_stats(last_state.probs[remaining])
        forced = [(int(p), int(tk)) for p, tk in zip(remaining, toks)]
        for pos, tok in forced:
            seq.tokens[pos] = tok
            seq.masked[pos] = False
        steps[-1].forced.extend(forced)

    traj = Trajectory(
        length=total, vocab=seq.vocab.size, steps_executed=nfe,
        block_size=config.block_size, rule=rule_desc, seed=config.seed,
        denoiser_id=denoiser.denoiser_id, controller_id=controller_id,
        prompt_len=prompt_len, truncated=truncated,
        steps=steps, final_tokens=seq.tokens.copy())
    return DecodeResult(output=seq.tokens.copy(), trajectory=traj, nfe=nfe,
                        truncated=truncated)
