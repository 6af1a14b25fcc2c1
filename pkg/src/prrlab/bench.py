"""Synthetic tasks, end-to-end evaluation, frontier sweeps, controller
classification metrics, ablations, and schedule exports.

Task token layout: 0 is the mask symbol, 1 a separator, payload symbols are
2..V-1. Every task's answer is a deterministic function of its prompt, so
quality is whole-answer exact match.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import util
from .convergence import LabelGrid, label_trajectory
from .diffusion import (DecodeConfig, EntropyBound, Regulated, SequenceState,
                        Threshold, Top1, decode)
from .evolve import StageConfig, mean_successive_probe_kl, run_progressive
from .regulator import Controller
from .trajectory import Trajectory

PAYLOAD_START = 2
SEPARATOR = 1

TASK_KINDS = ("copy", "reverse", "modular_sum_chain", "keyvalue_recall")


@dataclass(frozen=True)
class TaskSpec:
    """Geometry of one synthetic task.

    ``prompt_len`` counts content tokens; when ``marker`` is set, a fixed
    task-identity token is prepended so one denoiser can serve a pool of
    task kinds (the true prompt is then prompt_len + 1 tokens long).
    """

    kind: str
    prompt_len: int
    answer_len: int
    vocab_size: int
    n: int
    seed: int = 0
    kv_pairs: int = 4
    marker: int | None = None
    chain_mod: int = 8    # answer alphabet size of modular_sum_chain
    chain_inc: int = 2    # increment alphabet size (prompt tokens of the chain)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")
        if self.vocab_size < PAYLOAD_START + 2:
            raise ValueError("vocabulary too small for a payload alphabet")
        if self.n < 1:
            raise ValueError("dataset size must be >= 1")
        if self.marker is not None and not PAYLOAD_START <= self.marker < self.vocab_size:
            raise ValueError("marker must be a payload-range token")
        if self.kind in ("copy", "reverse", "modular_sum_chain") \
                and self.answer_len != self.prompt_len:
            raise ValueError(f"{self.kind} requires answer_len == prompt_len")
        if self.kind == "keyvalue_recall":
            if self.prompt_len != 2 * self.kv_pairs + self.answer_len:
                raise ValueError("keyvalue_recall needs prompt_len == 2*pairs + queries")
            if self.kv_pairs > self.vocab_size - PAYLOAD_START:
                raise ValueError("not enough distinct keys in the payload alphabet")
        if self.kind == "modular_sum_chain":
            if not 2 <= self.chain_mod <= self.vocab_size - PAYLOAD_START:
                raise ValueError("chain_mod must fit inside the payload alphabet")
            if not 2 <= self.chain_inc <= self.chain_mod:
                raise ValueError("chain_inc must lie in [2, chain_mod]")

    @property
    def full_prompt_len(self) -> int:
        return self.prompt_len + (1 if self.marker is not None else 0)


@dataclass
class TaskDataset:
    spec: TaskSpec
    pairs: list                   # (prompt tokens, answer tokens)

    def __len__(self):
        return len(self.pairs)

    def prompts(self):
        return [p for p, _ in self.pairs]

    def answers(self):
        return [a for _, a in self.pairs]


def make_task(spec: TaskSpec) -> TaskDataset:
    """Deterministic dataset of (prompt, answer) pairs for a task spec."""
    rng = util.derive_rng(spec.seed, 0x7A5C)
    pairs = []
    for _ in range(spec.n):
        if spec.kind in ("copy", "reverse"):
            prompt = rng.integers(PAYLOAD_START, spec.vocab_size, size=spec.prompt_len)
            answer = prompt.copy() if spec.kind == "copy" else prompt[::-1].copy()
        elif spec.kind == "modular_sum_chain":
            # prompt holds small increments; the answer is their running sum
            # mod chain_mod, so early predictions carry genuine positional
            # ambiguity that resolves once the predecessor is committed
            prompt = rng.integers(PAYLOAD_START, PAYLOAD_START + spec.chain_inc,
                                  size=spec.prompt_len)
            answer = np.zeros(spec.prompt_len, dtype=np.int64)
            run = 0
            for j, p in enumerate(prompt):
                run = (run + int(p) - PAYLOAD_START) % spec.chain_mod
                answer[j] = run + PAYLOAD_START
        else:
            keys = rng.choice(np.arange(PAYLOAD_START, spec.vocab_size),
                              size=spec.kv_pairs, replace=False)
            values = rng.integers(PAYLOAD_START, spec.vocab_size, size=spec.kv_pairs)
            q_idx = rng.integers(0, spec.kv_pairs, size=spec.answer_len)
            prompt = np.empty(spec.prompt_len, dtype=np.int64)
            prompt[0:2 * spec.kv_pairs:2] = keys
            prompt[1:2 * spec.kv_pairs:2] = values
            prompt[2 * spec.kv_pairs:] = keys[q_idx]
            answer = values[q_idx]
        if spec.marker is not None:
            prompt = np.concatenate([[spec.marker], prompt])
        pairs.append((prompt.astype(np.int64), answer.astype(np.int64)))
    return TaskDataset(spec=spec, pairs=pairs)


def merge_pools(datasets, weights, n: int, seed: int) -> list:
    """Seeded weighted interleave of (prompt, answer) pairs from several
    task datasets; each dataset is consumed cyclically. Used as the rollout
    prompt pool and as mixed denoiser training data."""
    if len(datasets) != len(weights) or not datasets:
        raise ValueError("need one weight per dataset")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    w = w / w.sum()
    rng = util.derive_rng(seed, 0x9001)
    cursors = [0] * len(datasets)
    out = []
    for _ in range(n):
        k = int(rng.choice(len(datasets), p=w))
        ds = datasets[k]
        out.append(ds.pairs[cursors[k] % len(ds)])
        cursors[k] += 1
    return out


def exact_match_accuracy(outputs, references) -> float:
    """Fraction of outputs exactly equal to their reference answer span."""
    if len(outputs) != len(references):
        raise ValueError("outputs and references must align")
    if not outputs:
        return 0.0
    hits = sum(1 for o, r in zip(outputs, references)
               if np.array_equal(np.asarray(o), np.asarray(r)))
    return hits / len(outputs)


# ---------------------------------------------------------------------------
# Controller classification metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float


def controller_classification_metrics(predictions: LabelGrid,
                                      labels: LabelGrid) -> ClassificationReport:
    """Binarize both grids at 0.5; the positive class is *unconverged*
    (value < 0.5), matching the emphasis on recall over unconverged cells."""
    if set(predictions.values) != set(labels.values):
        raise ValueError("prediction and label grids cover different cells")
    cells = labels.cells()
    y = np.asarray([labels.values[c] < 0.5 for c in cells])       # true unconverged
    p = np.asarray([predictions.values[c] < 0.5 for c in cells])  # predicted unconverged
    tp = int((y & p).sum())
    tn = int((~y & ~p).sum())
    fp = int((~y & p).sum())
    fn = int((y & ~p).sum())
    acc = (tp + tn) / len(cells)
    tpr = tp / (tp + fn) if (tp + fn) else 0.0
    tnr = tn / (tn + fp) if (tn + fp) else 0.0
    prec = tp / (tp + fp) if (tp + fp) else 0.0
    f1 = 2 * prec * tpr / (prec + tpr) if (prec + tpr) else 0.0
    return ClassificationReport(accuracy=acc, balanced_accuracy=(tpr + tnr) / 2,
                                precision=prec, recall=tpr, f1=f1)


def pooled_classification_metrics(ctrl: Controller, trajectories) -> ClassificationReport:
    """Classification report over the labelable cells of several trajectories,
    keyed by (trajectory index, position, step)."""
    labels = LabelGrid()
    preds = LabelGrid()
    for i, traj in enumerate(trajectories):
        grid = label_trajectory(traj)
        pgrid = controller_prediction_grid(ctrl, traj)
        for (pos, step), v in grid.values.items():
            labels.values[(i, pos, step)] = v
        for (pos, step), v in pgrid.values.items():
            preds.values[(i, pos, step)] = v
    return controller_classification_metrics(preds, labels)


def controller_prediction_grid(ctrl: Controller, traj: Trajectory) -> LabelGrid:
    """Controller outputs on exactly the labelable cells of a trajectory."""
    labels = label_trajectory(traj)
    grid = LabelGrid(horizon=labels.horizon)
    by_cell = {}
    for rec in traj.steps:
        for e in rec.entries:
            by_cell[(e.position, rec.step)] = e
    cells = labels.cells()
    if not cells:
        return grid
    hid = np.stack([by_cell[c].hidden for c in cells])
    feats = np.stack([by_cell[c].features for c in cells])
    yhat = np.atleast_1d(ctrl.predict_batch(hid, feats)[0])
    for c, v in zip(cells, yhat):
        grid.values[c] = float(v)
    return grid


# ---------------------------------------------------------------------------
# Frontier sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrontierRecord:
    method: str
    param: float | None
    accuracy: float
    mean_nfe: float
    n: int
    seed: int


def _sweep_rule(method: str, param, controller, regulation):
    if method == "vanilla":
        return Top1(), None
    if method == "dynamic":
        return Threshold(param), None
    if method == "eb":
        return EntropyBound(param), None
    if method == "prr":
        if controller is None:
            raise ValueError("prr sweeps need a controller")
        return Regulated(param, regulation), controller
    raise ValueError(f"unknown sweep method '{method}'")


def _eval_point(payload):
    (denoiser, controller, prompts, answers, vocab, config, prompt_len) = payload
    outs, nfes = [], []
    for prompt_tokens in prompts:
        prompt = SequenceState.from_prompt(prompt_tokens, config.length, vocab)
        res = decode(denoiser, prompt, config, controller)
        outs.append(res.output[prompt_len:])
        nfes.append(res.nfe)
    return exact_match_accuracy(outs, answers), float(np.mean(nfes))


def sweep_frontier(denoiser, controller_or_none, dataset: TaskDataset, method: str,
                   parameter_grid, decode_template: DecodeConfig, seed: int = 0,
                   jobs: int = 1, regulation=None) -> list:
    """One FrontierRecord per grid point (vanilla ignores the grid)."""
    if method != "vanilla" and not len(parameter_grid):
        raise ValueError("parameter grid is empty")
    if regulation is None and controller_or_none is not None:
        regulation = controller_or_none.config
    vocab_size = dataset.spec.vocab_size
    from .diffusion import Vocabulary
    vocab = Vocabulary(vocab_size, mask_id=0)
    prompt_len = dataset.spec.full_prompt_len
    grid = [None] if method == "vanilla" else list(parameter_grid)
    payloads = []
    for param in grid:
        rule, ctrl = _sweep_rule(method, param, controller_or_none, regulation)
        cfg = replace(decode_template, rule=rule, seed=seed)
        payloads.append((denoiser, ctrl, dataset.prompts(), dataset.answers(),
                         vocab, cfg, prompt_len))
    if jobs <= 1:
        results = [_eval_point(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_point, payloads, chunksize=1))
    return [FrontierRecord(method=method, param=None if g is None else float(g),
                           accuracy=acc, mean_nfe=nfe, n=len(dataset), seed=seed)
            for g, (acc, nfe) in zip(grid, results)]


def write_frontier_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "param", "accuracy", "mean_nfe", "n", "seed"])
        for r in records:
            wr.writerow([r.method, "" if r.param is None else repr(r.param),
                         repr(r.accuracy), repr(r.mean_nfe), r.n, r.seed])


def write_classification_csv(reports: dict, path) -> None:
    """reports: split name -> ClassificationReport."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["split", "accuracy", "balanced_accuracy", "precision", "recall", "f1"])
        for split, r in reports.items():
            wr.writerow([split, repr(r.accuracy), repr(r.balanced_accuracy),
                         repr(r.precision), repr(r.recall), repr(r.f1)])


# ---------------------------------------------------------------------------
# Unmask-schedule export
# ---------------------------------------------------------------------------

def unmask_schedule_export(traj: Trajectory) -> list:
    """Rows (step, position, category) describing the per-step schedule.

    Categories: ``top1`` — the position the plain top-1 rule would refine
    (highest raw confidence among masked positions of the active block);
    ``expanded`` — additionally committed positions beyond that one;
    ``unmasked`` — every position committed this step (stars in the raster);
    ``redundant`` — still-masked cells whose current top-1 prediction already
    equals their final token.
    """
    unmask_at = traj.unmask_step_of()
    finals = traj.final_tokens
    block_size = traj.block_size
    gen_start = traj.prompt_len
    rows = []
    for rec in traj.steps:
        in_block = [e for e in rec.entries
                    if (e.position - gen_start) // block_size == rec.block]
        if in_block:
            best = max(in_block, key=lambda e: (e.top1_prob, -e.position))
            rows.append((rec.step, best.position, "top1"))
            committed = sorted(p for p, _ in rec.unmask)
            for p in committed:
                if p != best.position:
                    rows.append((rec.step, p, "expanded"))
        for p, _ in sorted(list(rec.unmask) + list(rec.forced)):
            rows.append((rec.step, p, "unmasked"))
        for e in rec.entries:
            if rec.step < unmask_at[e.position] and e.top1_token == int(finals[e.position]):
                rows.append((rec.step, e.position, "redundant"))
    return rows


def write_schedule_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "position", "category"])
        for step, pos, cat in rows:
            wr.writerow([step, pos, cat])


def write_heatmap_csv(labels: LabelGrid, predictions: LabelGrid, path) -> None:
    if set(labels.values) != set(predictions.values):
        raise ValueError("label and prediction grids cover different cells")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["position", "step", "label", "prediction"])
        for (pos, step) in labels.cells():
            wr.writerow([pos, step, repr(labels.values[(pos, step)]),
                         repr(predictions.values[(pos, step)])])


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationContext:
    denoiser: object
    dataset: TaskDataset            # evaluation prompts for the frontier
    train_prompts: list             # rollout prompt pool
    stage_cfg: StageConfig
    decode_template: DecodeConfig
    threshold_grid: tuple = (0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    alpha_grid: tuple = (0.5, 1.0, 1.5)
    mixing_grid: tuple = (1.0, 0.1, 0.01)
    controller: Controller | None = None   # reused by alpha_sweep
    jobs: int = 1


def run_ablation(kind: str, ctx: AblationContext, out_dir) -> dict:
    """Ablation harness; returns {arm name: frontier csv path} plus extras."""
    os.makedirs(out_dir, exist_ok=True)
    from .diffusion import Vocabulary
    vocab = Vocabulary(ctx.dataset.spec.vocab_size, mask_id=0)
    written = {}

    def arm_frontier(name, controller, regulation):
        recs = sweep_frontier(ctx.denoiser, controller, ctx.dataset, "prr",
                              ctx.threshold_grid, ctx.decode_template,
                              seed=ctx.stage_cfg.master_seed, jobs=ctx.jobs,
                              regulation=regulation)
        path = os.path.join(out_dir, f"frontier_{name}.csv")
        write_frontier_csv(recs, path)
        written[name] = path

    if kind == "alpha_sweep":
        if ctx.controller is None:
            raise ValueError("alpha_sweep reuses a trained controller; none given")
        for alpha in ctx.alpha_grid:
            reg = replace(ctx.stage_cfg.regulation, alpha=float(alpha))
            arm_frontier(f"alpha_{alpha}", ctx.controller, reg)
    elif kind == "mixing_sweep":
        for m in ctx.mixing_grid:
            cfg = replace(ctx.stage_cfg, mixing_ratio=float(m))
            art = run_progressive(ctx.denoiser, ctx.train_prompts, cfg, vocab,
                                  jobs=ctx.jobs)
            arm_frontier(f"mix_{m}", art.controllers[-1], cfg.regulation)
    elif kind == "no_trust_region":
        kls = {}
        for lam in (ctx.stage_cfg.trust_weight, 0.0):
            cfg = replace(ctx.stage_cfg, trust_weight=float(lam))
            art = run_progressive(ctx.denoiser, ctx.train_prompts, cfg, vocab,
                                  jobs=ctx.jobs)
            name = f"lambda_{lam}"
            arm_frontier(name, art.controllers[-1], cfg.regulation)
            kls[name] = mean_successive_probe_kl(art.controllers, art.probes,
                                                 cfg.regulation)
        kl_path = os.path.join(out_dir, "probe_kl.csv")
        with open(kl_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["arm", "mean_successive_kl"])
            for name, v in kls.items():
                wr.writerow([name, repr(v)])
        written["probe_kl"] = kl_path
    else:
        raise ValueError(f"unknown ablation kind '{kind}'")
    return written
