"""Progressive self-evolving controller training.

Stage 0 collects rollouts of the base decoding process (no controller,
top-1 rule), builds convergence-progress labels from them, and trains the
first controller. Each later stage k collects rollouts under controller k-1
with the stage-annealed confidence threshold, mixes the freshly labeled
examples into a bounded replay buffer, and trains controller k with a
masked binary cross-entropy objective plus a trust-region penalty: the
Huber-damped KL divergence between the reshaped token distributions induced
by the previous and the candidate controller on the stored base-distribution
context. Gradients flow into the candidate through its temperature.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, util
from .convergence import label_trajectory
from .diffusion import DecodeConfig, Regulated, SequenceState, Top1, decode
from .regulator import (Controller, RegulationConfig, effective_temperature,
                        temperature_grad, two_point_kl, two_point_logit)
from .trajectory import Trajectory, write_trajectory


@dataclass(frozen=True)
class StageConfig:
    """Knobs of the progressive loop (one object drives all stages)."""

    gen_length: int
    block_size: int
    step_budget: int
    stages: int = 5
    rollouts_per_stage: int = 200
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 64
    trust_weight: float = 3.0          # lambda
    huber_delta: float = 1.0
    mixing_ratio: float = 0.1
    buffer_capacity: int = 8192
    threshold_start: float = 0.95
    threshold_end: float = 0.80
    warm_start: bool = True
    master_seed: int = 0
    controller_width: int = 128
    controller_dropout: float = 0.1
    regulation: RegulationConfig = RegulationConfig()
    probe_count: int = 512
    use_full_dist: bool = False        # trust-region KL over stored full rows
    store_full_dist: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if not 0 < self.mixing_ratio <= 1:
            raise ValueError("mixing ratio must lie in (0,1]")
        for th in (self.threshold_start, self.threshold_end):
            if not 0 < th <= 1:
                raise ValueError("thresholds must lie in (0,1]")
        if self.rollouts_per_stage < 1:
            raise ValueError("need at least one rollout per stage")


def stage_threshold(k: int, stages: int, endpoints=(0.95, 0.80)) -> float:
    """Linear anneal of the unmasking threshold across stages."""
    if not 0 <= k < stages:
        raise ValueError(f"stage index {k} outside [0, {stages})")
    start, end = endpoints
    if stages == 1:
        return float(start)
    return float(start + (end - start) * k / (stages - 1))


@dataclass
class SupervisedExample:
    hidden: np.ndarray
    features: np.ndarray
    target: float
    base_top1: float           # raw top-1 mass, the reshaping context
    base_entropy: float
    traj_id: str
    position: int
    step: int
    stage: int = 0
    base_row: np.ndarray | None = None


@dataclass
class ReplayBuffer:
    capacity: int
    examples: list = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    def stage_counts(self) -> dict:
        out: dict = {}
        for e in self.examples:
            out[e.stage] = out.get(e.stage, 0) + 1
        return dict(sorted(out.items()))

    def mix_in(self, new_examples: list, ratio: float, rng: np.random.Generator):
        """Replace round(ratio * capacity) oldest-stage slots with new examples.

        An empty buffer is simply filled. New examples are subsampled
        uniformly; evictions hit the oldest stage tags first, uniformly at
        random within a tag.
        """
        if not new_examples:
            raise ValueError("cannot mix an empty example set into the buffer")
        if not self.examples:
            take = min(self.capacity, len(new_examples))
            idx = rng.choice(len(new_examples), size=take, replace=False)
            self.examples = [new_examples[i] for i in sorted(idx)]
            return self
        want = int(round(ratio * self.capacity))
        take = min(want, len(new_examples))
        if take == 0:
            return self
        idx = rng.choice(len(new_examples), size=take, replace=False)
        incoming = [new_examples[i] for i in sorted(idx)]
        evict = min(take, max(0, len(self.examples) + take - self.capacity))
        if evict:
            by_stage: dict = {}
            for i, e in enumerate(self.examples):
                by_stage.setdefault(e.stage, []).append(i)
            doomed: list = []
            for stage in sorted(by_stage):
                if len(doomed) >= evict:
                    break
                pool = by_stage[stage]
                need = evict - len(doomed)
                if len(pool) <= need:
                    doomed.extend(pool)
                else:
                    pick = rng.choice(len(pool), size=need, replace=False)
                    doomed.extend(pool[i] for i in sorted(pick))
            dead = set(doomed)
            self.examples = [e for i, e in enumerate(self.examples) if i not in dead]
        self.examples.extend(incoming)
        return self


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

def _one_rollout(denoiser, controller, prompt_tokens, config: DecodeConfig, vocab):
    prompt = SequenceState.from_prompt(prompt_tokens, config.length, vocab)
    return decode(denoiser, prompt, config, controller).trajectory


def _rollout_worker(payload):
    return _one_rollout(*payload)


def collect_rollouts(denoiser, controller_or_none, prompts, config: DecodeConfig,
                     rollouts: int, seed: int, vocab, jobs: int = 1) -> list:
    """R decoding rollouts under the given (possibly absent) controller.

    Prompts are cycled; rollout i records seed derive(seed, i) in its header.
    Results are identical for any job count.
    """
    if rollouts < 1:
        raise ValueError("rollout count must be >= 1")
    if not len(prompts):
        raise ValueError("prompt pool is empty")
    payloads = []
    for i in range(rollouts):
        cfg_i = replace(config, seed=int(np.random.SeedSequence(
            entropy=seed, spawn_key=(i,)).generate_state(1)[0]))
        payloads.append((denoiser, controller_or_none,
                         np.asarray(prompts[i % len(prompts)]), cfg_i, vocab))
    if jobs <= 1:
        return [_rollout_worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_rollout_worker, payloads, chunksize=1))


def examples_from_trajectory(traj: Trajectory, stage: int,
                             suffix_mode: str = "absorbing") -> list:
    """One supervised example per labelable cell of a rollout."""
    grid = label_trajectory(traj, suffix_mode=suffix_mode)
    by_cell = {}
    for rec in traj.steps:
        for e in rec.entries:
            by_cell[(e.position, rec.step)] = e
    traj_id = f"{traj.denoiser_id}/{traj.seed}"
    out = []
    for (pos, step) in grid.cells():
        e = by_cell[(pos, step)]
        out.append(SupervisedExample(
            hidden=e.hidden, features=e.features, target=grid.values[(pos, step)],
            base_top1=e.top1_prob, base_entropy=e.entropy,
            traj_id=traj_id, position=pos, step=step, stage=stage,
            base_row=e.full_row))
    return out


def build_training_set(trajectories: list, buffer: ReplayBuffer, ratio: float,
                       stage: int, seed: int,
                       suffix_mode: str = "absorbing") -> ReplayBuffer:
    """Label fresh rollouts and mix them into the replay buffer."""
    if not trajectories:
        raise ValueError("no trajectories to build training data from")
    new_examples: list = []
    for traj in trajectories:
        new_examples.extend(examples_from_trajectory(traj, stage, suffix_mode))
    if not new_examples:
        raise ValueError("rollouts produced no labelable cells")
    return buffer.mix_in(new_examples, ratio, util.derive_rng(seed, 0xB0F, stage))


# ---------------------------------------------------------------------------
# Trust-region objective
# ---------------------------------------------------------------------------

def _full_dist_kl(rows, tau_prev, tau_new):
    """KL(reshape(rows, tau_prev) || reshape(rows, tau_new)) per row, plus
    dKL/dtau_new. Rows share a vocabulary; zero entries stay excluded."""
    with np.errstate(divide="ignore"):
        logp = np.log(rows)
    safe = np.where(np.isfinite(logp), logp, 0.0)
    mask = np.isfinite(logp)

    def soft(tau):
        z = np.where(mask, logp / tau[:, None], -np.inf)
        z -= z.max(axis=1, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=1, keepdims=True)
        return q

    a = soft(tau_prev)
    b = soft(tau_new)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    kl = terms.sum(axis=1)
    e_a = (a * safe).sum(axis=1)
    e_b = (b * safe).sum(axis=1)
    dkl_dtau = (e_a - e_b) / tau_new ** 2
    return kl, dkl_dtau


def controller_objective(ctrl: Controller, prev_yhat, batch_x, batch_y, batch_p1,
                         cfg: StageConfig, mode: str = "eval", rng=None,
                         batch_rows=None):
    """Loss, per-output gradient, and term breakdown for one minibatch.

    ``prev_yhat`` is None at stage 0 (no trust region). Returns
    (total, dtotal/dyhat, bce, kl_term, cache).
    """
    yhat, cache = nn.net_forward(ctrl.params, ctrl.arch, batch_x, mode=mode, rng=rng)
    yhat = np.atleast_1d(yhat)
    bce, dbce = nn.masked_bce(yhat, batch_y)
    if prev_yhat is None or cfg.trust_weight == 0.0:
        kl_mean = 0.0
        dkl = np.zeros_like(yhat)
    else:
        reg = cfg.regulation
        tau_prev = np.atleast_1d(effective_temperature(prev_yhat, reg))
        tau_new = np.atleast_1d(effective_temperature(yhat, reg))
        if cfg.use_full_dist and batch_rows is not None:
            kl, dkl_dtau = _full_dist_kl(batch_rows, tau_prev, tau_new)
        else:
            z = two_point_logit(batch_p1)
            kl, dkl_dzb = two_point_kl(z / tau_prev, z / tau_new)
            dkl_dtau = dkl_dzb * (-z / tau_new ** 2)
        hval, hgrad = nn.huber(kl, cfg.huber_delta)
        kl_mean = float(hval.mean())
        dkl = hgrad * dkl_dtau * temperature_grad(yhat, reg) / len(yhat)
    total = bce + cfg.trust_weight * kl_mean
    dtotal = dbce + cfg.trust_weight * dkl
    return total, dtotal, bce, cfg.trust_weight * kl_mean, cache


def train_controller_stage(prev: Controller | None, buffer: ReplayBuffer,
                           cfg: StageConfig, stage: int):
    """Train the stage-``stage`` controller on the buffer; returns
    (controller, per-epoch metrics rows)."""
    if not len(buffer):
        raise ValueError("replay buffer is empty")
    if prev is not None and cfg.warm_start:
        ctrl = prev.clone()
        ctrl.stage = stage
    else:
        hidden_dim = len(buffer.examples[0].hidden)
        ctrl = Controller(hidden_dim, cfg.controller_width, cfg.regulation,
                          dropout=cfg.controller_dropout, stage=stage,
                          seed=int(np.random.SeedSequence(
                              entropy=cfg.master_seed, spawn_key=(0xC7, stage)
                          ).generate_state(1)[0]))

    x = np.stack([np.concatenate([e.hidden, e.features]) for e in buffer.examples])
    y = np.asarray([e.target for e in buffer.examples])
    p1 = np.asarray([e.base_top1 for e in buffer.examples])
    rows = None
    if cfg.use_full_dist and all(e.base_row is not None for e in buffer.examples):
        rows = np.stack([e.base_row for e in buffer.examples])
    prev_yhat = None
    if prev is not None:
        out, _ = prev.predict_batch(x[:, :ctrl.hidden_dim], x[:, ctrl.hidden_dim:])
        prev_yhat = np.atleast_1d(out)

    hyper = nn.TrainHyper(learning_rate=cfg.learning_rate, huber_delta=cfg.huber_delta)
    state = nn.AdamWState()
    shuffle_rng = util.derive_rng(cfg.master_seed, 0x5F, stage)
    drop_rng = util.derive_rng(cfg.master_seed, 0xD0, stage)
    metrics = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(len(y))
        tot_sum = bce_sum = kl_sum = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            total, dtotal, bce, kl_term, cache = controller_objective(
                ctrl, None if prev_yhat is None else prev_yhat[sel],
                x[sel], y[sel], p1[sel], cfg, mode="train", rng=drop_rng,
                batch_rows=None if rows is None else rows[sel])
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite controller loss at stage {stage}, epoch {epoch}, batch {start}")
            grads = nn.net_backward(cache, ctrl.params, dtotal)
            nn.adamw_step(ctrl.params, grads, state, hyper)
            tot_sum += total * len(sel)
            bce_sum += bce * len(sel)
            kl_sum += kl_term * len(sel)
        pred, _ = ctrl.predict_batch(x[:, :ctrl.hidden_dim], x[:, ctrl.hidden_dim:])
        acc = float(((np.atleast_1d(pred) >= 0.5) == (y >= 0.5)).mean())
        n = len(y)
        metrics.append({"epoch": epoch, "bce": bce_sum / n, "kl_term": kl_sum / n,
                        "total": tot_sum / n, "train_acc": acc})
    return ctrl, metrics


# ---------------------------------------------------------------------------
# The progressive loop
# ---------------------------------------------------------------------------

@dataclass
class StageArtifacts:
    controllers: list
    metrics: list              # one metrics row list per stage
    buffer_history: list       # stage-count dicts after each mix
    probes: list               # SupervisedExample probe set from stage 0
    thresholds: list


def _write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "bce", "kl_term", "total", "train_acc"])
        for r in rows:
            wr.writerow([r["epoch"], repr(float(r["bce"])), repr(float(r["kl_term"])),
                         repr(float(r["total"])), repr(float(r["train_acc"]))])


def run_progressive(denoiser, prompts, cfg: StageConfig, vocab,
                    out_dir=None, jobs: int = 1,
                    suffix_mode: str = "absorbing") -> StageArtifacts:
    """Run the full K-stage loop; optionally persist per-stage artifacts."""
    controllers: list = []
    all_metrics: list = []
    buffer_history: list = []
    thresholds: list = []
    probes: list = []
    buffer = ReplayBuffer(capacity=cfg.buffer_capacity)
    endpoints = (cfg.threshold_start, cfg.threshold_end)

    for k in range(cfg.stages):
        th = stage_threshold(k, cfg.stages, endpoints)
        thresholds.append(th)
        if k == 0:
            rule = Top1()
            ctrl_for_rollouts = None
        else:
            rule = Regulated(th, cfg.regulation)
            ctrl_for_rollouts = controllers[k - 1]
        decode_cfg = DecodeConfig(length=cfg.gen_length, step_budget=cfg.step_budget,
                                  block_size=cfg.block_size, rule=rule,
                                  store_full_dist=cfg.store_full_dist)
        seed_k = int(np.random.SeedSequence(entropy=cfg.master_seed,
                                            spawn_key=(0x50, k)).generate_state(1)[0])
        trajs = collect_rollouts(denoiser, ctrl_for_rollouts, prompts, decode_cfg,
                                 cfg.rollouts_per_stage, seed_k, vocab, jobs=jobs)
        buffer = build_training_set(trajs, buffer, 1.0 if k == 0 else cfg.mixing_ratio,
                                    stage=k, seed=cfg.master_seed,
                                    suffix_mode=suffix_mode)
        buffer_history.append(buffer.stage_counts())
        if k == 0:
            probe_rng = util.derive_rng(cfg.master_seed, 0x9B)
            take = min(cfg.probe_count, len(buffer))
            pick = probe_rng.choice(len(buffer), size=take, replace=False)
            probes = [buffer.examples[i] for i in sorted(pick)]
        prev = controllers[k - 1] if k else None
        ctrl, metrics = train_controller_stage(prev, buffer, cfg, k)
        controllers.append(ctrl)
        all_metrics.append(metrics)

        if out_dir is not None:
            stage_dir = os.path.join(out_dir, f"stage_{k}")
            os.makedirs(os.path.join(stage_dir, "rollouts"), exist_ok=True)
            ctrl.save(os.path.join(stage_dir, "controller.bin"))
            _write_metrics_csv(metrics, os.path.join(stage_dir, "metrics.csv"))
            for i, traj in enumerate(trajs):
                write_trajectory(traj, os.path.join(
                    stage_dir, "rollouts", f"rollout_{i:04d}.traj.jsonl"))

    return StageArtifacts(controllers=controllers, metrics=all_metrics,
                          buffer_history=buffer_history, probes=probes,
                          thresholds=thresholds)


def mean_successive_probe_kl(controllers: list, probes: list,
                             regulation: RegulationConfig) -> float:
    """Mean per-token KL between reshaped probe distributions of successive
    controllers (the quantity the trust region penalizes)."""
    if len(controllers) < 2:
        raise ValueError("need at least two controllers")
    if not probes:
        raise ValueError("probe set is empty")
    x_h = np.stack([p.hidden for p in probes])
    x_f = np.stack([p.features for p in probes])
    z = two_point_logit(np.asarray([p.base_top1 for p in probes]))
    total = 0.0
    for a, b in zip(controllers[:-1], controllers[1:]):
        ya = np.atleast_1d(a.predict_batch(x_h, x_f)[0])
        yb = np.atleast_1d(b.predict_batch(x_h, x_f)[0])
        kl, _ = two_point_kl(z / np.atleast_1d(effective_temperature(ya, regulation)),
                             z / np.atleast_1d(effective_temperature(yb, regulation)))
        total += float(kl.mean())
    return total / (len(controllers) - 1)
