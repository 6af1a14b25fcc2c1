"""Trajectory-grounded convergence progress and redundancy statistics.

For each masked cell (position, step t) of a recorded rollout with executed
horizon T, the label is a gated, distance-weighted suffix-agreement score:
the current top-1 prediction must already equal the finally committed token
(else the label is 0), and the score then measures how persistently future
predictions stay on that token, weighted by a linearly decaying kernel over
steps t+1..T. Steps at or after the commit trivially agree (commits are
absorbing); the alternative of truncating the suffix at the commit step with
renormalized weights is available via ``suffix_mode="truncate"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .trajectory import Trajectory
from .util import canon_json


@dataclass
class SuffixWeights:
    origin: int
    horizon: int
    weights: np.ndarray   # over future steps origin+1 .. horizon


def suffix_weights(t: int, horizon: int) -> SuffixWeights:
    """Linearly decaying, normalized weights over the future steps (t, T]."""
    if t < 1 or t >= horizon:
        raise ValueError(f"need 1 <= t < T, got t={t}, T={horizon}")
    raw = horizon - np.arange(t + 1, horizon + 1, dtype=np.float64) + 1.0
    return SuffixWeights(origin=t, horizon=horizon, weights=raw / raw.sum())


def convergence_progress(top1_path, unmask_step: int, final_token: int,
                         t: int, horizon: int) -> float:
    """Label for one position at step t given its top-1 path.

    ``top1_path[k]`` is the top-1 token at step k+1, defined at least for the
    steps before the commit; steps at or after ``unmask_step`` count as
    agreeing with the final token.
    """
    if t >= unmask_step:
        raise ValueError(f"step {t} is not before the position's commit at {unmask_step}")
    sw = suffix_weights(t, horizon)
    path = np.asarray(top1_path)
    if int(path[t - 1]) != int(final_token):
        return 0.0
    score = 0.0
    for w, tau in zip(sw.weights, range(t + 1, horizon + 1)):
        tok = final_token if tau >= unmask_step else path[tau - 1]
        if int(tok) == int(final_token):
            score += w
    return float(score)


@dataclass
class LabelGrid:
    """Map (position, step) -> convergence progress for labelable cells."""

    values: dict = field(default_factory=dict)
    horizon: int = 0

    def __len__(self):
        return len(self.values)

    def cells(self):
        return sorted(self.values)

    def as_arrays(self):
        cells = self.cells()
        vals = np.asarray([self.values[c] for c in cells], dtype=np.float64)
        return cells, vals


def label_trajectory(traj: Trajectory, suffix_mode: str = "absorbing") -> LabelGrid:
    """Labels for every masked cell with t < commit step and t < T.

    ``suffix_mode="absorbing"`` (default) counts post-commit steps as
    agreement; ``"truncate"`` restricts the suffix to steps up to and
    including the commit and renormalizes the decay weights over that range.
    """
    if suffix_mode not in ("absorbing", "truncate"):
        raise ValueError(f"unknown suffix mode '{suffix_mode}'")
    horizon = traj.steps_executed
    grid = LabelGrid(horizon=horizon)
    if horizon < 2:
        return grid
    unmask_at = traj.unmask_step_of()
    paths = traj.top1_paths()
    finals = traj.final_tokens
    decay = np.arange(horizon, 0, -1.0)      # weight of step tau is T - tau + 1

    for pos, path in paths.items():
        commit = unmask_at[pos]
        final = int(finals[pos])
        last_t = min(commit - 1, horizon - 1)
        if last_t < 1:
            continue
        steps = np.arange(1, last_t + 1)
        agree = np.array([path[int(s)] == final for s in steps], dtype=np.float64)
        # suffix agreement indicator per future step tau in 2..T
        tail_end = horizon if suffix_mode == "absorbing" else min(commit, horizon)
        ind = np.zeros(horizon + 1)
        for tau in range(2, tail_end + 1):
            if tau >= commit:
                ind[tau] = 1.0
            else:
                ind[tau] = 1.0 if path[tau] == final else 0.0
        weighted = ind[1:] * decay           # index tau-1
        for t, gate in zip(steps, agree):
            if gate == 0.0:
                grid.values[(pos, int(t))] = 0.0
                continue
            end = tail_end
            num = weighted[t:end].sum()      # tau = t+1 .. end
            den = decay[t:end].sum()
            grid.values[(pos, int(t))] = float(num / den) if den > 0 else 0.0
    return grid


def redundancy_fraction(traj: Trajectory) -> float:
    """Fraction of pre-commit masked cells whose top-1 already equals the
    finally committed token; 0 when no such cells exist."""
    unmask_at = traj.unmask_step_of()
    finals = traj.final_tokens
    redundant, total = 0, 0
    for rec in traj.steps:
        for e in rec.entries:
            if rec.step < unmask_at[e.position]:
                total += 1
                if e.top1_token == int(finals[e.position]):
                    redundant += 1
    return redundant / total if total else 0.0


# ---------------------------------------------------------------------------
# Sidecar serialization: one JSON line per labeled cell
# ---------------------------------------------------------------------------

def write_labels(grid: LabelGrid, path) -> int:
    lines = [canon_json({"kind": "labels", "horizon": grid.horizon, "cells": len(grid)})]
    for (pos, step) in grid.cells():
        lines.append(canon_json({"position": pos, "step": step, "y": grid.values[(pos, step)]}))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


def read_labels(path) -> LabelGrid:
    with open(path, "rb") as fh:
        lines = fh.read().decode("utf-8").splitlines()
    head = json.loads(lines[0])
    grid = LabelGrid(horizon=int(head["horizon"]))
    for line in lines[1:]:
        obj = json.loads(line)
        grid.values[(int(obj["position"]), int(obj["step"]))] = float(obj["y"])
    return grid
