"""Versioned, canonical record of a full decoding rollout.

Format: JSON Lines. Line 1 is the header object, then one object per
refinement step, then a final ``{"final_tokens": [...]}`` line. Floats are
written with 17 significant digits so serialization is canonical: equal
trajectories produce byte-identical files, and read(write(t)) == t exactly.
Files ending in ``.gz`` are compressed/decompressed transparently.
"""

from __future__ import annotations

import gzip
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import util

FORMAT_VERSION = 1


class TrajectoryError(Exception):
    pass


class TrajectoryVersionError(TrajectoryError):
    pass


class TrajectoryParseError(TrajectoryError):
    pass


class TrajectoryValidationError(TrajectoryError):
    pass


@dataclass
class PositionEntry:
    """Observables for one masked position at one step (raw, pre-regulation)."""

    position: int
    top1_token: int
    top1_prob: float
    margin: float
    entropy: float
    features: np.ndarray          # the 11 refinement features
    hidden: np.ndarray            # denoiser hidden vector, width D
    full_row: np.ndarray | None = None   # optional full distribution row

    def __eq__(self, other):
        return (self.position == other.position
                and self.top1_token == other.top1_token
                and self.top1_prob == other.top1_prob
                and self.margin == other.margin
                and self.entropy == other.entropy
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.hidden, other.hidden)
                and ((self.full_row is None) == (other.full_row is None))
                and (self.full_row is None or np.array_equal(self.full_row, other.full_row)))


@dataclass
class StepRecord:
    step: int
    block: int
    entries: list = field(default_factory=list)       # PositionEntry, position-ascending
    unmask: list = field(default_factory=list)        # (position, token)
    forced: list = field(default_factory=list)        # budget-exhaustion commits

    def __eq__(self, other):
        return (self.step == other.step and self.block == other.block
                and self.entries == other.entries
                and self.unmask == other.unmask and self.forced == other.forced)


@dataclass
class Trajectory:
    length: int                   # full sequence length (prompt + generated)
    vocab: int
    steps_executed: int
    block_size: int
    rule: str
    seed: int
    denoiser_id: str
    controller_id: str            # "none" when decoding was unregulated
    prompt_len: int
    truncated: bool
    steps: list = field(default_factory=list)
    final_tokens: np.ndarray = None

    def __eq__(self, other):
        return (self.header() == other.header() and self.steps == other.steps
                and np.array_equal(self.final_tokens, other.final_tokens))

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "length": self.length,
            "vocab": self.vocab,
            "steps_executed": self.steps_executed,
            "block_size": self.block_size,
            "rule": self.rule,
            "seed": self.seed,
            "denoiser_id": self.denoiser_id,
            "controller_id": self.controller_id,
            "prompt_len": self.prompt_len,
            "truncated": self.truncated,
        }

    # -- derived views -------------------------------------------------------

    def unmask_step_of(self) -> dict:
        """position -> step at which it was committed (forced commits included)."""
        out = {}
        for rec in self.steps:
            for pos, _tok in list(rec.unmask) + list(rec.forced):
                out[pos] = rec.step
        return out

    def top1_paths(self) -> dict:
        """position -> {step: top1 token} over the steps it was masked."""
        paths: dict = {}
        for rec in self.steps:
            for e in rec.entries:
                paths.setdefault(e.position, {})[rec.step] = e.top1_token
        return paths


def validate_trajectory(traj: Trajectory) -> None:
    """Raise TrajectoryValidationError on any structural violation."""
    if traj.steps_executed < 1 or len(traj.steps) != traj.steps_executed:
        raise TrajectoryValidationError(
            f"steps_executed={traj.steps_executed} but {len(traj.steps)} step records")
    for i, rec in enumerate(traj.steps):
        if rec.step != i + 1:
            raise TrajectoryValidationError(f"step indices must run 1..T, got {rec.step} at slot {i}")
    if traj.final_tokens is None or len(traj.final_tokens) != traj.length:
        raise TrajectoryValidationError("final_tokens missing or wrong length")
    events: dict = {}
    for rec in traj.steps:
        for pos, tok in list(rec.unmask) + list(rec.forced):
            if pos in events:
                raise TrajectoryValidationError(f"position {pos} unmasked twice")
            events[pos] = tok
    gen_positions = set(range(traj.prompt_len, traj.length))
    if set(events) != gen_positions:
        missing = sorted(gen_positions - set(events))[:5]
        extra = sorted(set(events) - gen_positions)[:5]
        raise TrajectoryValidationError(
            f"unmask events must cover the generated region exactly "
            f"(missing {missing}, extra {extra})")
    for pos, tok in events.items():
        if int(traj.final_tokens[pos]) != int(tok):
            raise TrajectoryValidationError(
                f"final token at {pos} disagrees with its unmask event")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _entry_obj(e: PositionEntry):
    obj = {
        "p": int(e.position),
        "t1": int(e.top1_token),
        "p1": float(e.top1_prob),
        "mg": float(e.margin),
        "en": float(e.entropy),
        "f": [float(x) for x in e.features],
        "h": [float(x) for x in e.hidden],
    }
    if e.full_row is not None:
        obj["row"] = [float(x) for x in e.full_row]
    return obj


def _entry_from_obj(obj) -> PositionEntry:
    return PositionEntry(
        position=int(obj["p"]), top1_token=int(obj["t1"]), top1_prob=float(obj["p1"]),
        margin=float(obj["mg"]), entropy=float(obj["en"]),
        features=np.asarray(obj["f"], dtype=np.float64),
        hidden=np.asarray(obj["h"], dtype=np.float64),
        full_row=np.asarray(obj["row"], dtype=np.float64) if "row" in obj else None)


def _open_sink(sink, mode):
    """Returns (stream, close-callback). Paths ending in .gz are compressed."""
    if hasattr(sink, "write") or hasattr(sink, "read"):
        return sink, lambda: None
    path = os.fspath(sink)
    if path.endswith(".gz"):
        # zero mtime so identical trajectories give identical compressed bytes
        raw = open(path, mode + "b")
        gz = gzip.GzipFile(filename="", mode=mode + "b", fileobj=raw, mtime=0)
        def close():
            gz.close()
            raw.close()
        return gz, close
    fh = open(path, mode + "b")
    return fh, fh.close


def write_trajectory(traj: Trajectory, sink) -> int:
    """Serialize a validated trajectory; returns the byte count written."""
    validate_trajectory(traj)
    lines = [util.canon_json(traj.header())]
    for rec in traj.steps:
        obj = {
            "step": rec.step,
            "block": rec.block,
            "entries": [_entry_obj(e) for e in rec.entries],
            "unmask": [[int(p), int(t)] for p, t in rec.unmask],
        }
        if rec.forced:
            obj["forced"] = [[int(p), int(t)] for p, t in rec.forced]
        lines.append(util.canon_json(obj))
    lines.append(util.canon_json({"final_tokens": [int(t) for t in traj.final_tokens]}))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    fh, close = _open_sink(sink, "w")
    try:
        fh.write(payload)
    except OSError as exc:
        raise TrajectoryError(
            f"sink failure after a partial write (partial_write=True): {exc}") from exc
    finally:
        close()
    return len(payload)


def trajectory_bytes(traj: Trajectory) -> bytes:
    buf = io.BytesIO()
    write_trajectory(traj, buf)
    return buf.getvalue()


def read_trajectory(source) -> Trajectory:
    """Parse and invariant-check a trajectory file (or file-like object)."""
    fh, close = _open_sink(source, "r")
    try:
        data = fh.read()
    finally:
        close()
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not lines:
        raise TrajectoryParseError("empty trajectory file")

    def parse(i):
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise TrajectoryParseError(f"line {i + 1}: invalid JSON ({exc})") from None

    head = parse(0)
    version = head.get("format_version")
    if version != FORMAT_VERSION:
        raise TrajectoryVersionError(f"unsupported trajectory format version {version!r}")
    t_exec = int(head["steps_executed"])
    if len(lines) != t_exec + 2:
        raise TrajectoryParseError(
            f"expected {t_exec + 2} lines (header + {t_exec} steps + final), got {len(lines)}")
    steps = []
    for i in range(1, t_exec + 1):
        obj = parse(i)
        if "step" not in obj:
            raise TrajectoryParseError(f"line {i + 1}: not a step record")
        steps.append(StepRecord(
            step=int(obj["step"]), block=int(obj["block"]),
            entries=[_entry_from_obj(e) for e in obj["entries"]],
            unmask=[(int(p), int(t)) for p, t in obj["unmask"]],
            forced=[(int(p), int(t)) for p, t in obj.get("forced", [])]))
    tail = parse(t_exec + 1)
    if "final_tokens" not in tail:
        raise TrajectoryValidationError("missing final_tokens line")
    traj = Trajectory(
        length=int(head["length"]), vocab=int(head["vocab"]), steps_executed=t_exec,
        block_size=int(head["block_size"]), rule=str(head["rule"]), seed=int(head["seed"]),
        denoiser_id=str(head["denoiser_id"]), controller_id=str(head["controller_id"]),
        prompt_len=int(head["prompt_len"]), truncated=bool(head["truncated"]),
        steps=steps, final_tokens=np.asarray(tail["final_tokens"], dtype=np.int64))
    validate_trajectory(traj)
    return traj
