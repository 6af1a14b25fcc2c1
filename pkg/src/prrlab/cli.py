"""Command-line entry point orchestrating the full pipeline.

Subcommands: train-denoiser, rollout, label, evolve, decode, sweep, ablate,
report-data. Every run writes a resolved-config snapshot (sorted key=value
lines) into its output directory; rerunning from that snapshot reproduces
the outputs byte for byte, independent of --jobs.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import traceback

from . import bench, convergence, evolve as evolve_mod, util
from .bench import TaskSpec, make_task
from .denoiser import NeuralDenoiser, NeuralDenoiserConfig, train_denoiser
from .diffusion import (DecodeConfig, EntropyBound, Regulated, SequenceState,
                        Threshold, Top1, Vocabulary, decode)
from .evolve import StageConfig
from .regulator import Controller, RegulationConfig
from .trajectory import read_trajectory, write_trajectory

DEFAULTS = {
    "seed": "0",
    "task.mix": "",
    "task.kind": "reverse",
    "task.prompt_len": "32",
    "task.answer_len": "32",
    "task.vocab": "24",
    "task.n": "2000",
    "task.kv_pairs": "4",
    "denoiser.embed_dim": "16",
    "denoiser.context_window": "auto",
    "denoiser.mix_channels": "12",
    "denoiser.hidden_width": "224",
    "denoiser.hidden_dim": "64",
    "denoiser.pos_dim": "16",
    "denoiser.epochs": "20",
    "denoiser.learning_rate": "3e-3",
    "denoiser.batch_size": "64",
    "decode.block_size": "8",
    "decode.step_budget": "auto",
    "decode.rule": "threshold",
    "decode.threshold": "0.9",
    "decode.gamma": "1.0",
    "decode.prompt_index": "0",
    "regulation.tau0": "1.0",
    "regulation.alpha": "1.0",
    "regulation.mode": "sharpen",
    "evolve.stages": "3",
    "evolve.rollouts_per_stage": "48",
    "evolve.epochs": "10",
    "evolve.learning_rate": "1e-4",
    "evolve.batch_size": "64",
    "evolve.trust_weight": "3.0",
    "evolve.huber_delta": "1.0",
    "evolve.mixing_ratio": "0.1",
    "evolve.buffer_capacity": "8192",
    "evolve.threshold_start": "0.95",
    "evolve.threshold_end": "0.80",
    "evolve.warm_start": "true",
    "evolve.controller_width": "128",
    "evolve.controller_dropout": "0.1",
    "evolve.probe_count": "512",
    "evolve.train_pool": "256",
    "evolve.use_full_dist": "false",
    "sweep.method": "prr",
    "sweep.grid": "0.7,0.75,0.8,0.85,0.9,0.95",
    "sweep.n": "128",
    "ablate.kind": "no_trust_region",
}


class CliError(Exception):
    pass


def load_config(path) -> dict:
    cfg = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set needs key=value, got '{item}'")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    return cfg


def write_snapshot(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _bool(v: str) -> bool:
    return v.lower() in ("1", "true", "yes", "on")


def parse_mix(cfg: dict):
    """task.mix = "kind:weight,kind:weight" (empty: just task.kind, no marker)."""
    raw = cfg.get("task.mix", "").strip()
    if not raw:
        return [(cfg["task.kind"], 1.0, None)]
    out = []
    for i, part in enumerate(raw.split(",")):
        kind, _, w = part.partition(":")
        out.append((kind.strip(), float(w) if w else 1.0, bench.PAYLOAD_START + i))
    return out


def task_from_config(cfg: dict, seed_offset: int = 0, kind: str | None = None,
                     marker: int | None = None) -> bench.TaskDataset:
    spec = TaskSpec(kind=kind or cfg["task.kind"], prompt_len=int(cfg["task.prompt_len"]),
                    answer_len=int(cfg["task.answer_len"]),
                    vocab_size=int(cfg["task.vocab"]), n=int(cfg["task.n"]),
                    seed=int(cfg["seed"]) + seed_offset,
                    kv_pairs=int(cfg["task.kv_pairs"]), marker=marker)
    return make_task(spec)


def task_pool_from_config(cfg: dict, n: int, seed_offset: int = 0) -> list:
    """Weighted (prompt, answer) pool over the configured task mixture."""
    parts = parse_mix(cfg)
    datasets = [task_from_config(cfg, seed_offset + i, kind=k, marker=m)
                for i, (k, _w, m) in enumerate(parts)]
    weights = [w for _k, w, _m in parts]
    return bench.merge_pools(datasets, weights, n, seed=int(cfg["seed"]) + 13 + seed_offset)


def denoiser_config_from(cfg: dict) -> NeuralDenoiserConfig:
    win = cfg["denoiser.context_window"]
    return NeuralDenoiserConfig(
        vocab_size=int(cfg["task.vocab"]),
        embed_dim=int(cfg["denoiser.embed_dim"]),
        context_window=None if win == "auto" else int(win),
        mix_channels=int(cfg["denoiser.mix_channels"]),
        hidden_width=int(cfg["denoiser.hidden_width"]),
        hidden_dim=int(cfg["denoiser.hidden_dim"]),
        pos_dim=int(cfg["denoiser.pos_dim"]),
        epochs=int(cfg["denoiser.epochs"]),
        learning_rate=float(cfg["denoiser.learning_rate"]),
        batch_size=int(cfg["denoiser.batch_size"]))


def decode_config_from(cfg: dict, store_full: bool) -> DecodeConfig:
    length = int(cfg["task.answer_len"])
    budget = cfg["decode.step_budget"]
    budget = length if budget == "auto" else int(budget)
    kind = cfg["decode.rule"]
    if kind == "top1":
        rule = Top1()
    elif kind == "threshold":
        rule = Threshold(float(cfg["decode.threshold"]))
    elif kind == "entropy_bound":
        rule = EntropyBound(float(cfg["decode.gamma"]))
    elif kind == "regulated":
        rule = Regulated(float(cfg["decode.threshold"]), regulation_from(cfg))
    else:
        raise CliError(f"unknown decode.rule '{kind}'")
    return DecodeConfig(length=length, step_budget=budget,
                        block_size=int(cfg["decode.block_size"]), rule=rule,
                        seed=int(cfg["seed"]), store_full_dist=store_full)


def regulation_from(cfg: dict) -> RegulationConfig:
    return RegulationConfig(tau0=float(cfg["regulation.tau0"]),
                            alpha=float(cfg["regulation.alpha"]),
                            mode=cfg["regulation.mode"])


def stage_config_from(cfg: dict, store_full_dist: bool = False) -> StageConfig:
    length = int(cfg["task.answer_len"])
    budget = cfg["decode.step_budget"]
    return StageConfig(
        gen_length=length,
        block_size=int(cfg["decode.block_size"]),
        step_budget=length if budget == "auto" else int(budget),
        stages=int(cfg["evolve.stages"]),
        rollouts_per_stage=int(cfg["evolve.rollouts_per_stage"]),
        epochs=int(cfg["evolve.epochs"]),
        learning_rate=float(cfg["evolve.learning_rate"]),
        batch_size=int(cfg["evolve.batch_size"]),
        trust_weight=float(cfg["evolve.trust_weight"]),
        huber_delta=float(cfg["evolve.huber_delta"]),
        mixing_ratio=float(cfg["evolve.mixing_ratio"]),
        buffer_capacity=int(cfg["evolve.buffer_capacity"]),
        threshold_start=float(cfg["evolve.threshold_start"]),
        threshold_end=float(cfg["evolve.threshold_end"]),
        warm_start=_bool(cfg["evolve.warm_start"]),
        master_seed=int(cfg["seed"]),
        controller_width=int(cfg["evolve.controller_width"]),
        controller_dropout=float(cfg["evolve.controller_dropout"]),
        regulation=regulation_from(cfg),
        probe_count=int(cfg["evolve.probe_count"]),
        use_full_dist=_bool(cfg["evolve.use_full_dist"]),
        store_full_dist=store_full_dist or _bool(cfg["evolve.use_full_dist"]))


def _vocab(cfg: dict) -> Vocabulary:
    return Vocabulary(int(cfg["task.vocab"]), mask_id=0)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train_denoiser(args, cfg):
    pairs = task_pool_from_config(cfg, n=int(cfg["task.n"]))
    model = train_denoiser(pairs, denoiser_config_from(cfg),
                           seed=int(cfg["seed"]), vocab=_vocab(cfg))
    out = os.path.join(args.out, "denoiser.bin")
    model.save(out)
    rep = model.train_report
    with open(os.path.join(args.out, "train_report.json"), "w") as fh:
        fh.write(util.canon_json({k: rep[k] for k in sorted(rep)}) + "\n")
    print(f"trained denoiser -> {out} (held-out masked accuracy "
          f"{rep['masked_accuracy']:.4f})")
    return 0


def _load_denoiser(args):
    if not args.denoiser:
        raise CliError("this subcommand requires --denoiser <checkpoint>")
    return NeuralDenoiser.load(args.denoiser)


def _load_controller(args):
    return Controller.load(args.controller) if args.controller else None


def cmd_rollout(args, cfg):
    model = _load_denoiser(args)
    controller = _load_controller(args)
    pool = [p for p, _ in task_pool_from_config(cfg, n=int(cfg["evolve.train_pool"]))]
    dcfg = decode_config_from(cfg, args.store_full_dist)
    n = int(cfg["evolve.rollouts_per_stage"])
    trajs = evolve_mod.collect_rollouts(model, controller, pool, dcfg,
                                        n, int(cfg["seed"]), _vocab(cfg),
                                        jobs=args.jobs)
    roll_dir = os.path.join(args.out, "rollouts")
    os.makedirs(roll_dir, exist_ok=True)
    for i, t in enumerate(trajs):
        write_trajectory(t, os.path.join(roll_dir, f"rollout_{i:04d}.traj.jsonl"))
    print(f"wrote {len(trajs)} rollouts -> {roll_dir}")
    return 0


def cmd_label(args, cfg):
    paths = []
    for src in args.inputs:
        if os.path.isdir(src):
            paths.extend(sorted(glob.glob(os.path.join(src, "*.traj.jsonl"))
                                + glob.glob(os.path.join(src, "*.traj.jsonl.gz"))))
        else:
            paths.append(src)
    if not paths:
        raise CliError("no trajectory files found")
    os.makedirs(args.out, exist_ok=True)
    for p in paths:
        traj = read_trajectory(p)
        grid = convergence.label_trajectory(traj)
        base = os.path.basename(p).split(".traj.jsonl")[0]
        convergence.write_labels(grid, os.path.join(args.out, base + ".labels.jsonl"))
    print(f"labeled {len(paths)} trajectories -> {args.out}")
    return 0


def cmd_evolve(args, cfg):
    model = _load_denoiser(args)
    pool = [p for p, _ in task_pool_from_config(cfg, n=int(cfg["evolve.train_pool"]))]
    scfg = stage_config_from(cfg, store_full_dist=args.store_full_dist)
    art = evolve_mod.run_progressive(model, pool, scfg, _vocab(cfg),
                                     out_dir=args.out, jobs=args.jobs)
    print(f"ran {scfg.stages} stages -> {args.out} "
          f"(thresholds {', '.join(f'{t:.3f}' for t in art.thresholds)})")
    return 0


def cmd_decode(args, cfg):
    model = _load_denoiser(args)
    controller = _load_controller(args)
    pool = task_pool_from_config(cfg, n=max(1, int(cfg["decode.prompt_index"]) + 1))
    idx = int(cfg["decode.prompt_index"])
    prompt_tokens = pool[idx % len(pool)][0]
    dcfg = decode_config_from(cfg, args.store_full_dist)
    prompt = SequenceState.from_prompt(prompt_tokens, dcfg.length, _vocab(cfg))
    res = decode(model, prompt, dcfg, controller)
    out = os.path.join(args.out, "result.traj.jsonl")
    write_trajectory(res.trajectory, out)
    print(f"decoded prompt {idx}: nfe={res.nfe} truncated={res.truncated} -> {out}")
    return 0


def _eval_dataset(cfg) -> bench.TaskDataset:
    """Held-out prompts of the primary task kind (distinct generation seed)."""
    kind, _w, marker = parse_mix(cfg)[0]
    dataset = task_from_config(cfg, seed_offset=1000, kind=kind, marker=marker)
    eval_n = min(int(cfg["sweep.n"]), len(dataset))
    return bench.TaskDataset(dataset.spec, dataset.pairs[:eval_n])


def cmd_sweep(args, cfg):
    model = _load_denoiser(args)
    controller = _load_controller(args)
    dataset = _eval_dataset(cfg)
    grid = [float(x) for x in cfg["sweep.grid"].split(",") if x]
    method = cfg["sweep.method"]
    dcfg = decode_config_from(cfg, False)
    recs = bench.sweep_frontier(model, controller, dataset, method, grid, dcfg,
                                seed=int(cfg["seed"]), jobs=args.jobs,
                                regulation=regulation_from(cfg))
    out = os.path.join(args.out, "frontier.csv")
    bench.write_frontier_csv(recs, out)
    print(f"swept {method} over {len(recs)} points -> {out}")
    return 0


def cmd_ablate(args, cfg):
    model = _load_denoiser(args)
    eval_set = _eval_dataset(cfg)
    train_pool = [p for p, _ in task_pool_from_config(cfg, n=int(cfg["evolve.train_pool"]))]
    ctx = bench.AblationContext(
        denoiser=model, dataset=eval_set, train_prompts=train_pool,
        stage_cfg=stage_config_from(cfg),
        decode_template=decode_config_from(cfg, False),
        threshold_grid=tuple(float(x) for x in cfg["sweep.grid"].split(",") if x),
        controller=_load_controller(args), jobs=args.jobs)
    written = bench.run_ablation(cfg["ablate.kind"], ctx, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_report_data(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.traj:
        traj = read_trajectory(args.traj)
        rows = bench.unmask_schedule_export(traj)
        path = os.path.join(args.out, "schedule.csv")
        bench.write_schedule_csv(rows, path)
        wrote.append(path)
        if args.controller:
            ctrl = Controller.load(args.controller)
            labels = convergence.label_trajectory(traj)
            preds = bench.controller_prediction_grid(ctrl, traj)
            hm = os.path.join(args.out, "heatmap.csv")
            bench.write_heatmap_csv(labels, preds, hm)
            wrote.append(hm)
            cm = os.path.join(args.out, "controller_metrics.csv")
            bench.write_classification_csv(
                {"trajectory": bench.controller_classification_metrics(preds, labels)}, cm)
            wrote.append(cm)
    if not wrote:
        raise CliError("report-data needs --traj (optionally with --controller)")
    print("wrote " + ", ".join(wrote))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prrlab",
        description="Masked-diffusion decoding lab with learned refinement regulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, denoiser=False, controller=False, inputs=False, traj=False):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")
        p.add_argument("--store-full-dist", action="store_true",
                       help="record full distribution rows in trajectories")
        if denoiser:
            p.add_argument("--denoiser", help="denoiser checkpoint path")
        if controller:
            p.add_argument("--controller", help="controller checkpoint path")
        if inputs:
            p.add_argument("inputs", nargs="*", help="trajectory files or directories")
        if traj:
            p.add_argument("--traj", help="trajectory file to export from")

    common(sub.add_parser("train-denoiser", help="fit the neural denoiser on a task"))
    common(sub.add_parser("rollout", help="collect decoding rollouts"),
           denoiser=True, controller=True)
    common(sub.add_parser("label", help="build convergence-progress labels"),
           inputs=True)
    common(sub.add_parser("evolve", help="run progressive controller training"),
           denoiser=True)
    common(sub.add_parser("decode", help="decode one prompt and store the trajectory"),
           denoiser=True, controller=True)
    common(sub.add_parser("sweep", help="trace an accuracy-vs-NFE frontier"),
           denoiser=True, controller=True)
    common(sub.add_parser("ablate", help="run an ablation arm"),
           denoiser=True, controller=True)
    common(sub.add_parser("report-data", help="export plotting CSVs"),
           controller=True, traj=True)
    return parser


HANDLERS = {
    "train-denoiser": cmd_train_denoiser,
    "rollout": cmd_rollout,
    "label": cmd_label,
    "evolve": cmd_evolve,
    "decode": cmd_decode,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report-data": cmd_report_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse uses exit 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        write_snapshot(cfg, args.out)
        return HANDLERS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:    # noqa: BLE001 - surface any runtime failure as exit 1
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
