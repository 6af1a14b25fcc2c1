"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured values. The heavyweight pipeline (criteria 6-8) is trained once
per session; everything is seeded, so results are identical across reruns.

Run with: pytest tests/test_acceptance.py -v -s
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from prrlab import nn
from prrlab.bench import (TaskSpec, make_task, merge_pools,
                          pooled_classification_metrics, sweep_frontier,
                          unmask_schedule_export)
from prrlab.convergence import label_trajectory, redundancy_fraction, suffix_weights
from prrlab.denoiser import (NeuralDenoiserConfig, OracleSpec, TabularOracle,
                             train_denoiser)
from prrlab.diffusion import (DecodeConfig, Regulated, SequenceState, Threshold,
                              Top1, Vocabulary, decode)
from prrlab.evolve import (StageConfig, collect_rollouts,
                           mean_successive_probe_kl, run_progressive)
from prrlab.regulator import (FEATURE_COUNT, Controller, RegulationConfig,
                              effective_temperature, reshape_distribution,
                              temperature_grad, two_point_kl, two_point_logit)
from prrlab.trajectory import trajectory_bytes
from prrlab.util import derive_rng

from conftest import scripted_redundancy_trajectory, synthetic_trajectory
from test_convergence import brute_force_grid

VOCAB = Vocabulary(24, mask_id=0)
GEN = 32


def _report(n, msg):
    print(f"\nACCEPTANCE {n}: PASS - {msg}")


# ---------------------------------------------------------------------------
# Criterion 1: suffix-weight normalization and decay
# ---------------------------------------------------------------------------

def test_criterion_1_suffix_weight_normalization():
    rng = derive_rng(0xACC, 1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        horizon = int(rng.integers(2, 513))
        t = int(rng.integers(1, horizon))
        w = suffix_weights(t, horizon).weights
        worst = max(worst, abs(float(w.sum()) - 1.0))
        assert np.all(np.diff(w) <= 0.0)
        assert np.all(w > 0.0)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-12
    assert elapsed < 1.0
    _report(1, f"10^4 random (t,T): max |sum-1| = {worst:.2e}, "
               f"non-increasing, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# Criterion 2: label construction matches the brute-force oracle
# ---------------------------------------------------------------------------

def test_criterion_2_label_oracle_equivalence():
    rng = derive_rng(0xACC, 2)
    t0 = time.perf_counter()
    worst = 0.0
    cells = 0
    for _ in range(1000):
        traj = synthetic_trajectory(rng, length=int(rng.integers(2, 9)),
                                    horizon=int(rng.integers(2, 14)),
                                    vocab=int(rng.integers(3, 8)))
        got = label_trajectory(traj)
        want = brute_force_grid(traj)
        assert set(got.values) == set(want)
        cells += len(want)
        for cell, y in want.items():
            worst = max(worst, abs(got.values[cell] - y))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-12
    assert elapsed < 10.0
    _report(2, f"1000 trajectories / {cells} cells: max |diff| = {worst:.2e}, "
               f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 3: vanilla reduction is byte-identical
# ---------------------------------------------------------------------------

def test_criterion_3_vanilla_reduction_bytes():
    vocab = Vocabulary(8, 0)
    for seed in range(50):
        rng = derive_rng(0xACC, 3, seed)
        target = rng.integers(1, vocab.size, size=16)
        table = rng.uniform(0.2, 0.98, size=(16, 17))

        def confidence(pos, frac, _table=table):
            return float(_table[pos, int(round(frac * 16))])

        oracle = TabularOracle(OracleSpec(target=target, confidence=confidence), vocab)
        ctrl = Controller(hidden_dim=8, width=8,
                          config=RegulationConfig(tau0=1.0, alpha=0.0),
                          seed=1000 + seed)
        prompt = SequenceState.fully_masked(16, vocab)
        plain = decode(oracle, prompt,
                       DecodeConfig(length=16, step_budget=16, block_size=4,
                                    rule=Threshold(0.7), seed=seed))
        reg = decode(oracle, prompt,
                     DecodeConfig(length=16, step_budget=16, block_size=4,
                                  rule=Regulated(0.7, RegulationConfig(tau0=1.0, alpha=0.0)),
                                  seed=seed),
                     controller=ctrl)
        assert plain.nfe == reg.nfe
        assert trajectory_bytes(plain.trajectory) == trajectory_bytes(reg.trajectory)
    _report(3, "alpha=0, tau0=1 regulated decode byte-identical to threshold "
               "decode over 50 seeded runs (files and NFE)")


# ---------------------------------------------------------------------------
# Criterion 4: argmax invariance of temperature reshaping
# ---------------------------------------------------------------------------

def test_criterion_4_argmax_invariance():
    rng = derive_rng(0xACC, 4)
    sharpen = RegulationConfig(tau0=1.0, alpha=2.0, mode="sharpen")
    flatten = RegulationConfig(tau0=1.0, alpha=2.0, mode="paper_flatten")
    for _ in range(10_000):
        vocab = int(rng.integers(4, 65))
        p = rng.random(vocab) + 1e-9
        p /= p.sum()
        tau = float(rng.uniform(0.1, 10.0))
        out = reshape_distribution(p, tau)
        assert int(out.argmax()) == int(p.argmax())
        yhat = float(rng.random())
        s = reshape_distribution(p, effective_temperature(yhat, sharpen))
        f = reshape_distribution(p, effective_temperature(yhat, flatten))
        assert s.max() >= p.max() - 1e-12
        assert f.max() <= p.max() + 1e-12
    _report(4, "10^4 random distributions (V in 4..64, tau in 0.1..10): argmax "
               "preserved exactly; sharpen/flatten top-1 mass monotone")


# ---------------------------------------------------------------------------
# Criterion 5: gradient correctness of the full controller objective
# ---------------------------------------------------------------------------

def test_criterion_5_objective_gradient():
    t0 = time.perf_counter()
    reg = RegulationConfig(tau0=1.0, alpha=1.0, mode="sharpen")
    lam, delta = 3.0, 1.0
    worst = 0.0
    for seed in range(10):
        rng = derive_rng(0xACC, 5, seed)
        prev = Controller(hidden_dim=3, width=6, config=reg, seed=500 + seed)
        cand = Controller(hidden_dim=3, width=6, config=reg, seed=600 + seed)
        x = np.concatenate([rng.standard_normal((6, 3)),
                            rng.random((6, FEATURE_COUNT))], axis=1)
        y = rng.random(6)
        p1 = rng.uniform(0.15, 0.9, size=6)
        prev_yhat = np.atleast_1d(prev.predict_batch(x[:, :3], x[:, 3:])[0])
        z = two_point_logit(p1)
        z_prev = z / effective_temperature(prev_yhat, reg)

        def objective(yhat):
            yhat = np.atleast_1d(yhat)
            bce, dbce = nn.masked_bce(yhat, y)
            tau_new = effective_temperature(yhat, reg)
            kl, dkl_dzb = two_point_kl(z_prev, z / tau_new)
            hval, hgrad = nn.huber(kl, delta)
            total = bce + lam * float(hval.mean())
            dkl = (hgrad * dkl_dzb * (-z / tau_new ** 2)
                   * temperature_grad(yhat, reg) / len(yhat))
            return total, dbce + lam * dkl

        err = nn.finite_diff_check(cand.params, cand.arch, objective, x, step=1e-5)
        worst = max(worst, err)
        assert err < 1e-4, f"seed {seed}: rel error {err}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _report(5, f"masked BCE + {lam}*Huber-KL through the temperature path vs "
               f"central differences: max rel err = {worst:.2e} over 10 seeds, "
               f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criteria 6-8 share one trained pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline():
    t0 = time.perf_counter()
    rev = make_task(TaskSpec(kind="reverse", prompt_len=GEN, answer_len=GEN,
                             vocab_size=24, n=1600, seed=7, marker=2))
    chain = make_task(TaskSpec(kind="modular_sum_chain", prompt_len=GEN,
                               answer_len=GEN, vocab_size=24, n=800, seed=8,
                               marker=3))
    train_pairs = merge_pools([rev, chain], [2.0, 1.0], 2400, seed=5)
    dconf = NeuralDenoiserConfig(vocab_size=24, hidden_dim=16, epochs=12)
    model = train_denoiser(train_pairs, dconf, seed=11, vocab=VOCAB)

    pool = [p for p, _ in merge_pools([rev, chain], [2.0, 1.0], 256, seed=6)]
    scfg = StageConfig(gen_length=GEN, block_size=8, step_budget=GEN, stages=3,
                       rollouts_per_stage=48, epochs=10, learning_rate=3e-4,
                       batch_size=64, trust_weight=3.0, mixing_ratio=0.1,
                       buffer_capacity=8192, threshold_start=0.95,
                       threshold_end=0.80, warm_start=True, master_seed=101,
                       controller_width=64,
                       regulation=RegulationConfig(tau0=1.0, alpha=1.0,
                                                   mode="sharpen"))
    art = run_progressive(model, pool, scfg, VOCAB)

    rev_hold = make_task(TaskSpec(kind="reverse", prompt_len=GEN, answer_len=GEN,
                                  vocab_size=24, n=96, seed=909, marker=2))
    chain_hold = make_task(TaskSpec(kind="modular_sum_chain", prompt_len=GEN,
                                    answer_len=GEN, vocab_size=24, n=64,
                                    seed=908, marker=3))
    return dict(model=model, scfg=scfg, art=art, pool=pool,
                rev_hold=rev_hold, chain_hold=chain_hold, start=t0)


def test_criterion_6_speedup_analogue(pipeline):
    model = pipeline["model"]
    art = pipeline["art"]
    scfg = pipeline["scfg"]
    eval_set = pipeline["rev_hold"]
    template = DecodeConfig(length=GEN, step_budget=GEN, block_size=8, rule=Top1())

    vanilla = sweep_frontier(model, None, eval_set, "vanilla", [], template, seed=3)[0]
    assert vanilla.accuracy >= 0.95, f"vanilla exact match {vanilla.accuracy}"

    grid = [0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
    prr = sweep_frontier(model, art.controllers[-1], eval_set, "prr", grid,
                         template, seed=3, regulation=scfg.regulation)
    qualifying = [r for r in prr
                  if r.mean_nfe <= 0.6 * vanilla.mean_nfe
                  and r.accuracy >= vanilla.accuracy - 0.02]
    assert qualifying, (
        f"no sweep point with NFE <= {0.6 * vanilla.mean_nfe:.1f} and accuracy "
        f">= {vanilla.accuracy - 0.02:.3f}; got "
        + ", ".join(f"(c={r.param}, acc={r.accuracy:.3f}, nfe={r.mean_nfe:.2f})"
                    for r in prr))
    best = min(qualifying, key=lambda r: r.mean_nfe)
    elapsed = time.perf_counter() - pipeline["start"]
    assert elapsed < 15 * 60, f"pipeline exceeded 15 minutes ({elapsed:.0f}s)"
    _report(6, f"reverse L=32 V=24 B=8, K=3 stages: vanilla acc "
               f"{vanilla.accuracy:.3f} @ NFE {vanilla.mean_nfe:.1f}; regulated "
               f"acc {best.accuracy:.3f} @ NFE {best.mean_nfe:.2f} "
               f"(threshold {best.param}, {best.mean_nfe / vanilla.mean_nfe:.2f}x "
               f"<= 0.6x); elapsed {elapsed:.0f}s < 15 min")


def test_criterion_7_controller_learnability(pipeline):
    model = pipeline["model"]
    art = pipeline["art"]
    hold_pool = [p for p, _ in merge_pools(
        [pipeline["rev_hold"], pipeline["chain_hold"]], [2.0, 1.0], 24, seed=61)]
    base_cfg = DecodeConfig(length=GEN, step_budget=GEN, block_size=8, rule=Top1())
    trajs = collect_rollouts(model, None, hold_pool, base_cfg, 24, seed=77,
                             vocab=VOCAB)
    rep = pooled_classification_metrics(art.controllers[0], trajs)
    assert rep.balanced_accuracy >= 0.65, rep
    assert rep.recall >= 0.35, rep
    _report(7, f"stage-0 controller on held-out base rollouts: balanced accuracy "
               f"{rep.balanced_accuracy:.3f} >= 0.65, unconverged recall "
               f"{rep.recall:.3f} >= 0.35 (accuracy {rep.accuracy:.3f}, "
               f"precision {rep.precision:.3f}, f1 {rep.f1:.3f})")


def test_criterion_8_trust_region_effect(pipeline):
    model = pipeline["model"]
    pool = pipeline["pool"]
    scfg = pipeline["scfg"]
    with_tr, without_tr = [], []
    for seed in (101, 202, 303):
        cfg3 = replace(scfg, master_seed=seed)
        art3 = pipeline["art"] if seed == 101 else run_progressive(model, pool, cfg3, VOCAB)
        art0 = run_progressive(model, pool, replace(cfg3, trust_weight=0.0), VOCAB)
        with_tr.append(mean_successive_probe_kl(art3.controllers, art3.probes,
                                                scfg.regulation))
        without_tr.append(mean_successive_probe_kl(art0.controllers, art0.probes,
                                                   scfg.regulation))
    mean3, mean0 = float(np.mean(with_tr)), float(np.mean(without_tr))
    assert mean3 < mean0, f"lambda=3 KL {mean3} not below lambda=0 KL {mean0}"
    _report(8, f"mean successive-stage probe KL over 3 seeds: lambda=3.0 -> "
               f"{mean3:.3e} < lambda=0 -> {mean0:.3e}")


# ---------------------------------------------------------------------------
# Criterion 9: redundancy statistic on the scripted fixture
# ---------------------------------------------------------------------------

def test_criterion_9_redundancy_statistic():
    traj = scripted_redundancy_trajectory()
    frac = redundancy_fraction(traj)
    assert frac == 0.75
    rows = unmask_schedule_export(traj)
    redundant = [(s, p) for s, p, cat in rows if cat == "redundant"]
    assert len(redundant) == 3
    assert {s for s, _ in redundant} == {1, 3, 4}
    _report(9, "scripted oracle trajectory: redundancy_fraction = 3/4 exactly; "
               "schedule export marks redundant cells at steps {1,3,4}")


# ---------------------------------------------------------------------------
# Criterion 10: end-to-end determinism through the CLI, including --jobs 4
# ---------------------------------------------------------------------------

def test_criterion_10_end_to_end_determinism(tmp_path):
    from prrlab.cli import main

    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text("""\
task.kind = copy
task.prompt_len = 8
task.answer_len = 8
task.vocab = 10
task.n = 64
denoiser.embed_dim = 8
denoiser.mix_channels = 4
denoiser.hidden_width = 32
denoiser.hidden_dim = 8
denoiser.pos_dim = 8
denoiser.epochs = 4
decode.block_size = 4
evolve.stages = 2
evolve.rollouts_per_stage = 8
evolve.epochs = 3
evolve.buffer_capacity = 512
evolve.controller_width = 16
evolve.train_pool = 32
evolve.probe_count = 64
sweep.grid = 0.7,0.8,0.9
sweep.n = 12
""")
    dn_dir = tmp_path / "dn"
    assert main(["train-denoiser", "--config", str(cfg_path), "--out", str(dn_dir),
                 "--seed", "5"]) == 0
    dn = str(dn_dir / "denoiser.bin")

    runs = {}
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        ev = tmp_path / f"ev_{name}"
        sw = tmp_path / f"sw_{name}"
        assert main(["evolve", "--config", str(cfg_path), "--out", str(ev),
                     "--seed", "5", "--denoiser", dn, "--jobs", str(jobs)]) == 0
        assert main(["sweep", "--config", str(cfg_path), "--out", str(sw),
                     "--seed", "5", "--denoiser", dn,
                     "--controller", str(ev / "stage_1" / "controller.bin"),
                     "--set", "sweep.method=prr", "--jobs", str(jobs)]) == 0
        runs[name] = {
            "ctrl0": (ev / "stage_0" / "controller.bin").read_bytes(),
            "ctrl1": (ev / "stage_1" / "controller.bin").read_bytes(),
            "frontier": (sw / "frontier.csv").read_bytes(),
            "rollout": (ev / "stage_0" / "rollouts" / "rollout_0000.traj.jsonl").read_bytes(),
        }
    for key in runs["a"]:
        assert runs["a"][key] == runs["b"][key], f"rerun differs in {key}"
        assert runs["a"][key] == runs["c"][key], f"--jobs 4 differs in {key}"
    _report(10, "evolve + sweep reruns byte-identical (controller checkpoints, "
                "rollouts, frontier.csv), including --jobs 4")
