import numpy as np
import pytest

from prrlab import nn
from prrlab.denoiser import OracleSpec, RampConfidence, TabularOracle
from prrlab.diffusion import DecodeConfig, Threshold, Top1, Vocabulary
from prrlab.evolve import (ReplayBuffer, StageConfig, SupervisedExample,
                           build_training_set, collect_rollouts,
                           controller_objective, examples_from_trajectory,
                           mean_successive_probe_kl, run_progressive,
                           stage_threshold, train_controller_stage)
from prrlab.regulator import FEATURE_COUNT, Controller, RegulationConfig
from prrlab.trajectory import trajectory_bytes
from prrlab.util import derive_rng

V6 = Vocabulary(6, mask_id=0)


def test_stage_threshold_anneal():
    assert stage_threshold(0, 4) == 0.95
    assert stage_threshold(3, 4) == 0.80
    assert stage_threshold(1, 4) == pytest.approx(0.90)
    assert stage_threshold(0, 1) == 0.95
    with pytest.raises(ValueError):
        stage_threshold(4, 4)


def _example(rng, stage=0, target=None):
    return SupervisedExample(
        hidden=rng.random(4), features=rng.random(FEATURE_COUNT),
        target=float(rng.random()) if target is None else target,
        base_top1=float(rng.uniform(0.1, 0.95)), base_entropy=1.0,
        traj_id="t", position=0, step=1, stage=stage)


def test_buffer_full_replacement_at_ratio_one(rng):
    buf = ReplayBuffer(capacity=50)
    buf.mix_in([_example(rng, stage=0) for _ in range(80)], 1.0, derive_rng(1))
    assert len(buf) == 50 and buf.stage_counts() == {0: 50}
    buf.mix_in([_example(rng, stage=1) for _ in range(80)], 1.0, derive_rng(2))
    assert buf.stage_counts() == {1: 50}


def test_buffer_exact_mix_count(rng):
    buf = ReplayBuffer(capacity=10000)
    buf.mix_in([_example(rng, stage=0) for _ in range(12000)], 1.0, derive_rng(3))
    buf.mix_in([_example(rng, stage=1) for _ in range(500)], 0.01, derive_rng(4))
    assert buf.stage_counts() == {0: 9900, 1: 100}
    assert len(buf) == 10000


def test_buffer_mix_determinism(rng):
    new0 = [_example(rng, stage=0) for _ in range(300)]
    new1 = [_example(rng, stage=1) for _ in range(300)]

    def build():
        buf = ReplayBuffer(capacity=200)
        buf.mix_in(list(new0), 1.0, derive_rng(7))
        buf.mix_in(list(new1), 0.25, derive_rng(8))
        return [(e.stage, e.target) for e in buf.examples]

    assert build() == build()


def test_buffer_underfull_fills_before_evicting(rng):
    buf = ReplayBuffer(capacity=100)
    buf.mix_in([_example(rng, stage=0) for _ in range(30)], 1.0, derive_rng(5))
    buf.mix_in([_example(rng, stage=1) for _ in range(80)], 0.5, derive_rng(6))
    assert buf.stage_counts() == {0: 30, 1: 50}   # room for all 50, no eviction
    buf.mix_in([_example(rng, stage=2) for _ in range(80)], 0.5, derive_rng(7))
    assert len(buf) == 100                        # 30 over capacity evicted
    counts = buf.stage_counts()
    assert counts[2] == 50 and counts.get(0, 0) == 0   # oldest stage drained first
    assert counts[1] == 50


def test_buffer_rejects_empty(rng):
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=10).mix_in([], 0.5, derive_rng(9))


def _oracle(length=12, seed=3):
    target = derive_rng(seed).integers(1, V6.size, size=length)
    return TabularOracle(OracleSpec(target=target,
                                    confidence=RampConfidence(0.35, 0.7)), V6)


def _prompts(k=4, seed=5):
    return [derive_rng(seed, i).integers(1, V6.size, size=3) for i in range(k)]


def test_collect_rollouts_deterministic_and_tagged():
    oracle = _oracle()
    cfg = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Threshold(0.9))
    a = collect_rollouts(oracle, None, _prompts(), cfg, 3, seed=11, vocab=V6)
    b = collect_rollouts(oracle, None, _prompts(), cfg, 3, seed=11, vocab=V6)
    assert len(a) == 3
    assert all(t.controller_id == "none" for t in a)
    assert [trajectory_bytes(x) for x in a] == [trajectory_bytes(x) for x in b]


def test_collect_rollouts_parallel_matches_serial():
    oracle = _oracle()
    cfg = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Threshold(0.9))
    serial = collect_rollouts(oracle, None, _prompts(), cfg, 4, seed=13, vocab=V6)
    parallel = collect_rollouts(oracle, None, _prompts(), cfg, 4, seed=13, vocab=V6, jobs=2)
    assert [trajectory_bytes(x) for x in serial] == [trajectory_bytes(x) for x in parallel]


def test_examples_carry_provenance():
    oracle = _oracle()
    cfg = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Top1())
    traj = collect_rollouts(oracle, None, _prompts(), cfg, 1, seed=17, vocab=V6)[0]
    examples = examples_from_trajectory(traj, stage=2)
    assert examples
    for e in examples:
        assert 0.0 <= e.target <= 1.0
        assert e.stage == 2
        assert e.hidden.shape == (8,)  # oracle hidden width
        assert e.features.shape == (FEATURE_COUNT,)


def _stage_cfg(**kw):
    base = dict(gen_length=12, block_size=4, step_budget=12, stages=2,
                rollouts_per_stage=6, epochs=4, learning_rate=1e-3, batch_size=16,
                trust_weight=3.0, mixing_ratio=0.5, buffer_capacity=512,
                master_seed=21, controller_width=12, controller_dropout=0.1,
                regulation=RegulationConfig(1.0, 1.0, "sharpen"), probe_count=64)
    base.update(kw)
    return StageConfig(**base)


def test_trust_region_zero_for_identical_controllers(rng):
    cfg = _stage_cfg()
    ctrl = Controller(hidden_dim=4, width=12, config=cfg.regulation, seed=3)
    x = np.concatenate([rng.random((8, 4)), rng.random((8, FEATURE_COUNT))], axis=1)
    y = rng.random(8)
    p1 = rng.uniform(0.2, 0.9, size=8)
    prev_yhat, _ = ctrl.predict_batch(x[:, :4], x[:, 4:])
    total, _, bce, kl_term, _ = controller_objective(
        ctrl, np.atleast_1d(prev_yhat), x, y, p1, cfg, mode="eval")
    assert kl_term == pytest.approx(0.0, abs=1e-15)
    assert total == pytest.approx(bce, abs=1e-15)


def test_controller_training_learns_separable_targets(rng):
    # converged iff top-1 feature above 0.5; labels are exactly that indicator
    examples = []
    for i in range(600):
        f = rng.random(FEATURE_COUNT)
        examples.append(SupervisedExample(
            hidden=rng.standard_normal(4) * 0.1, features=f,
            target=1.0 if f[0] > 0.5 else 0.0,
            base_top1=float(f[0]), base_entropy=1.0,
            traj_id="t", position=0, step=1, stage=0))
    buf = ReplayBuffer(capacity=600, examples=examples)
    # full-batch, no dropout: the epoch loss is the exact objective
    cfg = _stage_cfg(epochs=30, learning_rate=3e-3, trust_weight=0.0, batch_size=600,
                     controller_dropout=0.0)
    ctrl, metrics = train_controller_stage(None, buf, cfg, stage=0)
    bce = np.asarray([m["bce"] for m in metrics])
    smooth = np.convolve(bce, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-6)
    assert metrics[-1]["train_acc"] > 0.9


def test_full_objective_matches_finite_differences(rng):
    from prrlab import regulator as R
    cfg = _stage_cfg(trust_weight=3.0)
    prev = Controller(hidden_dim=3, width=6, config=cfg.regulation, seed=31)
    new = Controller(hidden_dim=3, width=6, config=cfg.regulation, seed=32)
    x = np.concatenate([rng.standard_normal((5, 3)), rng.random((5, FEATURE_COUNT))], axis=1)
    y = rng.random(5)
    p1 = rng.uniform(0.15, 0.9, size=5)
    prev_yhat = np.atleast_1d(prev.predict_batch(x[:, :3], x[:, 3:])[0])

    def objective(yhat):
        """BCE + trust term as a function of the network outputs."""
        yhat = np.atleast_1d(yhat)
        bce, dbce = nn.masked_bce(yhat, y)
        tau_new = R.effective_temperature(yhat, cfg.regulation)
        z = R.two_point_logit(p1)
        kl, dkl_dzb = R.two_point_kl(z / R.effective_temperature(prev_yhat, cfg.regulation),
                                     z / tau_new)
        hval, hgrad = nn.huber(kl, cfg.huber_delta)
        total = bce + cfg.trust_weight * float(hval.mean())
        dkl = (hgrad * dkl_dzb * (-z / tau_new ** 2)
               * R.temperature_grad(yhat, cfg.regulation) / len(yhat))
        return total, dbce + cfg.trust_weight * dkl

    err = nn.finite_diff_check(new.params, new.arch, objective, x)
    assert err < 1e-4


def test_full_dist_kl_reduces_to_two_point(rng):
    from prrlab.evolve import _full_dist_kl
    from prrlab.regulator import two_point_kl, two_point_logit
    p1 = rng.uniform(0.1, 0.9, size=16)
    rows = np.stack([p1, 1 - p1], axis=1)
    tau_a = rng.uniform(0.5, 2.0, size=16)
    tau_b = rng.uniform(0.5, 2.0, size=16)
    kl_full, dkl_full = _full_dist_kl(rows, tau_a, tau_b)
    z = two_point_logit(p1)
    kl_tp, dkl_dzb = two_point_kl(z / tau_a, z / tau_b)
    assert np.allclose(kl_full, kl_tp, atol=1e-12)
    assert np.allclose(dkl_full, dkl_dzb * (-z / tau_b ** 2), atol=1e-12)


def test_full_dist_trust_region_trains_and_checks_out(rng):
    oracle = _oracle()
    cfg = _stage_cfg(stages=2, rollouts_per_stage=4, epochs=2, store_full_dist=True,
                     use_full_dist=True)
    art = run_progressive(oracle, _prompts(), cfg, V6)
    assert len(art.controllers) == 2
    # full rows made it into the stored examples
    assert all(p.base_row is not None for p in art.probes)

    # finite differences through the full-vocabulary KL path
    from prrlab import regulator as R
    from prrlab.evolve import _full_dist_kl
    prev = Controller(hidden_dim=3, width=6, config=cfg.regulation, seed=41)
    cand = Controller(hidden_dim=3, width=6, config=cfg.regulation, seed=42)
    x = np.concatenate([rng.standard_normal((4, 3)), rng.random((4, FEATURE_COUNT))], axis=1)
    y = rng.random(4)
    rows = rng.random((4, 5)) + 1e-3
    rows /= rows.sum(axis=1, keepdims=True)
    prev_yhat = np.atleast_1d(prev.predict_batch(x[:, :3], x[:, 3:])[0])
    tau_prev = np.atleast_1d(R.effective_temperature(prev_yhat, cfg.regulation))

    def objective(yhat):
        yhat = np.atleast_1d(yhat)
        bce, dbce = nn.masked_bce(yhat, y)
        tau_new = np.atleast_1d(R.effective_temperature(yhat, cfg.regulation))
        kl, dkl_dtau = _full_dist_kl(rows, tau_prev, tau_new)
        hval, hgrad = nn.huber(kl, cfg.huber_delta)
        total = bce + cfg.trust_weight * float(hval.mean())
        dkl = hgrad * dkl_dtau * R.temperature_grad(yhat, cfg.regulation) / len(yhat)
        return total, dbce + cfg.trust_weight * dkl

    err = nn.finite_diff_check(cand.params, cand.arch, objective, x)
    assert err < 1e-4


def test_run_progressive_structure_and_determinism(tmp_path):
    oracle = _oracle()
    cfg = _stage_cfg(stages=3, rollouts_per_stage=4, epochs=2)
    out_a = tmp_path / "a"
    art_a = run_progressive(oracle, _prompts(), cfg, V6, out_dir=out_a)
    assert len(art_a.controllers) == 3 and len(art_a.metrics) == 3
    for k in range(3):
        assert (out_a / f"stage_{k}" / "controller.bin").exists()
        assert (out_a / f"stage_{k}" / "metrics.csv").exists()
        assert sorted((out_a / f"stage_{k}" / "rollouts").glob("*.traj.jsonl"))
    out_b = tmp_path / "b"
    run_progressive(oracle, _prompts(), cfg, V6, out_dir=out_b)
    for k in range(3):
        assert ((out_a / f"stage_{k}" / "controller.bin").read_bytes()
                == (out_b / f"stage_{k}" / "controller.bin").read_bytes())
        assert ((out_a / f"stage_{k}" / "metrics.csv").read_bytes()
                == (out_b / f"stage_{k}" / "metrics.csv").read_bytes())


def test_one_shot_mode_keeps_single_stage_buffers():
    oracle = _oracle()
    cfg = _stage_cfg(stages=2, rollouts_per_stage=4, epochs=2, mixing_ratio=1.0,
                     buffer_capacity=128)
    art = run_progressive(oracle, _prompts(), cfg, V6)
    assert list(art.buffer_history[0]) == [0]
    assert list(art.buffer_history[1]) == [1]


def test_probe_kl_requires_pairs():
    oracle = _oracle()
    cfg = _stage_cfg(stages=1, rollouts_per_stage=3, epochs=1)
    art = run_progressive(oracle, _prompts(), cfg, V6)
    with pytest.raises(ValueError):
        mean_successive_probe_kl(art.controllers, art.probes, cfg.regulation)


def test_build_training_set_requires_rollouts():
    with pytest.raises(ValueError):
        build_training_set([], ReplayBuffer(capacity=8), 0.5, stage=0, seed=0)
