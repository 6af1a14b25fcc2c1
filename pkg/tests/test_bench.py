import numpy as np
import pytest

from prrlab.bench import (ClassificationReport, TaskSpec,
                          controller_classification_metrics, exact_match_accuracy,
                          make_task, merge_pools, sweep_frontier,
                          unmask_schedule_export, write_frontier_csv,
                          write_schedule_csv)
from prrlab.convergence import LabelGrid
from prrlab.denoiser import OracleSpec, RampConfidence, TabularOracle
from prrlab.diffusion import DecodeConfig, SequenceState, Threshold, Top1, Vocabulary, decode
from conftest import scripted_redundancy_trajectory


def test_reverse_task_definition():
    ds = make_task(TaskSpec(kind="reverse", prompt_len=3, answer_len=3,
                            vocab_size=8, n=5, seed=1))
    for prompt, answer in ds.pairs:
        assert np.array_equal(answer, prompt[::-1])


def test_task_dataset_size_and_determinism():
    spec = TaskSpec(kind="copy", prompt_len=4, answer_len=4, vocab_size=8, n=100, seed=9)
    a, b = make_task(spec), make_task(spec)
    assert len(a) == 100
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
               for x, y in zip(a.pairs, b.pairs))


def test_chain_task_is_a_running_sum():
    ds = make_task(TaskSpec(kind="modular_sum_chain", prompt_len=6, answer_len=6,
                            vocab_size=12, n=3, seed=2, chain_mod=5, chain_inc=2))
    for prompt, answer in ds.pairs:
        run = 0
        for j, p in enumerate(prompt):
            run = (run + int(p) - 2) % 5
            assert answer[j] == run + 2


def test_keyvalue_task_answers_resolve_queries():
    spec = TaskSpec(kind="keyvalue_recall", prompt_len=11, answer_len=3,
                    vocab_size=16, n=4, seed=3, kv_pairs=4)
    for prompt, answer in make_task(spec).pairs:
        mapping = {int(prompt[2 * i]): int(prompt[2 * i + 1]) for i in range(4)}
        for j, q in enumerate(prompt[8:]):
            assert answer[j] == mapping[int(q)]


def test_marker_prefixes_prompt():
    ds = make_task(TaskSpec(kind="reverse", prompt_len=3, answer_len=3,
                            vocab_size=8, n=2, seed=1, marker=4))
    assert all(p[0] == 4 and len(p) == 4 for p, _ in ds.pairs)
    assert ds.spec.full_prompt_len == 4


def test_merge_pools_deterministic_weighted():
    a = make_task(TaskSpec(kind="copy", prompt_len=3, answer_len=3, vocab_size=8,
                           n=10, seed=1, marker=2))
    b = make_task(TaskSpec(kind="reverse", prompt_len=3, answer_len=3, vocab_size=8,
                           n=10, seed=2, marker=3))
    x = merge_pools([a, b], [3.0, 1.0], 40, seed=7)
    y = merge_pools([a, b], [3.0, 1.0], 40, seed=7)
    assert all(np.array_equal(p, q) for (p, _), (q, _) in zip(x, y))
    share_a = np.mean([p[0] == 2 for p, _ in x])
    assert share_a > 0.5


def test_exact_match_accuracy_counts():
    refs = [np.array([1, 2]), np.array([3, 4]), np.array([5, 6]), np.array([7, 8])]
    outs = [np.array([1, 2]), np.array([3, 4]), np.array([5, 6]), np.array([0, 0])]
    assert exact_match_accuracy(refs, refs) == 1.0
    assert exact_match_accuracy([o * 0 for o in refs], refs) == 0.0
    assert exact_match_accuracy(outs, refs) == 0.75


def _grids(labels, preds):
    lg, pg = LabelGrid(), LabelGrid()
    for i, (l, p) in enumerate(zip(labels, preds)):
        lg.values[(0, i)] = l
        pg.values[(0, i)] = p
    return pg, lg


def test_classification_perfect_predictions():
    pg, lg = _grids([0.9, 0.1, 0.8, 0.2], [0.9, 0.1, 0.8, 0.2])
    rep = controller_classification_metrics(pg, lg)
    assert rep == ClassificationReport(1.0, 1.0, 1.0, 1.0, 1.0)


def test_classification_hand_confusion():
    # converged truth flags [1,1,0,0], predictions [1,0,0,0]
    pg, lg = _grids([0.9, 0.8, 0.1, 0.2], [0.9, 0.3, 0.1, 0.2])
    rep = controller_classification_metrics(pg, lg)
    assert rep.balanced_accuracy == 0.75
    assert rep.recall == 1.0            # unconverged class fully recovered
    assert rep.precision == pytest.approx(2 / 3)
    assert rep.accuracy == 0.75
    assert rep.f1 == pytest.approx(0.8)


def test_classification_constant_predictor():
    pg, lg = _grids([0.9, 0.1, 0.8, 0.4], [0.9, 0.9, 0.9, 0.9])
    rep = controller_classification_metrics(pg, lg)
    assert rep.balanced_accuracy == 0.5
    assert rep.recall == 0.0


def test_classification_cell_mismatch_rejected():
    pg, lg = _grids([0.9], [0.9])
    pg.values[(9, 9)] = 0.5
    with pytest.raises(ValueError, match="different cells"):
        controller_classification_metrics(pg, lg)


def _oracle_setup(n=6, length=12, conf=None):
    vocab = Vocabulary(6, 0)
    ds = make_task(TaskSpec(kind="copy", prompt_len=length, answer_len=length,
                            vocab_size=6, n=n, seed=4))

    class TaskOracle:
        denoiser_id = "oracle:task"

        def __init__(self):
            self.conf = conf or RampConfidence(0.45, 0.6)

        def denoise(self, seq, f):
            prompt = seq.tokens[:length]
            spec = OracleSpec(target=prompt.copy(), confidence=self.conf)
            return TabularOracle(spec, vocab).denoise(seq, f)

    return vocab, ds, TaskOracle()


def test_sweep_emits_one_record_per_grid_point():
    vocab, ds, oracle = _oracle_setup()
    tmpl = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Top1())
    grid = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
    recs = sweep_frontier(oracle, None, ds, "dynamic", grid, tmpl, seed=1)
    assert len(recs) == 6
    assert [r.param for r in recs] == grid
    nfes = [r.mean_nfe for r in recs]
    assert nfes == sorted(nfes)          # deterministic oracle: monotone in c
    assert all(3 <= r.mean_nfe <= 12 for r in recs)


def test_sweep_vanilla_ignores_grid():
    vocab, ds, oracle = _oracle_setup()
    tmpl = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Top1())
    recs = sweep_frontier(oracle, None, ds, "vanilla", [0.1, 0.2], tmpl, seed=1)
    assert len(recs) == 1
    assert recs[0].param is None
    assert recs[0].mean_nfe == 12.0


def test_sweep_csv_byte_identical_across_reruns(tmp_path):
    vocab, ds, oracle = _oracle_setup(conf=RampConfidence(0.45, 0.6))
    tmpl = DecodeConfig(length=12, step_budget=12, block_size=4, rule=Top1())
    grid = [0.5, 0.7, 0.9]
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_frontier_csv(sweep_frontier(oracle, None, ds, "dynamic", grid, tmpl, seed=2), pa)
    write_frontier_csv(sweep_frontier(oracle, None, ds, "dynamic", grid, tmpl, seed=2), pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_schedule_export_vanilla_has_no_expansion():
    vocab, ds, oracle = _oracle_setup()
    prompt = SequenceState.from_prompt(ds.pairs[0][0], 12, vocab)
    res = decode(oracle, prompt, DecodeConfig(length=12, step_budget=12,
                                              block_size=4, rule=Top1()))
    rows = unmask_schedule_export(res.trajectory)
    assert not [r for r in rows if r[2] == "expanded"]
    unmasked = [r for r in rows if r[2] == "unmasked"]
    assert len(unmasked) == 12


def test_schedule_export_full_block_commit():
    vocab, ds, oracle = _oracle_setup(conf=lambda p, f: 1.0)
    prompt = SequenceState.from_prompt(ds.pairs[0][0], 12, vocab)
    res = decode(oracle, prompt, DecodeConfig(length=12, step_budget=12,
                                              block_size=4, rule=Threshold(0.8)))
    rows = unmask_schedule_export(res.trajectory)
    by_step = {}
    for step, pos, cat in rows:
        by_step.setdefault(step, {}).setdefault(cat, []).append(pos)
    for step in (1, 2, 3):
        assert len(by_step[step]["unmasked"]) == 4     # whole block at once
        assert len(by_step[step]["expanded"]) == 3     # all but the top-1 pick


def test_run_ablation_alpha_and_trust_region_arms(tmp_path):
    import csv as csvmod
    from prrlab.bench import AblationContext, run_ablation
    from prrlab.denoiser import OracleSpec, TabularOracle
    from prrlab.evolve import StageConfig
    from prrlab.regulator import Controller, RegulationConfig
    from prrlab.util import derive_rng

    vocab = Vocabulary(6, 0)
    length = 8
    ds = make_task(TaskSpec(kind="copy", prompt_len=length, answer_len=length,
                            vocab_size=6, n=4, seed=4))
    target = derive_rng(5).integers(1, 6, size=length)
    oracle = TabularOracle(OracleSpec(target=target,
                                      confidence=RampConfidence(0.4, 0.7)), vocab)
    scfg = StageConfig(gen_length=length, block_size=4, step_budget=length,
                       stages=2, rollouts_per_stage=3, epochs=1,
                       learning_rate=1e-3, batch_size=16, trust_weight=3.0,
                       mixing_ratio=0.5, buffer_capacity=128, master_seed=9,
                       controller_width=8,
                       regulation=RegulationConfig(1.0, 1.0, "sharpen"))
    ctx = AblationContext(
        denoiser=oracle, dataset=ds, train_prompts=ds.prompts(), stage_cfg=scfg,
        decode_template=DecodeConfig(length=length, step_budget=length,
                                     block_size=4, rule=Top1()),
        threshold_grid=(0.7, 0.9),
        controller=Controller(hidden_dim=8, width=8, config=scfg.regulation, seed=2))

    written = run_ablation("alpha_sweep", ctx, tmp_path / "alpha")
    assert sorted(written) == ["alpha_0.5", "alpha_1.0", "alpha_1.5"]
    for path in written.values():
        rows = list(csvmod.reader(open(path)))
        assert rows[0] == ["method", "param", "accuracy", "mean_nfe", "n", "seed"]
        assert len(rows) == 3   # header + two grid points

    written = run_ablation("no_trust_region", ctx, tmp_path / "tr")
    assert sorted(written) == ["lambda_0.0", "lambda_3.0", "probe_kl"]
    kl_rows = list(csvmod.reader(open(written["probe_kl"])))
    assert kl_rows[0] == ["arm", "mean_successive_kl"]
    assert len(kl_rows) == 3

    ctx.mixing_grid = (1.0, 0.1, 0.01)
    written = run_ablation("mixing_sweep", ctx, tmp_path / "mix")
    assert sorted(written) == ["mix_0.01", "mix_0.1", "mix_1.0"]
    assert all((tmp_path / "mix" / f"frontier_{name}.csv").exists() for name in written)


def test_schedule_export_redundant_counts_match_fixture(tmp_path):
    traj = scripted_redundancy_trajectory()
    rows = unmask_schedule_export(traj)
    redundant = [r for r in rows if r[2] == "redundant"]
    assert len(redundant) == 3
    assert {r[0] for r in redundant} == {1, 3, 4}
    top1 = [r for r in rows if r[2] == "top1"]
    assert len(top1) == traj.steps_executed
    path = tmp_path / "schedule.csv"
    write_schedule_csv(rows, path)
    header = path.read_text().splitlines()[0]
    assert header == "step,position,category"
    assert len(path.read_text().splitlines()) == len(rows) + 1
