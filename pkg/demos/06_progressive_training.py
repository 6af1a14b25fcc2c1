"""The full progressive loop at miniature scale, ending in a frontier sweep.

A denoiser is trained on a two-task pool (reverse for clean convergence, a
running-sum chain whose early predictions are genuinely ambiguous), then three
controller stages are trained on its own rollouts, and the learned regulator
is swept against the unregulated baselines. Run:
python demos/06_progressive_training.py
"""
import numpy as np

from prrlab import (DecodeConfig, NeuralDenoiserConfig, RegulationConfig,
                    StageConfig, TaskSpec, Top1, Vocabulary, decode,
                    make_task, mean_successive_probe_kl, run_progressive,
                    sweep_frontier, train_denoiser)
from prrlab.bench import TaskDataset, merge_pools, pooled_classification_metrics
from prrlab.evolve import collect_rollouts

L, V, B = 16, 16, 4
vocab = Vocabulary(V, mask_id=0)
rev = make_task(TaskSpec(kind="reverse", prompt_len=L, answer_len=L,
                         vocab_size=V, n=600, seed=1, marker=2))
chain = make_task(TaskSpec(kind="modular_sum_chain", prompt_len=L, answer_len=L,
                           vocab_size=V, n=300, seed=2, marker=3))
pairs = merge_pools([rev, chain], [2.0, 1.0], 900, seed=3)

dconf = NeuralDenoiserConfig(vocab_size=V, embed_dim=12, mix_channels=8,
                             hidden_width=128, hidden_dim=12, epochs=14,
                             learning_rate=3e-3, batch_size=64)
model = train_denoiser(pairs, dconf, seed=4, vocab=vocab)
print(f"denoiser held-out masked accuracy: {model.train_report['masked_accuracy']:.3f}")

pool = [p for p, _ in merge_pools([rev, chain], [2.0, 1.0], 128, seed=5)]
scfg = StageConfig(gen_length=L, block_size=B, step_budget=L, stages=3,
                   rollouts_per_stage=32, epochs=8, learning_rate=3e-4,
                   batch_size=64, trust_weight=3.0, mixing_ratio=0.1,
                   buffer_capacity=4096, master_seed=6, controller_width=48,
                   regulation=RegulationConfig(tau0=1.0, alpha=1.0, mode="sharpen"))
art = run_progressive(model, pool, scfg, vocab)
print("stage thresholds:", [round(t, 3) for t in art.thresholds])
print("buffer composition by stage:", art.buffer_history)
print(f"mean successive probe KL: {mean_successive_probe_kl(art.controllers, art.probes, scfg.regulation):.2e}")

# how well does the first controller classify held-out base-process cells?
hold = [p for p, _ in merge_pools(
    [make_task(TaskSpec(kind="reverse", prompt_len=L, answer_len=L, vocab_size=V,
                        n=24, seed=71, marker=2)),
     make_task(TaskSpec(kind="modular_sum_chain", prompt_len=L, answer_len=L,
                        vocab_size=V, n=24, seed=72, marker=3))], [2.0, 1.0], 16, seed=73)]
base = DecodeConfig(length=L, step_budget=L, block_size=B, rule=Top1())
trajs = collect_rollouts(model, None, hold, base, 16, seed=74, vocab=vocab)
rep = pooled_classification_metrics(art.controllers[0], trajs)
print(f"stage-0 controller: balanced accuracy {rep.balanced_accuracy:.3f}, "
      f"unconverged recall {rep.recall:.3f}")

# accuracy-vs-NFE frontier on held-out reverse prompts
eval_set = make_task(TaskSpec(kind="reverse", prompt_len=L, answer_len=L,
                              vocab_size=V, n=32, seed=99, marker=2))
template = DecodeConfig(length=L, step_budget=L, block_size=B, rule=Top1())
rows = sweep_frontier(model, None, eval_set, "vanilla", [], template, seed=9)
rows += sweep_frontier(model, None, eval_set, "dynamic", [0.8, 0.9], template, seed=9)
rows += sweep_frontier(model, art.controllers[-1], eval_set, "prr", [0.8, 0.9],
                       template, seed=9, regulation=scfg.regulation)
print(f"\n{'method':<8} {'param':>6} {'acc':>6} {'NFE':>6}")
for r in rows:
    print(f"{r.method:<8} {('-' if r.param is None else f'{r.param:.2f}'):>6} "
          f"{r.accuracy:>6.3f} {r.mean_nfe:>6.2f}")
