"""prrlab: a desk-scale laboratory for masked discrete diffusion decoding
with trajectory-grounded, progressively trained refinement regulation."""

from .bench import (ClassificationReport, FrontierRecord, TaskDataset, TaskSpec,
                    controller_classification_metrics, controller_prediction_grid,
                    exact_match_accuracy, make_task, run_ablation, sweep_frontier,
                    unmask_schedule_export)
from .convergence import (LabelGrid, SuffixWeights, convergence_progress,
                          label_trajectory, redundancy_fraction, suffix_weights)
from .denoiser import (NeuralDenoiser, NeuralDenoiserConfig, OracleSpec,
                       TabularOracle, train_denoiser)
from .diffusion import (DecodeConfig, DecodeResult, EntropyBound, NoiseSchedule,
                        PredictiveState, Regulated, SequenceState, Threshold,
                        Top1, UnmaskPlan, Vocabulary, apply_forward_noise,
                        decode, plan_unmask)
from .evolve import (ReplayBuffer, StageArtifacts, StageConfig, SupervisedExample,
                     build_training_set, collect_rollouts,
                     mean_successive_probe_kl, run_progressive, stage_threshold,
                     train_controller_stage)
from .regulator import (Controller, FeatureContext, RegulationConfig,
                        build_features, controller_predict, effective_temperature,
                        reshape_distribution)
from .trajectory import (StepRecord, Trajectory, read_trajectory, write_trajectory)

__version__ = "0.1.0"
