"""Token-wise refinement controller: feature extraction, progress prediction,
temperature mapping, and distribution reshaping.

The controller is a small MLP over (denoiser hidden vector, 11 refinement
features) that emits a predicted convergence progress in (0,1). During
decoding the prediction is mapped to a per-token temperature and the
predictive distribution is reshaped as p^(1/tau), renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, util

FEATURE_COUNT = 11

FEATURE_NAMES = (
    "top1_prob", "top2_prob", "margin", "entropy_norm", "step_fraction",
    "global_unmask_rate", "block_unmask_rate", "block_position",
    "pos_in_block", "masked_top1_mean", "masked_top1_std",
)


@dataclass(frozen=True)
class RegulationConfig:
    """Temperature-mapping parameters.

    ``sharpen`` (default) lowers the temperature of high-progress tokens so
    they cross the unmasking threshold earlier; ``paper_flatten`` raises it,
    the literal linear mapping. Both reduce to the vanilla rule at alpha=0,
    tau0=1.
    """

    tau0: float = 1.0
    alpha: float = 1.0
    mode: str = "sharpen"

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.mode not in ("sharpen", "paper_flatten"):
            raise ValueError(f"unknown regulation mode '{self.mode}'")

    @property
    def is_identity(self) -> bool:
        return self.alpha == 0.0 and self.tau0 == 1.0


def effective_temperature(yhat, cfg: RegulationConfig):
    """Map predicted progress in [0,1] to a positive temperature."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if cfg.mode == "paper_flatten":
        tau = cfg.tau0 * (1.0 + cfg.alpha * yhat)
    else:
        tau = cfg.tau0 / (1.0 + cfg.alpha * yhat)
    return float(tau) if tau.ndim == 0 else tau


def temperature_grad(yhat, cfg: RegulationConfig):
    """d(tau)/d(yhat) for the configured mapping."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if cfg.mode == "paper_flatten":
        g = np.full_like(yhat, cfg.tau0 * cfg.alpha)
    else:
        g = -cfg.tau0 * cfg.alpha / (1.0 + cfg.alpha * yhat) ** 2
    return float(g) if g.ndim == 0 else g


def reshape_distribution(p: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-reshape a distribution: p'(v) = p(v)^(1/tau) / Z.

    Computed in log space with max-subtraction; zero entries stay zero.
    tau == 1 returns an exact copy so the identity case is bit-preserving.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    if tau == 1.0:
        return p.copy()
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    logp = logp / tau
    logp -= logp.max(axis=-1, keepdims=True)
    out = np.exp(logp)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def distribution_entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis (0 log 0 := 0)."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

@dataclass
class FeatureContext:
    """Global decode state shared by every masked position at one step."""

    step: int                 # 1-based refinement step
    step_budget: int
    gen_start: int            # first generated position in the sequence
    gen_len: int
    unmasked_gen: int         # generated positions already committed
    block_size: int
    block_count: int
    active_block: int         # 0-based index of the block being decoded
    active_block_start: int   # absolute position
    active_block_len: int
    active_block_unmasked: int
    masked_top1_mean: float
    masked_top1_std: float


def build_features_batch(rows: np.ndarray, positions: np.ndarray, ctx: FeatureContext) -> np.ndarray:
    """Feature matrix (N, 11) for masked positions given their raw rows."""
    rows = np.asarray(rows, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    n, vocab = rows.shape
    top2 = np.partition(rows, vocab - 2, axis=1)[:, -2:]
    top1 = top2[:, 1]
    second = top2[:, 0]
    ent_norm = distribution_entropy(rows) / np.log(vocab)
    feats = np.empty((n, FEATURE_COUNT), dtype=np.float64)
    feats[:, 0] = top1
    feats[:, 1] = second
    feats[:, 2] = top1 - second
    feats[:, 3] = ent_norm
    feats[:, 4] = (ctx.step - 1) / ctx.step_budget
    feats[:, 5] = ctx.unmasked_gen / ctx.gen_len
    feats[:, 6] = ctx.active_block_unmasked / ctx.active_block_len
    feats[:, 7] = ctx.active_block / ctx.block_count
    rel = positions - ctx.gen_start
    feats[:, 8] = (rel % ctx.block_size) / ctx.block_size
    feats[:, 9] = ctx.masked_top1_mean
    feats[:, 10] = ctx.masked_top1_std
    return feats


def build_features(row: np.ndarray, position: int, ctx: FeatureContext) -> np.ndarray:
    """The 11 refinement features for one masked position."""
    return build_features_batch(np.asarray(row)[None, :], np.asarray([position]), ctx)[0]


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

def controller_arch(d_in: int, hidden: int, dropout: float):
    return [("layernorm", d_in), ("linear", d_in, hidden), ("gelu",),
            ("dropout", dropout), ("resblock", hidden, dropout),
            ("linear", hidden, 1), ("sigmoid",)]


class Controller:
    """Refinement regulator g: (hidden, features) -> predicted progress in (0,1)."""

    FORMAT = "prr-controller"
    VERSION = 1

    def __init__(self, hidden_dim: int, width: int, config: RegulationConfig,
                 params: dict | None = None, dropout: float = 0.1,
                 stage: int = 0, seed: int = 0):
        self.hidden_dim = int(hidden_dim)
        self.width = int(width)
        self.config = config
        self.dropout = float(dropout)
        self.stage = int(stage)
        self.seed = int(seed)
        self.d_in = self.hidden_dim + FEATURE_COUNT
        self.arch = controller_arch(self.d_in, self.width, self.dropout)
        if params is None:
            params = nn.init_params(self.arch, util.derive_rng(seed, 0xC0))
        self.params = params

    def clone(self) -> "Controller":
        return Controller(self.hidden_dim, self.width, self.config,
                          params=nn.clone_params(self.params),
                          dropout=self.dropout, stage=self.stage, seed=self.seed)

    def predict_batch(self, hidden: np.ndarray, feats: np.ndarray,
                      mode: str = "eval", rng=None):
        x = np.concatenate([np.atleast_2d(hidden), np.atleast_2d(feats)], axis=1)
        if x.shape[1] != self.d_in:
            raise ValueError(f"controller input width {x.shape[1]} != expected {self.d_in}")
        return nn.net_forward(self.params, self.arch, x, mode=mode, rng=rng)

    def predict(self, hidden: np.ndarray, feats: np.ndarray) -> float:
        y, _ = self.predict_batch(hidden, feats, mode="eval")
        return float(np.atleast_1d(y)[0])

    # -- persistence --------------------------------------------------------

    def _meta(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "width": self.width,
            "dropout": util.fmt_float(self.dropout),
            "tau0": util.fmt_float(self.config.tau0),
            "alpha": util.fmt_float(self.config.alpha),
            "mode": self.config.mode,
            "stage": self.stage,
            "seed": self.seed,
        }

    def save(self, path) -> int:
        arrays = {k: self.params[k] for k in sorted(self.params)}
        return util.write_blob(path, self.FORMAT, self.VERSION, self._meta(), arrays)

    @classmethod
    def load(cls, path) -> "Controller":
        _, meta, arrays = util.read_blob(path, cls.FORMAT, cls.VERSION)
        cfg = RegulationConfig(tau0=float(meta["tau0"]), alpha=float(meta["alpha"]),
                               mode=meta["mode"])
        return cls(int(meta["hidden_dim"]), int(meta["width"]), cfg, params=arrays,
                   dropout=float(meta["dropout"]), stage=int(meta["stage"]),
                   seed=int(meta["seed"]))

    @property
    def controller_id(self) -> str:
        payload = util.canon_json(self._meta()).encode()
        payload += b"".join(self.params[k].tobytes() for k in sorted(self.params))
        return "ctrl:" + util.stable_id(payload)


def controller_predict(ctrl: Controller, hidden: np.ndarray, feats: np.ndarray,
                       mode: str = "eval") -> float:
    """Deterministic progress estimate for one token; eval mode only."""
    if mode != "eval":
        raise ValueError("controller_predict is an inference surface; use eval mode")
    return ctrl.predict(hidden, feats)


# ---------------------------------------------------------------------------
# Two-point collapsed reshaping (used by the trust-region term)
# ---------------------------------------------------------------------------

_P1_CLIP = 1e-9


def two_point_logit(p1) -> np.ndarray:
    """log(p1/(1-p1)) with p1 clamped away from {0,1}."""
    p1 = np.clip(np.asarray(p1, dtype=np.float64), _P1_CLIP, 1.0 - _P1_CLIP)
    return np.log(p1) - np.log1p(-p1)


def two_point_reshaped_mass(p1, tau):
    """Top-1 mass of the reshaped two-point distribution {p1, 1-p1}."""
    z = two_point_logit(p1) / np.asarray(tau, dtype=np.float64)
    return nn.sigmoid(np.atleast_1d(z)) if np.ndim(z) else float(nn.sigmoid(np.array([z]))[0])


def _log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, -np.log1p(np.exp(-z)), z - np.log1p(np.exp(z)))


def two_point_kl(z_a, z_b):
    """KL(a || b) between two-point distributions given their logits.

    Stable for saturated logits; also returns dKL/dz_b = sigmoid(z_b) - sigmoid(z_a).
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    a1 = nn.sigmoid(z_a)
    kl = (a1 * (_log_sigmoid(z_a) - _log_sigmoid(z_b))
          + (1.0 - a1) * (_log_sigmoid(-z_a) - _log_sigmoid(-z_b)))
    dkl_dzb = nn.sigmoid(z_b) - a1
    return kl, dkl_dzb
