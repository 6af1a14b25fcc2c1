"""Denoisers: the networks (and test doubles) that map a partially masked
sequence to per-position predictive distributions plus hidden vectors.

Two implementations:

* ``TabularOracle`` — deterministic, scriptable; assigns a configurable
  probability mass to a target token and spreads the remainder uniformly.
  Used for bit-exact decoding tests.
* ``NeuralDenoiser`` — a small trainable model: a learned per-position
  windowed mixer (each position mixes the token embeddings of its centered
  window through its own learned channel weights) followed by a two-hidden-
  layer MLP with a vocabulary head and a hidden-vector head. Trained with
  masked-token cross-entropy at randomly drawn mask ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import nn, util
from .diffusion import PredictiveState, SequenceState, Vocabulary


@dataclass
class OracleSpec:
    """Scripted confidence on a known target sequence.

    ``confidence(position, unmasked_fraction)`` returns the probability mass
    placed on the target token; the remainder is spread uniformly over the
    other tokens. Output is a pure function of (spec, sequence).
    """

    target: np.ndarray
    confidence: Callable[[int, float], float]
    hidden_dim: int = 8

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.int64)


class TabularOracle:
    def __init__(self, spec: OracleSpec, vocab: Vocabulary):
        if np.any(spec.target == vocab.mask_id):
            raise ValueError("oracle target must not contain the mask symbol")
        if np.any(spec.target < 0) or np.any(spec.target >= vocab.size):
            raise ValueError("oracle target contains out-of-vocabulary tokens")
        self.spec = spec
        self.vocab = vocab

    @property
    def denoiser_id(self) -> str:
        return "oracle:" + util.stable_id(self.spec.target.tobytes())

    def denoise(self, seq: SequenceState, step_fraction: float) -> PredictiveState:
        total = len(seq)
        gen_len = len(self.spec.target)
        prompt_len = total - gen_len
        if prompt_len < 0:
            raise ValueError("sequence shorter than the oracle target")
        vocab = self.vocab.size
        probs = np.zeros((total, vocab), dtype=np.float64)
        hidden = np.zeros((total, self.spec.hidden_dim), dtype=np.float64)
        unmasked_frac = float((~seq.masked).sum()) / total
        committed = np.nonzero(~seq.masked)[0]
        probs[committed, seq.tokens[committed]] = 1.0
        for pos in np.nonzero(seq.masked)[0]:
            c = float(self.spec.confidence(int(pos), unmasked_frac))
            if not 0.0 < c <= 1.0:
                raise ValueError(f"oracle confidence {c} outside (0,1] at position {pos}")
            tgt = self.spec.target[pos - prompt_len]
            row = np.full(vocab, (1.0 - c) / (vocab - 1), dtype=np.float64)
            row[tgt] = c
            probs[pos] = row
            hidden[pos, 0] = c
            if self.spec.hidden_dim > 1:
                hidden[pos, 1] = unmasked_frac
        return PredictiveState(probs, hidden)


@dataclass(frozen=True)
class ConstantConfidence:
    """Picklable confidence function: the same mass everywhere."""

    value: float

    def __call__(self, position: int, unmasked_fraction: float) -> float:
        return self.value


@dataclass(frozen=True)
class RampConfidence:
    """Picklable confidence that grows with the unmasked fraction."""

    base: float
    gain: float

    def __call__(self, position: int, unmasked_fraction: float) -> float:
        return min(1.0, self.base + self.gain * unmasked_fraction)


# ---------------------------------------------------------------------------
# Neural denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeuralDenoiserConfig:
    """Architecture and training knobs for the windowed denoiser.

    ``context_window`` must be odd so the window centers on the predicted
    position; ``None`` resolves to full bidirectional context (2*max_len - 1)
    when training starts. With ``mix_channels`` set, each position mixes its
    window through its own learned channel weights before the shared MLP;
    with ``mix_channels=None`` the window embeddings feed the shared MLP
    directly and position identity enters only through the sinusoidal code.
    """

    vocab_size: int
    embed_dim: int = 16
    context_window: int | None = None
    mix_channels: int | None = 12
    hidden_width: int = 224
    hidden_dim: int = 64          # width of the hidden-vector head (controller input)
    pos_dim: int = 16
    epochs: int = 20
    learning_rate: float = 3e-3
    batch_size: int = 64
    mask_ratio_range: tuple = (0.1, 1.0)
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.context_window is not None and self.context_window % 2 == 0:
            raise ValueError("context window must be odd")
        if self.mix_channels is not None and self.mix_channels < 1:
            raise ValueError("mix_channels must be >= 1 when set")
        for name in ("embed_dim", "hidden_width", "hidden_dim", "pos_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.mask_ratio_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("mask ratio range must satisfy 0 < lo <= hi <= 1")


def sinusoidal_code(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    code = np.zeros((max_len, dim), dtype=np.float64)
    code[:, 0::2] = np.sin(pos * freq)
    code[:, 1::2] = np.cos(pos * freq)[:, : dim - dim // 2]
    return code


class NeuralDenoiser:
    """Per-position windowed mixer + MLP; see the module docstring."""

    FORMAT = "prr-denoiser"
    VERSION = 1

    def __init__(self, config: NeuralDenoiserConfig, max_len: int, vocab: Vocabulary,
                 params: dict | None = None, seed: int = 0):
        if config.context_window is None:
            config = replace(config, context_window=2 * max_len - 1)
        self.config = config
        self.max_len = int(max_len)
        self.vocab = vocab
        self.seed = int(seed)
        self.pad_id = vocab.size                    # window slots outside the sequence
        w, e, c = config.context_window, config.embed_dim, config.mix_channels
        self.d_in = (c * e if c else w * e) + config.pos_dim + 1
        self.poscode = sinusoidal_code(max_len, config.pos_dim)
        if params is None:
            rng = util.derive_rng(seed, 0xDE)
            h, v, d = config.hidden_width, config.vocab_size, config.hidden_dim
            params = {
                "emb": rng.normal(0.0, 0.5, size=(vocab.size + 1, e)),
                "W1": rng.uniform(-1, 1, size=(self.d_in, h)) / np.sqrt(self.d_in),
                "b1": np.zeros(h),
                "W2": rng.uniform(-1, 1, size=(h, h)) / np.sqrt(h),
                "b2": np.zeros(h),
                "Wv": rng.uniform(-1, 1, size=(h, v)) / np.sqrt(h),
                "bv": np.zeros(v),
                "Wh": rng.uniform(-1, 1, size=(h, d)) / np.sqrt(h),
                "bh": np.zeros(d),
            }
            if c:
                params["mix"] = rng.normal(0.0, 1.0 / np.sqrt(w), size=(max_len, c, w))
        self.params = params
        self._id_cache = None

    @property
    def denoiser_id(self) -> str:
        if self._id_cache is None:
            payload = b"".join(self.params[k].tobytes() for k in sorted(self.params))
            self._id_cache = "neural:" + util.stable_id(payload)
        return self._id_cache

    def _invalidate_id(self):
        self._id_cache = None

    # -- forward -------------------------------------------------------------

    def _windows(self, tokens_2d: np.ndarray, ex_idx: np.ndarray, positions: np.ndarray):
        w = self.config.context_window
        half = w // 2
        length = tokens_2d.shape[1]
        idx = positions[:, None] + np.arange(-half, half + 1)[None, :]
        valid = (idx >= 0) & (idx < length)
        toks = np.where(valid, tokens_2d[ex_idx[:, None], np.clip(idx, 0, length - 1)],
                        self.pad_id)
        return toks

    def _forward_positions(self, tokens_2d, ex_idx, positions, step_fracs):
        """Network forward for selected (example, position) pairs.

        Returns (probs, hidden, cache); probs rows are softmax distributions.
        """
        p = self.params
        toks = self._windows(tokens_2d, ex_idx, positions)      # (N, w)
        emb = p["emb"][toks]                                    # (N, w, E)
        n = len(positions)
        if self.config.mix_channels:
            mixw = p["mix"][positions]                          # (N, C, w)
            mixed = np.einsum("ncw,nwe->nce", mixw, emb)
        else:
            mixw = None
            mixed = emb
        x = np.concatenate([
            mixed.reshape(n, -1),
            self.poscode[positions],
            np.asarray(step_fracs, dtype=np.float64).reshape(n, 1),
        ], axis=1)
        z1 = x @ p["W1"] + p["b1"]
        h1 = nn.gelu(z1)
        z2 = h1 @ p["W2"] + p["b2"]
        h2 = nn.gelu(z2)
        logits = h2 @ p["Wv"] + p["bv"]
        hidden = h2 @ p["Wh"] + p["bh"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        cache = (toks, emb, mixw, positions, x, z1, h1, z2, h2, probs)
        return probs, hidden, cache

    def _backward_positions(self, cache, dlogits, grads):
        p = self.params
        toks, emb, mixw, positions, x, z1, h1, z2, h2, _ = cache
        dh2 = dlogits @ p["Wv"].T
        grads["Wv"] += h2.T @ dlogits
        grads["bv"] += dlogits.sum(axis=0)
        dz2 = dh2 * nn.gelu_grad(z2)
        grads["W2"] += h1.T @ dz2
        grads["b2"] += dz2.sum(axis=0)
        dh1 = dz2 @ p["W2"].T
        dz1 = dh1 * nn.gelu_grad(z1)
        grads["W1"] += x.T @ dz1
        grads["b1"] += dz1.sum(axis=0)
        dx = dz1 @ p["W1"].T
        n, w = toks.shape
        e = emb.shape[2]
        if mixw is not None:
            c = mixw.shape[1]
            dmixed = dx[:, : c * e].reshape(n, c, e)
            dmixw = np.einsum("nce,nwe->ncw", dmixed, emb)
            np.add.at(grads["mix"], positions, dmixw)
            demb = np.einsum("ncw,nce->nwe", mixw, dmixed)
        else:
            demb = dx[:, : w * e].reshape(n, w, e)
        np.add.at(grads["emb"], toks.reshape(-1), demb.reshape(-1, e))

    def denoise(self, seq: SequenceState, step_fraction: float) -> PredictiveState:
        total = len(seq)
        if total > self.max_len:
            raise ValueError(f"sequence length {total} exceeds trained maximum {self.max_len}")
        if not 0.0 <= step_fraction <= 1.0:
            raise ValueError("step fraction must lie in [0,1]")
        vocab = self.config.vocab_size
        probs = np.zeros((total, vocab), dtype=np.float64)
        hidden = np.zeros((total, self.config.hidden_dim), dtype=np.float64)
        committed = np.nonzero(~seq.masked)[0]
        probs[committed, seq.tokens[committed]] = 1.0
        masked = np.nonzero(seq.masked)[0]
        if masked.size:
            rows, hid, _ = self._forward_positions(
                seq.tokens[None, :], np.zeros(masked.size, dtype=np.int64), masked,
                np.full(masked.size, step_fraction))
            probs[masked] = rows
            hidden[masked] = hid
        return PredictiveState(probs, hidden)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> int:
        cfg = self.config
        meta = {
            "vocab_size": cfg.vocab_size, "mask_id": self.vocab.mask_id,
            "embed_dim": cfg.embed_dim, "context_window": cfg.context_window,
            "mix_channels": cfg.mix_channels or 0, "hidden_width": cfg.hidden_width,
            "hidden_dim": cfg.hidden_dim, "pos_dim": cfg.pos_dim,
            "max_len": self.max_len, "seed": self.seed,
        }
        arrays = {k: self.params[k] for k in sorted(self.params)}
        return util.write_blob(path, self.FORMAT, self.VERSION, meta, arrays)

    @classmethod
    def load(cls, path) -> "NeuralDenoiser":
        _, meta, arrays = util.read_blob(path, cls.FORMAT, cls.VERSION)
        cfg = NeuralDenoiserConfig(
            vocab_size=int(meta["vocab_size"]), embed_dim=int(meta["embed_dim"]),
            context_window=int(meta["context_window"]),
            mix_channels=int(meta["mix_channels"]) or None,
            hidden_width=int(meta["hidden_width"]), hidden_dim=int(meta["hidden_dim"]),
            pos_dim=int(meta["pos_dim"]))
        vocab = Vocabulary(int(meta["vocab_size"]), int(meta["mask_id"]))
        return cls(cfg, int(meta["max_len"]), vocab, params=arrays, seed=int(meta["seed"]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _mask_examples(prompts, answers, ratios, vocab: Vocabulary, rng):
    """Assemble masked input rows + (example, position, target) triples."""
    n = len(prompts)
    prompt_len = len(prompts[0])
    ans_len = len(answers[0])
    tokens = np.empty((n, prompt_len + ans_len), dtype=np.int64)
    ex_idx, positions, targets, fracs = [], [], [], []
    for i in range(n):
        tokens[i, :prompt_len] = prompts[i]
        tokens[i, prompt_len:] = answers[i]
        hits = rng.random(ans_len) < ratios[i]
        if not hits.any():
            hits[rng.integers(ans_len)] = True
        tokens[i, prompt_len:][hits] = vocab.mask_id
        pos = np.nonzero(hits)[0] + prompt_len
        ex_idx.append(np.full(pos.size, i))
        positions.append(pos)
        targets.append(np.asarray(answers[i])[pos - prompt_len])
        fracs.append(np.full(pos.size, hits.mean()))
    return (tokens, np.concatenate(ex_idx), np.concatenate(positions),
            np.concatenate(targets), np.concatenate(fracs))


def train_denoiser(tasks, config: NeuralDenoiserConfig, seed: int,
                   vocab: Vocabulary | None = None) -> NeuralDenoiser:
    """Fit the neural denoiser with masked-token cross-entropy.

    ``tasks`` is a nonempty list of (prompt tokens, answer tokens) pairs of
    uniform shape. Per example and epoch, a mask ratio is drawn uniformly from
    the configured range and the answer region is masked accordingly; the
    loss runs over masked positions only. The returned denoiser carries a
    ``train_report`` with held-out masked-token accuracy and per-epoch loss.
    """
    if not tasks:
        raise ValueError("training requires a nonempty dataset")
    if vocab is None:
        vocab = Vocabulary(config.vocab_size, mask_id=0)
    prompts = [np.asarray(p, dtype=np.int64) for p, _ in tasks]
    answers = [np.asarray(a, dtype=np.int64) for _, a in tasks]
    max_len = len(prompts[0]) + len(answers[0])
    model = NeuralDenoiser(config, max_len=max_len, vocab=vocab, seed=seed)

    n_hold = min(len(tasks) - 1, max(1, int(round(config.holdout_fraction * len(tasks))))) \
        if len(tasks) > 1 else 0
    order = util.derive_rng(seed, 1).permutation(len(tasks))
    hold_ids = order[:n_hold]
    train_ids = order[n_hold:]

    hyper = nn.TrainHyper(learning_rate=config.learning_rate,
                          weight_decay=config.weight_decay)
    state = nn.AdamWState()
    lo, hi = config.mask_ratio_range
    losses = []
    rng = util.derive_rng(seed, 2)
    for epoch in range(config.epochs):
        perm = rng.permutation(train_ids)
        epoch_loss, epoch_count = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            ratios = rng.uniform(lo, hi, size=len(batch))
            tokens, ex_idx, pos, tgt, fracs = _mask_examples(
                [prompts[i] for i in batch], [answers[i] for i in batch],
                ratios, vocab, rng)
            probs, _, cache = model._forward_positions(tokens, ex_idx, pos, fracs)
            m = len(pos)
            nll = -np.log(np.clip(probs[np.arange(m), tgt], 1e-300, None))
            loss = float(nll.mean())
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {start}")
            dlogits = probs.copy()
            dlogits[np.arange(m), tgt] -= 1.0
            dlogits /= m
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            model._backward_positions(cache, dlogits, grads)
            nn.adamw_step(model.params, grads, state, hyper)
            epoch_loss += loss * m
            epoch_count += m
        losses.append(epoch_loss / max(epoch_count, 1))
    model._invalidate_id()

    report = {"examples": len(tasks), "heldout": int(n_hold),
              "epochs": config.epochs, "loss_per_epoch": losses}
    eval_ids = hold_ids if n_hold else train_ids
    rng_eval = util.derive_rng(seed, 3)
    correct, counted = 0, 0
    for ratio in (0.35, 0.7, 1.0):
        tokens, ex_idx, pos, tgt, fracs = _mask_examples(
            [prompts[i] for i in eval_ids], [answers[i] for i in eval_ids],
            np.full(len(eval_ids), ratio), vocab, rng_eval)
        probs, _, _ = model._forward_positions(tokens, ex_idx, pos, fracs)
        correct += int((probs.argmax(axis=1) == tgt).sum())
        counted += len(tgt)
    report["masked_accuracy"] = correct / counted if counted else float("nan")
    model.train_report = report
    return model
