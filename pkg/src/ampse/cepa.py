"""Early performance assertion from a truncated transient waveform.

A small 1-D convolutional classifier looks at the first ``window_fraction`` of
a settling waveform and scores the probability that the full-horizon settling
requirement will pass. Scores are mapped onto a three-way band: ``pass`` at or
above ``pass_above``, ``fail`` at or below ``fail_below``, ``uncertain`` in
between (the caller must then run the full simulation).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DivergedError, LengthMismatch, ParseError, SingleClassError
from .io import atomic_write_text
from .oracle.evaluate import settling_inputs, simulate_batch
from .oracle.types import TestbenchSpec, Waveform
from .seeding import rng
from .surrogate.data import column_stats
from .surrogate.nn import Adam, split_indices

PASS, FAIL, UNCERTAIN = "pass", "fail", "uncertain"


# --- ground truth ---------------------------------------------------------------

def settling_error(tau, horizon: float, v_fs: float):
    """Noiseless distance from full scale at ``horizon``."""
    return v_fs * np.exp(-horizon / np.asarray(tau, dtype=float))


def label_batch(tb: TestbenchSpec, X, horizon: float, check_grid: bool = False) -> np.ndarray:
    """True where the noiseless settling error at ``horizon`` is strictly below LSB/2."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tau, _ = settling_inputs(tb, dict(zip(tb.param_names, X.T)), check_grid)
    cfg = tb.cfg
    half_lsb = 0.5 * cfg["V_FS"] / 2.0 ** cfg["n"]
    return np.broadcast_to(settling_error(tau, horizon, cfg["V_FS"]) < half_lsb, (len(X),)).copy()


def label_waveform(tb: TestbenchSpec, full_params: dict, horizon: float) -> str:
    X = np.array([[full_params[n] for n in tb.param_names]], dtype=float)
    return PASS if label_batch(tb, X, horizon, check_grid=True)[0] else FAIL


# --- network ----------------------------------------------------------------------

@dataclass
class ConvLayer:
    kernel: int
    stride: int
    channels: int


@dataclass
class CepaModel:
    n_samples: int
    dt: float
    window_fraction: float
    horizon: float
    layers: list[ConvLayer]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    pass_above: float = 0.9
    fail_below: float = 0.1
    training_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.window_fraction <= 1:
            raise ValueError("window_fraction must lie in (0, 1]")
        if not 0 <= self.fail_below <= self.pass_above <= 1:
            raise ValueError("thresholds must satisfy 0 <= fail_below <= pass_above <= 1")

    def with_thresholds(self, pass_above: float, fail_below: float) -> "CepaModel":
        """Copy with a different decision band (bounds outside [0, 1] allowed for degenerate bands)."""
        out = copy.copy(self)
        object.__setattr__(out, "pass_above", pass_above)
        object.__setattr__(out, "fail_below", fail_below)
        return out

    def logits(self, W) -> np.ndarray:
        return _forward(self, (np.atleast_2d(W) - self.x_mean) / self.x_std)[0]

    def scores(self, W) -> np.ndarray:
        return _sigmoid(self.logits(W))

    def decide(self, scores) -> np.ndarray:
        scores = np.asarray(scores)
        out = np.full(scores.shape, UNCERTAIN, dtype=object)
        out[scores <= self.fail_below] = FAIL
        out[scores >= self.pass_above] = PASS
        return out

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for a in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _out_len(n: int, layer: ConvLayer) -> int:
    return (n - layer.kernel) // layer.stride + 1


def _windows(n: int, layer: ConvLayer) -> np.ndarray:
    return layer.stride * np.arange(_out_len(n, layer))[:, None] + np.arange(layer.kernel)[None, :]


def _forward(m: CepaModel, Z):
    """Channel-last activations; returns (logits, cache)."""
    a = Z[:, :, None]
    cache = []
    for layer, W, b in zip(m.layers, m.weights, m.biases):
        idx = _windows(a.shape[1], layer)
        cols = a[:, idx, :].reshape(a.shape[0], idx.shape[0], -1)  # B x L_out x (K*C)
        a = np.tanh(cols @ W + b)
        cache.append((idx, cols, a))
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ m.weights[-1][:, 0] + m.biases[-1][0]
    return logits, (cache, flat)


def _backward(m: CepaModel, Z, cache, d_logits):
    layer_cache, flat = cache
    grads_W = [None] * len(m.weights)
    grads_b = [None] * len(m.biases)
    grads_W[-1] = (flat.T @ d_logits)[:, None]
    grads_b[-1] = np.array([d_logits.sum()])
    d_a = (d_logits[:, None] * m.weights[-1][:, 0][None, :]).reshape(layer_cache[-1][2].shape)
    for i in range(len(m.layers) - 1, -1, -1):
        idx, cols, a = layer_cache[i]
        d_pre = d_a * (1.0 - a * a)  # B x L_out x C_out
        grads_W[i] = np.einsum("blk,blc->kc", cols, d_pre)
        grads_b[i] = d_pre.sum(axis=(0, 1))
        if i:
            prev = layer_cache[i - 1][2]
            d_cols = (d_pre @ m.weights[i].T).reshape(d_pre.shape[0], idx.shape[0], idx.shape[1], prev.shape[2])
            d_a = np.zeros_like(prev)
            for k in range(idx.shape[1]):
                d_a[:, idx[:, k], :] += d_cols[:, :, k, :]
    return grads_W, grads_b


@dataclass
class CepaHyper:
    lr: float = 3e-3
    epochs: int = 300
    batch: int = 32
    seed: int = 0
    patience: int = 60
    channels: Sequence[int] = (8, 16)
    kernel: int = 5
    stride: int = 2
    pass_above: float = 0.9
    fail_below: float = 0.1
    val_fraction: float = 0.2


def init_classifier(n_samples: int, dt: float, window_fraction: float, horizon: float,
                    hyper: CepaHyper, x_mean, x_std) -> CepaModel:
    layers = [ConvLayer(hyper.kernel, hyper.stride, c) for c in hyper.channels]
    g = rng(hyper.seed, "cepa-init")
    weights, biases = [], []
    length, cin = n_samples, 1
    for layer in layers:
        length = _out_len(length, layer)
        if length < 1:
            raise ValueError(f"prefix of {n_samples} samples is too short for the conv stack")
        fan_in = layer.kernel * cin
        limit = np.sqrt(6.0 / (fan_in + layer.channels))
        weights.append(g.uniform(-limit, limit, (fan_in, layer.channels)))
        biases.append(np.zeros(layer.channels))
        cin = layer.channels
    flat = length * cin
    limit = np.sqrt(6.0 / (flat + 1))
    weights.append(g.uniform(-limit, limit, (flat, 1)))
    biases.append(np.zeros(1))
    return CepaModel(n_samples, dt, window_fraction, horizon, layers, weights, biases,
                     np.asarray(x_mean, dtype=float), np.asarray(x_std, dtype=float),
                     hyper.pass_above, hyper.fail_below)


def _bce(logits, y) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def train_classifier(waveforms, labels, hyper: Optional[CepaHyper] = None, window_fraction: float = 0.25,
                     horizon: Optional[float] = None) -> CepaModel:
    """Fit the classifier on equal-length prefixes.

    ``waveforms`` is a list of ``Waveform`` prefixes or a ``B x L`` array (then
    ``horizon`` must be given and ``dt`` is inferred as ``horizon * window_fraction / L``).
    """
    hyper = hyper or CepaHyper()
    if isinstance(waveforms, np.ndarray):
        W = np.atleast_2d(np.asarray(waveforms, dtype=float))
        dt = horizon * window_fraction / W.shape[1]
    else:
        dts = {w.dt for w in waveforms}
        lens = {len(w.samples) for w in waveforms}
        if len(dts) != 1 or len(lens) != 1:
            raise LengthMismatch("all prefixes must share dt and length")
        W = np.stack([w.samples for w in waveforms])
        dt = dts.pop()
        horizon = horizon if horizon is not None else waveforms[0].label_horizon
    y = np.array([1.0 if (lab is True or lab == PASS or lab == 1) else 0.0 for lab in labels])
    if len(y) != len(W):
        raise ValueError("one label per waveform required")
    if y.min() == y.max():
        raise SingleClassError("training labels contain a single class")
    mean, std = column_stats(W)
    model = init_classifier(W.shape[1], dt, window_fraction, horizon, hyper, mean, std)
    Z = (W - mean) / std
    tr, va = split_indices(len(W), hyper.seed, hyper.val_fraction)
    opt = Adam(model.weights + model.biases, hyper.lr)
    g = rng(hyper.seed, "cepa-shuffle")
    best_val = _bce(_forward(model, Z[va])[0], y[va])
    best = ([w.copy() for w in model.weights], [b.copy() for b in model.biases])
    model.training_log = [{"epoch": 0, "val": best_val}]
    since = 0
    nl = len(model.weights)
    for epoch in range(1, hyper.epochs + 1):
        perm = tr[g.permutation(len(tr))]
        total = 0.0
        for s in range(0, len(perm), hyper.batch):
            idx = perm[s:s + hyper.batch]
            logits, cache = _forward(model, Z[idx])
            loss = _bce(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergedError(f"classifier loss became {loss} at epoch {epoch}")
            d_logits = (_sigmoid(logits) - y[idx]) / len(idx)
            gW, gb = _backward(model, Z[idx], cache, d_logits)
            opt.step(gW + gb)
            total += loss * len(idx)
        val = _bce(_forward(model, Z[va])[0], y[va])
        if not np.isfinite(val):
            raise DivergedError(f"classifier validation loss became {val} at epoch {epoch}")
        model.training_log.append({"epoch": epoch, "train": total / len(tr), "val": val})
        if val < best_val:
            best_val, since = val, 0
            best = ([w.copy() for w in model.weights], [b.copy() for b in model.biases])
        else:
            since += 1
            if hyper.patience and since >= hyper.patience:
                break
    model.weights, model.biases = best
    assert len(model.weights) == nl
    return model


def assert_early(m: CepaModel, prefix) -> tuple[str, float]:
    samples = prefix.samples if isinstance(prefix, Waveform) else np.asarray(prefix, dtype=float)
    if len(samples) != m.n_samples:
        raise LengthMismatch(f"prefix has {len(samples)} samples, model expects {m.n_samples}")
    score = float(m.scores(samples[None, :])[0])
    return str(m.decide(np.array([score]))[0]), score


# --- waveform corpora ------------------------------------------------------------------

@dataclass
class Corpus:
    """Prefix waveforms with full-horizon labels for one set of design points."""

    X: np.ndarray
    prefixes: np.ndarray
    labels: np.ndarray
    dt: float
    horizon: float
    window_fraction: float

    @property
    def full_samples(self) -> int:
        return int(round(self.horizon / self.dt))


def make_corpus(tb: TestbenchSpec, X, horizon: Optional[float] = None, window_fraction: float = 0.25,
                full_samples: int = 256, noise_seed: int = 0, noise_scale: float = 1.0) -> Corpus:
    horizon = float(tb.cfg["horizon"] if horizon is None else horizon)
    dt = horizon / full_samples
    n = max(1, int(round(window_fraction * full_samples)))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    prefixes = simulate_batch(tb, X, n, dt, noise_seed, noise_scale)
    return Corpus(X, prefixes, label_batch(tb, X, horizon), dt, horizon, window_fraction)


def save_corpus(c: Corpus, path, tb: Optional[TestbenchSpec] = None) -> Path:
    """One record per line: dt, label, params hash, then the prefix samples."""
    buf = io.StringIO()
    buf.write(f"# horizon: {c.horizon!r}\n# window_fraction: {c.window_fraction!r}\n")
    if tb is not None:
        buf.write(f"# params: {' '.join(tb.param_names)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dt:ps", "label", "params_hash", "samples:V"])
    for x, wave, lab in zip(c.X, c.prefixes, c.labels):
        ph = hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()[:16]
        w.writerow([repr(c.dt), PASS if lab else FAIL, ph, *map(repr, map(float, wave))])
    return atomic_write_text(path, buf.getvalue())


def load_corpus(path) -> tuple[list[Waveform], list[str], dict]:
    meta, waves, labels = {}, [], []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            k, _, v = ln[1:].partition(":")
            meta[k.strip()] = v.strip()
        else:
            body.append(ln)
    try:
        horizon = float(meta["horizon"])
        for row in csv.reader(body[1:]):
            waves.append(Waveform(float(row[0]), np.array([float(v) for v in row[3:]]), horizon))
            labels.append(row[1])
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed waveform corpus ({exc})") from exc
    return waves, labels, meta


# --- filtering --------------------------------------------------------------------------

def filter_space(sampler: str, m: CepaModel, tb: TestbenchSpec, window: Optional[float] = None,
                 noise_seed: int = 0):
    """Predicate for ``sample_dataset``: keep points whose early verdict is not ``fail``.

    ``window`` (ps) must agree with the model's prefix duration when given.
    """
    if window is not None and not np.isclose(window, m.n_samples * m.dt):
        raise LengthMismatch(f"window {window} ps does not match the model's {m.n_samples * m.dt} ps")
    counter = [0]

    def predicate(X) -> np.ndarray:
        counter[0] += 1
        W = simulate_batch(tb, X, m.n_samples, m.dt, noise_seed + counter[0])
        return m.decide(m.scores(W)) != FAIL

    return predicate


@dataclass
class AssertionStats:
    accuracy: float
    false_fail_rate: float
    uncertain_rate: float
    avoided_fraction: float
    sample_reduction: float
    decided_accuracy: float


def assess(m: CepaModel, corpus: Corpus) -> AssertionStats:
    """Score a held-out corpus; uncertain cases are charged a full rerun and count as correct."""
    scores = m.scores(corpus.prefixes)
    decision = m.decide(scores)
    truth = corpus.labels.astype(bool)
    hard = scores >= 0.5
    accuracy = float(np.mean(hard == truth))
    false_fail = float(np.sum((decision == FAIL) & truth) / max(1, truth.sum()))
    uncertain = float(np.mean(decision == UNCERTAIN))
    decided = decision != UNCERTAIN
    decided_acc = float(np.mean((decision[decided] == PASS) == truth[decided])) if decided.any() else 1.0
    consumed = corpus.prefixes.shape[1] * len(truth) + uncertain * len(truth) * corpus.full_samples
    reduction = corpus.full_samples * len(truth) / consumed
    return AssertionStats(accuracy, false_fail, uncertain, 1.0 - uncertain, float(reduction), decided_acc)
