"""Feedforward tanh regression networks trained with Adam.

Weights are stored ``fan_in x fan_out`` so a layer computes ``h @ W + b``.
An optional connectivity mask with the same shapes pins masked weights to
exactly zero after initialization and after every optimizer step.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import ad
from ..errors import DivergedError, EmptyDataset, MissingInput, ShapeError
from ..seeding import rng
from .data import Dataset, column_stats

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh",)


@dataclass
class Hyper:
    lr: float = 1e-3
    epochs: int = 2000
    batch: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    patience: int = 200
    # "constant", or "cosine": anneal lr to lr_floor * lr over ``epochs``
    schedule: str = "constant"
    lr_floor: float = 0.01
    val_fraction: float = 0.2
    # loss blow-up beyond this multiple of the initial loss counts as divergence
    divergence_factor: float = 1e6
    debug_masks: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**d)


@dataclass
class SurrogateModel:
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    activation: str = "tanh"
    masks: Optional[list[np.ndarray]] = None
    model_kind: str = "fully_connected"
    training_log: list[dict] = field(default_factory=list)
    input_units: tuple[str, ...] = ()
    output_units: tuple[str, ...] = ()
    # columns fed to the network as log(x); x_mean/x_std then describe log(x)
    log_inputs: tuple[bool, ...] = ()

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    # --- inference ---------------------------------------------------------------
    def _forward(self, Z):
        acts = [Z]
        h = Z
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def log_floor(self) -> np.ndarray:
        """Smallest value a log column accepts: 10 std below the training log-mean.

        Composed upstream predictions can stray non-positive; clamping keeps them finite.
        """
        return np.where(self.log_inputs, np.exp(self.x_mean - 10.0 * self.x_std), -np.inf)

    def normalize_inputs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if any(self.log_inputs):
            X = np.where(self.log_inputs, np.log(np.where(self.log_inputs, np.maximum(X, self.log_floor()), 1.0)), X)
        return (X - self.x_mean) / self.x_std

    def input_scale(self, X) -> np.ndarray:
        """Elementwise dz/dx of the input normalization (zero where a log column is clamped)."""
        X = np.asarray(X, dtype=float)
        if any(self.log_inputs):
            floor = self.log_floor()
            safe = np.where(self.log_inputs, np.maximum(X, floor), 1.0)
            d = np.where(self.log_inputs, np.where(X >= floor, 1.0 / safe, 0.0), 1.0)
        else:
            d = np.ones_like(X)
        return d / self.x_std

    def predict_array(self, X) -> np.ndarray:
        return self._forward(self.normalize_inputs(X))[-1] * self.y_std + self.y_mean

    def jacobian_norm(self, Z) -> np.ndarray:
        """Reverse-mode ``B x M x D`` Jacobian in normalized coordinates."""
        Z = np.atleast_2d(Z)
        acts = self._forward(Z)
        # row k of G is d(output_k)/d(current layer activation)
        G = np.broadcast_to(self.weights[-1].T, (len(Z),) + self.weights[-1].T.shape)
        for i in range(len(self.weights) - 2, -1, -1):
            G = (G * (1.0 - acts[i + 1] ** 2)[:, None, :]) @ self.weights[i].T
        return G

    def jacobian_array(self, X) -> np.ndarray:
        """Jacobian of raw outputs w.r.t. raw inputs, ``B x M x D``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = self.jacobian_norm(self.normalize_inputs(X))
        return G * self.y_std[None, :, None] * self.input_scale(X)[:, None, :]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for a in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def copy(self) -> "SurrogateModel":
        return copy.deepcopy(self)


def _order(names: Sequence[str], x: dict):
    missing = [n for n in names if n not in x]
    if missing:
        raise MissingInput(f"missing model inputs {missing}")
    return [x[n] for n in names]


def predict(m, x: dict) -> dict:
    """Denormalized outputs for an assignment of the model's input names."""
    cols = [np.asarray(v, dtype=float) for v in _order(m.input_names, x)]
    shape = np.broadcast_shapes(*(c.shape for c in cols))
    X = np.stack([np.broadcast_to(c, shape).reshape(-1) for c in cols], axis=-1)
    Y = m.predict_array(X)
    return {n: Y[:, k].reshape(shape) if shape else float(Y[0, k]) for k, n in enumerate(m.output_names)}


def gradient(m, x: dict) -> np.ndarray:
    """``M x D`` Jacobian at one point (or ``B x M x D`` for batched inputs)."""
    cols = [np.asarray(v, dtype=float) for v in _order(m.input_names, x)]
    shape = np.broadcast_shapes(*(c.shape for c in cols))
    X = np.stack([np.broadcast_to(c, shape).reshape(-1) for c in cols], axis=-1)
    J = m.jacobian_array(X)
    return J[0] if not shape else J.reshape(shape + J.shape[1:])


# --- training ------------------------------------------------------------------------

def log_columns(ds: Dataset, log_inputs) -> tuple[bool, ...]:
    """``log_inputs``: True (every strictly positive column), False, or per-column flags."""
    if log_inputs is True:
        return tuple(bool(np.all(ds.X[:, j] > 0)) for j in range(ds.X.shape[1]))
    if not log_inputs:
        return (False,) * ds.X.shape[1]
    flags = tuple(bool(f) for f in log_inputs)
    if any(f and not np.all(ds.X[:, j] > 0) for j, f in enumerate(flags)):
        raise ValueError("log transform requested for a column that is not strictly positive")
    return flags


def init_model(ds: Dataset, widths: Sequence[int], seed: int, masks=None,
               model_kind: Optional[str] = None, log_inputs=False) -> SurrogateModel:
    widths = tuple(int(w) for w in widths)
    if widths[0] != len(ds.input_names) or widths[-1] != len(ds.output_names):
        raise ShapeError(f"architecture {widths} does not match dataset {len(ds.input_names)} -> "
                         f"{len(ds.output_names)}")
    if masks is not None:
        masks = [np.asarray(mk, dtype=float) for mk in masks]
        if [mk.shape for mk in masks] != list(zip(widths[:-1], widths[1:])):
            raise ShapeError("mask shapes do not match the architecture")
    g = rng(seed, "init")
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (a + b))
        weights.append(g.uniform(-limit, limit, size=(a, b)))
        biases.append(np.zeros(b))
    if masks is not None:
        weights = [W * mk for W, mk in zip(weights, masks)]
    flags = log_columns(ds, log_inputs)
    if any(flags):
        x_mean, x_std = column_stats(np.where(flags, np.log(np.where(flags, ds.X, 1.0)), ds.X))
    else:
        x_mean, x_std = ds.x_mean.copy(), ds.x_std.copy()
    return SurrogateModel(
        input_names=tuple(ds.input_names), output_names=tuple(ds.output_names), widths=widths,
        weights=weights, biases=biases, x_mean=x_mean, x_std=x_std,
        y_mean=ds.y_mean.copy(), y_std=ds.y_std.copy(), masks=masks,
        model_kind=model_kind or ("cci" if masks is not None else "fully_connected"),
        input_units=tuple(ds.input_units), output_units=tuple(ds.output_units), log_inputs=flags,
    )


def split_indices(n: int, seed: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 80/20 split; tiny datasets validate on the training rows."""
    perm = rng(seed, "split").permutation(n)
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n - n_val < 1:
        return perm, perm
    return perm[n_val:], perm[:n_val]


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.wd:
                g = g + self.wd * p
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(hyper: Hyper, epoch: int) -> float:
    if hyper.schedule == "constant":
        return hyper.lr
    if hyper.schedule == "cosine":
        frac = (epoch - 1) / max(1, hyper.epochs - 1)
        floor = hyper.lr_floor * hyper.lr
        return floor + 0.5 * (hyper.lr - floor) * (1.0 + np.cos(np.pi * frac))
    raise ValueError(f"unknown schedule {hyper.schedule!r}")


def _loss_and_grads(model: SurrogateModel, Z, T):
    acts = model._forward(Z)
    err = acts[-1] - T
    loss = float(np.mean(err * err))
    delta = 2.0 * err / err.size
    gW, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, gW, gb


def _mse(model, Z, T) -> float:
    err = model._forward(Z)[-1] - T
    return float(np.mean(err * err))


def train(ds: Dataset, arch: Sequence[int], hyper: Optional[Hyper] = None, mask=None,
          model_kind: Optional[str] = None, log_inputs=True) -> SurrogateModel:
    """Fit a network to ``ds`` and return the best-validation epoch checkpoint.

    ``mask`` is either a list of arrays or an object with a ``layers`` attribute.
    """
    hyper = hyper or Hyper()
    masks = list(mask.layers) if hasattr(mask, "layers") else mask
    model = init_model(ds, arch, hyper.seed, masks, model_kind, log_inputs)
    tr, va = split_indices(len(ds), hyper.seed, hyper.val_fraction)
    Z, T = model.normalize_inputs(ds.X), ds.targets
    Ztr, Ttr, Zva, Tva = Z[tr], T[tr], Z[va], T[va]
    best = (_mse(model, Zva, Tva), 0, [w.copy() for w in model.weights], [b.copy() for b in model.biases])
    model.training_log = [{"epoch": 0, "train": _mse(model, Ztr, Ttr), "val": best[0]}]
    if hyper.epochs <= 0:
        return model
    opt = Adam(model.weights + model.biases, hyper.lr, weight_decay=hyper.weight_decay)
    g = rng(hyper.seed, "shuffle")
    limit = hyper.divergence_factor * max(model.training_log[0]["train"], 1e-12)
    since_best = 0
    for epoch in range(1, hyper.epochs + 1):
        opt.lr = lr_at(hyper, epoch)
        perm = g.permutation(len(tr))
        total = 0.0
        for s in range(0, len(tr), hyper.batch):
            idx = perm[s:s + hyper.batch]
            loss, gW, gb = _loss_and_grads(model, Ztr[idx], Ttr[idx])
            if not np.isfinite(loss) or loss > limit:
                raise DivergedError(f"training loss {loss:.3g} at epoch {epoch}")
            if masks is not None:
                gW = [gw * mk for gw, mk in zip(gW, masks)]
            opt.step(gW + gb)
            if masks is not None:
                for W, mk in zip(model.weights, masks):
                    W *= mk
                if hyper.debug_masks:
                    assert all(np.all(W[mk == 0] == 0.0) for W, mk in zip(model.weights, masks))
            total += loss * len(idx)
        val = _mse(model, Zva, Tva)
        if not np.isfinite(val) or val > limit:
            raise DivergedError(f"validation loss {val:.3g} at epoch {epoch}")
        model.training_log.append({"epoch": epoch, "train": total / len(tr), "val": val})
        if val < best[0]:
            best = (val, epoch, [w.copy() for w in model.weights], [b.copy() for b in model.biases])
            since_best = 0
        else:
            since_best += 1
            if hyper.patience and since_best >= hyper.patience:
                break
    model.weights, model.biases = best[2], best[3]
    log.debug("trained %s: best val %.3g at epoch %d", model.output_names, best[0], best[1])
    return model


def evaluate_model(m, ds: Dataset) -> dict:
    """Per-output NRMSE (RMSE over target std) plus their mean under ``"aggregate"``."""
    if ds is None or len(ds) == 0:
        raise EmptyDataset("holdout is empty")
    cols = [list(ds.input_names).index(n) for n in m.input_names]
    pred = m.predict_array(ds.X[:, cols])
    out = {}
    for k, name in enumerate(m.output_names):
        y = ds.Y[:, list(ds.output_names).index(name)]
        out[name] = nrmse(pred[:, k], y)
    out["aggregate"] = float(np.mean([out[n] for n in m.output_names]))
    return out


def nrmse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    rmse = float(np.sqrt(np.mean((pred - target) ** 2)))
    std = float(np.std(target))
    if std == 0.0:
        return 0.0 if rmse == 0.0 else float("inf")
    return rmse / std


# --- module evaluator adapter -------------------------------------------------------------

def as_evaluator(m, module):
    """Wrap a model as an MLG module evaluator ``(params, iface) -> (metrics, outs)``.

    Dual-number inputs produce dual outputs through the model Jacobian.
    """
    names = list(module.space.names) + [p.name for p in module.interface_in]
    if list(m.input_names) != names:
        raise ShapeError(f"model inputs {m.input_names} do not match module {module.id} {names}")
    metric_names = {p.name for p in module.metrics}

    def evaluate(params: dict, iface: dict):
        raw = [params[n] if n in params else iface[n] for n in names]
        duals = [v for v in raw if isinstance(v, ad.Dual)]
        shape = np.broadcast_shapes(*(np.shape(ad.value_of(v)) for v in raw))
        X = np.stack([np.broadcast_to(ad.value_of(v), shape).reshape(-1) for v in raw], axis=-1)
        Y = m.predict_array(X)
        if duals:
            P = duals[0].n
            T = np.stack([np.broadcast_to(v.grad, shape + (P,)).reshape(-1, P) if isinstance(v, ad.Dual)
                          else np.zeros((X.shape[0], P)) for v in raw], axis=1)
            dY = m.jacobian_array(X) @ T
            outs = {n: ad.Dual(Y[:, k].reshape(shape), dY[:, k].reshape(shape + (P,)))
                    for k, n in enumerate(m.output_names)}
        else:
            outs = {n: Y[:, k].reshape(shape) for k, n in enumerate(m.output_names)}
        metrics = {k: v for k, v in outs.items() if k in metric_names}
        iface_out = {k: v for k, v in outs.items() if k not in metric_names}
        return metrics, iface_out

    return evaluate
