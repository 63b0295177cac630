"""Stage adaptation of a trained surrogate through affine input/output adapters.

The base network is frozen. Adapters act in the base model's normalized
coordinates::

    z  = (x - x_mean) / x_std
    y  = y_std * (base_net(z @ A_in + b_in) @ A_out + b_out) + y_mean

and start as the identity, so a fresh adapter model reproduces its base exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergedError, NestedAdapter
from .seeding import rng
from .surrogate.data import Dataset
from .surrogate.nn import Adam, Hyper, SurrogateModel, split_indices

ADAPT_STAGES = ("layout", "silicon")


def adapter_hyper(**overrides) -> Hyper:
    """Defaults for adapter training.

    The adapters have few parameters and the data set is tiny, so every sample
    is used for fitting (no validation split) with a large step and many epochs.
    """
    base = dict(lr=3e-2, epochs=5000, batch=32, weight_decay=0.0, patience=0, val_fraction=0.0)
    base.update(overrides)
    return Hyper(**base)


@dataclass
class TlModel:
    base: SurrogateModel
    stage: str
    A_in: np.ndarray
    b_in: np.ndarray
    A_out: np.ndarray
    b_out: np.ndarray
    adapter_log: list[dict] = field(default_factory=list)
    base_hash: str = ""

    model_kind = "tl"

    @property
    def input_names(self):
        return self.base.input_names

    @property
    def output_names(self):
        return self.base.output_names

    @property
    def input_units(self):
        return self.base.input_units

    @property
    def output_units(self):
        return self.base.output_units

    def _z(self, X):
        return self.base.normalize_inputs(X)

    def predict_array(self, X) -> np.ndarray:
        zin = self._z(X) @ self.A_in + self.b_in
        out = self.base._forward(zin)[-1] @ self.A_out + self.b_out
        return out * self.base.y_std + self.base.y_mean

    def jacobian_array(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        zin = self._z(X) @ self.A_in + self.b_in
        Jf = self.base.jacobian_norm(zin)  # B x M x D in normalized coordinates
        J = np.einsum("km,bkd,ed->bme", self.A_out, Jf, self.A_in)
        return J * self.base.y_std[None, :, None] * self.base.input_scale(X)[:, None, :]

    def weight_hash(self) -> str:
        return self.base.weight_hash()

    def copy(self) -> "TlModel":
        return copy.deepcopy(self)


def attach_adapters(base, stage: str) -> TlModel:
    if isinstance(base, TlModel):
        raise NestedAdapter("adapters are not stacked; retrain the existing ones instead")
    if stage not in ADAPT_STAGES:
        raise ValueError(f"stage must be one of {ADAPT_STAGES}")
    d, m = base.n_in, base.n_out
    return TlModel(base=base, stage=stage, A_in=np.eye(d), b_in=np.zeros(d), A_out=np.eye(m),
                   b_out=np.zeros(m), base_hash=base.weight_hash())


def retarget(m: TlModel, stage: str) -> TlModel:
    """Same adapters, new stage label: the warm start for a further stage."""
    out = m.copy()
    out.stage = stage
    return out


def _adapter_loss_and_grads(m: TlModel, Z, T):
    zin = Z @ m.A_in + m.b_in
    acts = m.base._forward(zin)
    h = acts[-1]
    pred = h @ m.A_out + m.b_out
    err = pred - T
    loss = float(np.mean(err * err))
    d_pred = 2.0 * err / err.size
    gA_out = h.T @ d_pred
    gb_out = d_pred.sum(axis=0)
    delta = d_pred @ m.A_out.T
    W = m.base.weights
    for i in range(len(W) - 1, -1, -1):
        delta = delta @ W[i].T
        if i:
            delta = delta * (1.0 - acts[i] ** 2)
    gA_in = Z.T @ delta
    gb_in = delta.sum(axis=0)
    return loss, [gA_in, gb_in, gA_out, gb_out]


def _mse(m: TlModel, Z, T) -> float:
    err = (m.base._forward(Z @ m.A_in + m.b_in)[-1] @ m.A_out + m.b_out) - T
    return float(np.mean(err * err))


def train_adapters(m: TlModel, ds_small: Dataset, hyper: Optional[Hyper] = None) -> TlModel:
    """Fit only the adapters to ``ds_small``; the base weights are never written.

    ``hyper.weight_decay`` pulls the adapters toward the identity map rather than toward zero.
    """
    hyper = hyper or adapter_hyper()
    if list(ds_small.input_names) != list(m.input_names) or list(ds_small.output_names) != list(m.output_names):
        raise ValueError("dataset columns do not match the model")
    out = m.copy()
    out.base = m.base  # shared and frozen
    base_hash = m.base.weight_hash()
    Z = m.base.normalize_inputs(ds_small.X)
    T = (ds_small.Y - m.base.y_mean) / m.base.y_std
    tr, va = split_indices(len(ds_small), hyper.seed, hyper.val_fraction)
    params = [out.A_in, out.b_in, out.A_out, out.b_out]
    best_val = _mse(out, Z[va], T[va])
    best = [p.copy() for p in params]
    out.adapter_log = [{"epoch": 0, "train": _mse(out, Z[tr], T[tr]), "val": best_val}]
    anchors = [np.eye(len(out.b_in)), 0.0, np.eye(len(out.b_out)), 0.0]
    if hyper.epochs > 0:
        opt = Adam(params, hyper.lr)
        g = rng(hyper.seed, "adapter-shuffle")
        limit = hyper.divergence_factor * max(out.adapter_log[0]["train"], 1e-12)
        since = 0
        for epoch in range(1, hyper.epochs + 1):
            perm = g.permutation(len(tr))
            total = 0.0
            for s in range(0, len(tr), hyper.batch):
                idx = tr[perm[s:s + hyper.batch]]
                loss, grads = _adapter_loss_and_grads(out, Z[idx], T[idx])
                if not np.isfinite(loss) or loss > limit:
                    raise DivergedError(f"adapter loss {loss:.3g} at epoch {epoch}")
                if hyper.weight_decay:
                    grads = [gr + hyper.weight_decay * (p - a) for gr, p, a in zip(grads, params, anchors)]
                opt.step(grads)
                total += loss * len(idx)
            val = _mse(out, Z[va], T[va])
            if not np.isfinite(val) or val > limit:
                raise DivergedError(f"adapter validation loss {val:.3g} at epoch {epoch}")
            out.adapter_log.append({"epoch": epoch, "train": total / len(tr), "val": val})
            if val < best_val:
                best_val, best, since = val, [p.copy() for p in params], 0
            else:
                since += 1
                if hyper.patience and since >= hyper.patience:
                    break
    out.A_in, out.b_in, out.A_out, out.b_out = best
    if m.base.weight_hash() != base_hash:
        raise RuntimeError("base weights changed during adapter training")
    return out
