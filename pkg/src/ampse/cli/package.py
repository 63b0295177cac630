"""Self-contained, integrity-checked model packages.

File layout: one header line ``<format> sha256:<hex>`` followed by a canonical
JSON body. The hash covers the body bytes exactly, so any edit to the body is
caught before parsing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .. import __version__
from ..cepa import CepaModel, ConvLayer
from ..errors import HashMismatch, ParseError, VersionUnsupported
from ..io import atomic_write_bytes
from ..oracle.testbench import content_hash, from_dict as tb_from_dict, to_dict as tb_to_dict
from ..oracle.types import TestbenchSpec
from ..surrogate.nn import SurrogateModel
from ..transfer import TlModel

FORMAT = "ampse-model/1"


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(m) -> dict:
    if isinstance(m, TlModel):
        return {"kind": "tl", "base": model_to_dict(m.base),
                "tl": {"stage": m.stage, "base_hash": m.base_hash, "A_in": _arr(m.A_in), "b_in": _arr(m.b_in),
                       "A_out": _arr(m.A_out), "b_out": _arr(m.b_out)}}
    return {
        "kind": m.model_kind,
        "input_names": list(m.input_names), "output_names": list(m.output_names),
        "input_units": list(m.input_units), "output_units": list(m.output_units),
        "widths": list(m.widths), "activation": m.activation,
        "weights": [_arr(w) for w in m.weights], "biases": [_arr(b) for b in m.biases],
        "masks": None if m.masks is None else [_arr(k) for k in m.masks],
        "norm": {"x_mean": _arr(m.x_mean), "x_std": _arr(m.x_std), "y_mean": _arr(m.y_mean),
                 "y_std": _arr(m.y_std), "log_inputs": list(m.log_inputs)},
    }


def model_from_dict(d: dict):
    if d["kind"] == "tl":
        base = model_from_dict(d["base"])
        t = d["tl"]
        return TlModel(base=base, stage=t["stage"], A_in=np.array(t["A_in"]), b_in=np.array(t["b_in"]),
                       A_out=np.array(t["A_out"]), b_out=np.array(t["b_out"]), base_hash=t["base_hash"])
    n = d["norm"]
    return SurrogateModel(
        input_names=tuple(d["input_names"]), output_names=tuple(d["output_names"]), widths=tuple(d["widths"]),
        weights=[np.array(w, dtype=float) for w in d["weights"]], biases=[np.array(b, dtype=float) for b in d["biases"]],
        x_mean=np.array(n["x_mean"]), x_std=np.array(n["x_std"]), y_mean=np.array(n["y_mean"]),
        y_std=np.array(n["y_std"]), activation=d["activation"],
        masks=None if d["masks"] is None else [np.array(k, dtype=float) for k in d["masks"]],
        model_kind=d["kind"], input_units=tuple(d["input_units"]), output_units=tuple(d["output_units"]),
        log_inputs=tuple(bool(f) for f in n["log_inputs"]))


def cepa_to_dict(m: CepaModel) -> dict:
    return {"n_samples": m.n_samples, "dt": m.dt, "window_fraction": m.window_fraction, "horizon": m.horizon,
            "layers": [[c.kernel, c.stride, c.channels] for c in m.layers],
            "weights": [_arr(w) for w in m.weights], "biases": [_arr(b) for b in m.biases],
            "x_mean": _arr(m.x_mean), "x_std": _arr(m.x_std),
            "pass_above": m.pass_above, "fail_below": m.fail_below}


def cepa_from_dict(d: dict) -> CepaModel:
    return CepaModel(d["n_samples"], d["dt"], d["window_fraction"], d["horizon"],
                     [ConvLayer(*c) for c in d["layers"]], [np.array(w) for w in d["weights"]],
                     [np.array(b) for b in d["biases"]], np.array(d["x_mean"]), np.array(d["x_std"]),
                     d["pass_above"], d["fail_below"])


def _body_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class ModelPackage:
    models: dict
    testbench: TestbenchSpec
    testbench_hash: str
    stage: str
    provenance: dict = field(default_factory=dict)
    requires_tl: bool = False
    cepa: Optional[CepaModel] = None


def package_bytes(models: Mapping, tb: TestbenchSpec, provenance: Optional[dict] = None,
                  cepa: Optional[CepaModel] = None) -> bytes:
    doc = {
        "format": FORMAT,
        "testbench": {"id": tb.id, "hash": content_hash(tb), "doc": tb_to_dict(tb)},
        "stage": tb.perturbation.stage,
        "modules": {mid: model_to_dict(models[mid]) for mid in sorted(models)},
        "provenance": {"tool_version": __version__, **(provenance or {})},
    }
    if cepa is not None:
        doc["cepa"] = cepa_to_dict(cepa)
    body = _body_bytes(doc)
    return f"{FORMAT} sha256:{hashlib.sha256(body).hexdigest()}\n".encode("utf-8") + body


def export_package(models: Mapping, tb: TestbenchSpec, path, provenance: Optional[dict] = None,
                   cepa: Optional[CepaModel] = None) -> Path:
    missing = [m.id for m in tb.modules if m.id not in models]
    if missing:
        raise ValueError(f"no model for modules {missing}")
    return atomic_write_bytes(path, package_bytes(models, tb, provenance, cepa))


def import_package(path, local_tb: Optional[TestbenchSpec] = None) -> ModelPackage:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    parts = head.decode("utf-8", errors="replace").split(" ")
    if not sep or len(parts) != 2 or not parts[1].startswith("sha256:"):
        raise ParseError(f"{path}: not a model package")
    if parts[0] != FORMAT:
        raise VersionUnsupported(f"{path}: package format {parts[0]!r} is not supported (expected {FORMAT})")
    if hashlib.sha256(body).hexdigest() != parts[1][len("sha256:"):]:
        raise HashMismatch(f"{path}: content hash does not match the header")
    try:
        doc = json.loads(body)
        tb = tb_from_dict(doc["testbench"]["doc"], str(path))
        models = {mid: model_from_dict(d) for mid, d in doc["modules"].items()}
        cepa = cepa_from_dict(doc["cepa"]) if "cepa" in doc else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed package ({exc})") from exc
    tb_hash = doc["testbench"]["hash"]
    if content_hash(tb) != tb_hash:
        raise HashMismatch(f"{path}: embedded testbench does not match its recorded hash")
    requires_tl = local_tb is not None and content_hash(local_tb) != tb_hash
    for mid, m in models.items():
        if isinstance(m, TlModel) and m.base.weight_hash() != m.base_hash:
            raise HashMismatch(f"{path}: adapter base for {mid} does not match its recorded hash")
    return ModelPackage(models, tb, tb_hash, doc["stage"], doc["provenance"], requires_tl, cepa)
