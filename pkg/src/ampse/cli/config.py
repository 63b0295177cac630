"""Strict JSON pipeline configuration with documented defaults."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from ..errors import ParseError, UnknownKey
from ..io import atomic_write_text

STAGES = ("schematic", "layout", "silicon")

TRAINING_DEFAULTS = {
    "hidden": [32, 32],          # hidden layer widths
    "lr": 1e-3,
    "epochs": 2000,
    "batch": 32,
    "weight_decay": 0.0,
    "patience": 200,             # epochs without validation improvement; 0 disables
    "schedule": "constant",      # or "cosine"
    "log_inputs": True,          # feed strictly positive inputs as log(x)
}

DEFAULTS: dict[str, Any] = {
    "testbench": "builtin:sar6",  # builtin:<name> or a path relative to the config file
    "stage": "schematic",         # stage of the target testbench
    "seed": 0,                    # global seed; every sub-seed derives from it
    "out": "ampse_out",           # output directory (relative to the working directory)
    "specs": {},                  # spec name -> target override
    "sampling": {
        "sampler": "latin_hypercube",
        "n_samples": 400,          # per module
    },
    "training": TRAINING_DEFAULTS,
    "modules": {},                # module id -> partial "training" overrides
    "cepa": {
        "enabled": False,
        "window_fraction": 0.25,
        "pass_above": 0.9,
        "fail_below": 0.1,
        "n_train": 400,
        "epochs": 300,
    },
    "transfer": {
        "enabled": True,           # with a non-schematic stage: adapt schematic models instead of retraining
        "n_samples": 40,
        "epochs": 5000,
        "lr": 3e-2,
    },
    "search": {
        "n_starts": 64,
        "max_iters": 300,
        "lr": 0.05,
        "penalty": 10.0,
        "penalty_schedule": [1.0, 10.0, 100.0],
        "margin": 0.005,
        "oracle_budget": 60,
        "keep_top_k": 10,
        "prune_keep_m": 3,
        "polish": True,
    },
    "sweep": {
        "enabled": False,
        "bits": [4, 5, 6, 7, 8, 9, 10],
        "rates": [0.5, 1.0, 2.0, 4.0, 8.0],
        "n_samples": 500,          # per module and resolution
        "n_starts": 16,
        "max_iters": 150,
        "use_oracle": False,       # search on the oracle instead of per-resolution surrogates
        "plot": True,
    },
}

# sections whose keys are user-chosen names rather than a fixed schema
_FREE_SECTIONS = {"specs", "modules"}


@dataclass(frozen=True)
class PipelineConfig:
    data: dict
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       stage: Optional[str] = None) -> "PipelineConfig":
        d = copy.deepcopy(self.data)
        if seed is not None:
            d["seed"] = int(seed)
        if out is not None:
            d["out"] = str(out)
        if stage is not None:
            d["stage"] = stage
        return from_dict(d, self.base_dir)

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out"])

    def training_for(self, module_id: str) -> dict:
        return {**self.data["training"], **self.data["modules"].get(module_id, {})}

    def write_resolved(self, out_dir=None) -> Path:
        return atomic_write_text(Path(out_dir or self.out_dir) / "config.resolved.json", self.to_json())


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise UnknownKey(f"unknown configuration key {where!r}", key=where)
        d = defaults[key]
        if isinstance(d, dict) and key not in _FREE_SECTIONS:
            if not isinstance(value, dict):
                raise ParseError(f"{where}: expected an object", field=where)
            out[key] = _merge(d, value, where)
        elif key == "modules":
            if not isinstance(value, dict):
                raise ParseError(f"{where}: expected an object", field=where)
            out[key] = {m: _merge_partial(TRAINING_DEFAULTS, v, f"{where}.{m}") for m, v in value.items()}
        elif key == "specs":
            if not isinstance(value, dict) or not all(_type_ok(1.0, v) for v in value.values()):
                raise ParseError(f"{where}: expected an object of numbers", field=where)
            out[key] = {k: float(v) for k, v in value.items()}
        else:
            if not _type_ok(d, value):
                raise ParseError(f"{where}: expected {type(d).__name__}, got {value!r}", field=where)
            out[key] = float(value) if isinstance(d, float) else value
    return out


def _merge_partial(defaults: dict, given, path: str) -> dict:
    if not isinstance(given, dict):
        raise ParseError(f"{path}: expected an object", field=path)
    full = _merge(defaults, given, path)
    return {k: full[k] for k in given}


def _check(d: dict, base_dir: Path):
    if d["stage"] not in STAGES:
        raise ParseError(f"stage: must be one of {STAGES}", field="stage")
    tb = d["testbench"]
    if not tb.startswith("builtin:") and not (base_dir / tb).exists():
        raise ParseError(f"testbench: {tb} not found relative to {base_dir}", field="testbench")
    if d["sampling"]["sampler"] not in ("uniform", "latin_hypercube"):
        raise ParseError("sampling.sampler: must be 'uniform' or 'latin_hypercube'", field="sampling.sampler")
    for key in ("n_samples",):
        if d["sampling"][key] < 1:
            raise ParseError(f"sampling.{key}: must be >= 1", field=f"sampling.{key}")
    c = d["cepa"]
    if not 0 < c["window_fraction"] <= 1 or not 0 <= c["fail_below"] <= c["pass_above"] <= 1:
        raise ParseError("cepa: need 0 < window_fraction <= 1 and 0 <= fail_below <= pass_above <= 1",
                         field="cepa")
    for sec in ("training",):
        if d[sec]["schedule"] not in ("constant", "cosine"):
            raise ParseError(f"{sec}.schedule: must be 'constant' or 'cosine'", field=f"{sec}.schedule")
    if d["seed"] < 0:
        raise ParseError("seed: must be >= 0", field="seed")


def from_dict(d: dict, base_dir=".") -> PipelineConfig:
    if not isinstance(d, dict):
        raise ParseError("configuration must be a JSON object")
    data = _merge(DEFAULTS, d, "")
    base = Path(base_dir)
    _check(data, base)
    return PipelineConfig(data, base)


def parse_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", line=exc.lineno) from exc
    return from_dict(raw, path.parent)


def default_config() -> PipelineConfig:
    return from_dict({})


def testbench_ref(cfg: PipelineConfig) -> str:
    tb = cfg["testbench"]
    return tb if tb.startswith("builtin:") else str(cfg.base_dir / tb)
