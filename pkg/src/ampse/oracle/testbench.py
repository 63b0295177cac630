"""Reading, validating and writing ``ampse-tb/1`` testbench packages."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

from ..errors import BindingError, ParseError, UnknownFormula
from .formulas import FORMULAS, REDUCERS
from .types import (
    Binding,
    ModuleSpec,
    Param,
    ParameterSpace,
    PerturbationSpec,
    Port,
    SpecEntry,
    SpecSet,
    TestbenchSpec,
)

FORMAT = "ampse-tb/1"
BUILTINS = ("sar6", "toy1d")

_TOP_KEYS = {"format", "id", "modules", "bindings", "configs", "spec_targets", "perturbation", "reducer"}
_MODULE_KEYS = {"id", "formula_id", "params", "interface_in", "interface_out", "metrics"}


def builtin_path(name: str) -> Path:
    if name not in BUILTINS:
        raise ParseError(f"no built-in testbench {name!r}")
    return Path(str(resources.files("ampse.oracle") / "data" / f"{name}.json"))


def resolve(ref: str | Path) -> Path:
    """Accept a file path or ``builtin:<name>``."""
    ref = str(ref)
    if ref.startswith("builtin:"):
        return builtin_path(ref.split(":", 1)[1])
    return Path(ref)


def load_testbench(package_path) -> TestbenchSpec:
    path = resolve(package_path)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(doc, source=str(path))


def _strict(d: dict, allowed: set, where: str, required: set | None = None):
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ParseError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = (required if required is not None else allowed) - set(d)
    if missing:
        raise ParseError(f"{where}: missing field(s) {sorted(missing)}")


def _port(d: dict, where: str, ranged: bool) -> Port:
    keys = {"name", "unit", "lower", "upper"} if ranged else {"name", "unit"}
    _strict(d, keys, where)
    if ranged:
        if not float(d["lower"]) < float(d["upper"]):
            raise ParseError(f"{where}: lower must be < upper")
        return Port(str(d["name"]), str(d["unit"]), float(d["lower"]), float(d["upper"]))
    return Port(str(d["name"]), str(d["unit"]))


def from_dict(doc: dict, source: str = "<dict>") -> TestbenchSpec:
    _strict(doc, _TOP_KEYS, source)
    if doc["format"] != FORMAT:
        raise ParseError(f"{source}: unsupported format {doc['format']!r} (expected {FORMAT})")
    modules = []
    for i, md in enumerate(doc["modules"]):
        where = f"{source}: modules[{i}]"
        _strict(md, _MODULE_KEYS, where)
        fid = md["formula_id"]
        if fid not in FORMULAS:
            raise UnknownFormula(f"{where}: formula_id {fid!r} is not built in")
        params = []
        for j, pd in enumerate(md["params"]):
            _strict(pd, {"name", "lower", "upper", "grid", "unit"}, f"{where}.params[{j}]", {"name", "lower", "upper"})
            params.append(Param(str(pd["name"]), float(pd["lower"]), float(pd["upper"]),
                                None if pd.get("grid") is None else float(pd["grid"]), str(pd.get("unit", "1"))))
        try:
            space = ParameterSpace(tuple(params))
        except ValueError as exc:
            raise ParseError(f"{where}: {exc}") from exc
        m = ModuleSpec(
            id=str(md["id"]),
            space=space,
            interface_in=tuple(_port(p, f"{where}.interface_in", True) for p in md["interface_in"]),
            interface_out=tuple(_port(p, f"{where}.interface_out", False) for p in md["interface_out"]),
            metrics=tuple(_port(p, f"{where}.metrics", False) for p in md["metrics"]),
            formula_id=fid,
        )
        _check_against_formula(m, where)
        modules.append(m)

    ids = [m.id for m in modules]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{source}: duplicate module ids")

    bindings = []
    for i, bd in enumerate(doc["bindings"]):
        _strict(bd, {"from", "to"}, f"{source}: bindings[{i}]")
        bindings.append(Binding(str(bd["from"]), str(bd["to"])))
    _check_bindings(modules, bindings)

    configs = doc["configs"]
    if not isinstance(configs, dict) or not all(isinstance(v, (int, float)) for v in configs.values()):
        raise ParseError(f"{source}: configs must map names to numbers")

    try:
        specs = SpecSet(tuple(
            SpecEntry(str(e["name"]), str(e["direction"]), None if e.get("target") is None else float(e["target"]),
                      str(e.get("unit", "1")), bool(e.get("minimize", False)))
            for e in doc["spec_targets"]
        ))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{source}: spec_targets: {exc}") from exc

    pd = doc["perturbation"]
    _strict(pd, {"stage", "seed", "layout", "silicon"}, f"{source}: perturbation")
    _strict(pd["layout"], {"cap_scale", "res_scale", "cap_offset"}, f"{source}: perturbation.layout")
    _strict(pd["silicon"], {"metric_scale_sigma", "metric_offset_sigma"}, f"{source}: perturbation.silicon")
    try:
        pert = PerturbationSpec(stage=pd["stage"], seed=int(pd["seed"]), **pd["layout"], **pd["silicon"])
    except ValueError as exc:
        raise ParseError(f"{source}: perturbation: {exc}") from exc

    reducer = doc["reducer"]
    if reducer not in REDUCERS:
        raise UnknownFormula(f"{source}: reducer {reducer!r} is not built in")
    unknown = {e.name for e in specs.entries} - set(REDUCERS[reducer].outputs)
    if unknown:
        raise ParseError(f"{source}: spec_targets name unknown system outputs {sorted(unknown)}")
    units = {e.name: e.unit for e in specs.entries}
    outputs = tuple(Port(name, units.get(name, "1")) for name in REDUCERS[reducer].outputs)

    return TestbenchSpec(
        id=str(doc["id"]),
        modules=tuple(modules),
        bindings=tuple(bindings),
        configs=tuple(sorted((k, v) for k, v in configs.items())),
        spec_targets=specs,
        perturbation=pert,
        reducer=reducer,
        outputs=outputs,
    )


def _check_against_formula(m: ModuleSpec, where: str):
    f = FORMULAS[m.formula_id]
    if tuple(m.space.names) != f.params:
        raise ParseError(f"{where}: params {m.space.names} do not match formula {m.formula_id} {list(f.params)}")
    if [p.name for p in m.interface_out] != list(f.interface_out):
        raise ParseError(f"{where}: interface_out does not match formula {m.formula_id}")
    if [p.name for p in m.metrics] != list(f.metrics):
        raise ParseError(f"{where}: metrics do not match formula {m.formula_id}")
    declared_in = {p.name for p in m.interface_in}
    if not set(f.interface_in) <= declared_in:
        raise ParseError(f"{where}: formula {m.formula_id} needs interface inputs {sorted(f.interface_in)}")
    outs = {p.name for p in (*m.interface_out, *m.metrics)}
    if outs & declared_in:
        raise ParseError(f"{where}: output names overlap interface_in names")


def _check_bindings(modules: list[ModuleSpec], bindings: list[Binding]):
    by_id = {m.id: m for m in modules}
    seen = {}
    for b in bindings:
        sm, sp = b.src
        dm, dp = b.dst
        if sm not in by_id or by_id[sm].port(sp) is None or by_id[sm].port(sp) in by_id[sm].interface_in:
            raise BindingError(f"binding {b.producer} -> {b.consumer}: unknown producer port")
        if dm not in by_id or all(p.name != dp for p in by_id[dm].interface_in):
            raise BindingError(f"binding {b.producer} -> {b.consumer}: unknown consumer port")
        if b.consumer in seen:
            raise BindingError(f"consumer port {b.consumer} bound more than once")
        seen[b.consumer] = b
    for m in modules:
        for p in m.interface_in:
            if f"{m.id}.{p.name}" not in seen:
                raise BindingError(f"consumer port {m.id}.{p.name} is unbound")


def to_dict(tb: TestbenchSpec) -> dict:
    pert = tb.perturbation

    def port(p: Port, ranged=False):
        d = {"name": p.name, "unit": p.unit}
        if ranged:
            d.update(lower=p.lower, upper=p.upper)
        return d

    return {
        "format": FORMAT,
        "id": tb.id,
        "reducer": tb.reducer,
        "configs": dict(tb.configs),
        "modules": [
            {
                "id": m.id,
                "formula_id": m.formula_id,
                "params": [{"name": p.name, "lower": p.lower, "upper": p.upper, "grid": p.grid, "unit": p.unit}
                           for p in m.space.params],
                "interface_in": [port(p, True) for p in m.interface_in],
                "interface_out": [port(p) for p in m.interface_out],
                "metrics": [port(p) for p in m.metrics],
            }
            for m in tb.modules
        ],
        "bindings": [{"from": b.producer, "to": b.consumer} for b in tb.bindings],
        "spec_targets": [
            {"name": e.name, "direction": e.direction, "target": e.target, "unit": e.unit, "minimize": e.minimize}
            for e in tb.spec_targets.entries
        ],
        "perturbation": {
            "stage": pert.stage,
            "seed": pert.seed,
            "layout": {"cap_scale": pert.cap_scale, "res_scale": pert.res_scale, "cap_offset": pert.cap_offset},
            "silicon": {"metric_scale_sigma": pert.metric_scale_sigma,
                        "metric_offset_sigma": pert.metric_offset_sigma},
        },
    }


def canonical_bytes(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def content_hash(tb: TestbenchSpec) -> str:
    return hashlib.sha256(canonical_bytes(to_dict(tb))).hexdigest()


def save_testbench(tb: TestbenchSpec, path) -> Path:
    from ..io import atomic_write_text

    return atomic_write_text(path, json.dumps(to_dict(tb), indent=2, ensure_ascii=False) + "\n")
