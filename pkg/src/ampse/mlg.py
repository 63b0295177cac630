"""Module linking graph: build, validate, compose evaluators, derive CCI masks."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import ad
from .errors import CycleError, MissingEvaluator, ShapeError
from .oracle.evaluate import evaluate_module
from .oracle.formulas import REDUCERS
from .oracle.types import TestbenchSpec


@dataclass(frozen=True)
class Edge:
    src: str  # "module.port"
    dst: str

    @property
    def src_module(self) -> str:
        return self.src.partition(".")[0]

    @property
    def dst_module(self) -> str:
        return self.dst.partition(".")[0]


@dataclass(frozen=True)
class Mlg:
    tb: TestbenchSpec = field(repr=False)
    vertices: tuple[str, ...]
    edges: tuple[Edge, ...]
    order: tuple[str, ...]

    def upstream(self, vertex: str) -> set[str]:
        """All transitive predecessors of ``vertex``."""
        preds = {v: set() for v in self.vertices}
        for e in self.edges:
            preds[e.dst_module].add(e.src_module)
        seen, stack = set(), [vertex]
        while stack:
            for p in preds[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def to_text(self) -> str:
        return "".join(f"{e.src} -> {e.dst}\n" for e in self.edges)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str


def _find_cycle(vertices, edges) -> list[str]:
    succ = {v: sorted({e.dst_module for e in edges if e.src_module == v}) for v in vertices}
    colour = dict.fromkeys(vertices, 0)
    stack: list[str] = []

    def visit(v):
        colour[v] = 1
        stack.append(v)
        for w in succ.get(v, ()):
            if colour.get(w) == 1:
                return stack[stack.index(w):] + [w]
            if colour.get(w) == 0:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        colour[v] = 2
        return None

    for v in sorted(vertices):
        if colour[v] == 0:
            found = visit(v)
            if found:
                return found
    return []


def topological_order(vertices, edges) -> tuple[str, ...]:
    """Kahn's algorithm; ties broken by lexicographic module id."""
    indeg = dict.fromkeys(vertices, 0)
    succ = {v: set() for v in vertices}
    for e in edges:
        if e.src_module in succ and e.dst_module in indeg and e.dst_module not in succ[e.src_module]:
            succ[e.src_module].add(e.dst_module)
            indeg[e.dst_module] += 1
    heap = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != len(indeg):
        cycle = _find_cycle(list(indeg), edges)
        raise CycleError("module linking graph has a cycle: " + " -> ".join(cycle), cycle)
    return tuple(order)


def build_graph(tb: TestbenchSpec) -> Mlg:
    vertices = tuple(m.id for m in tb.modules)
    edges = tuple(Edge(b.producer, b.consumer) for b in tb.bindings)
    return Mlg(tb, vertices, edges, topological_order(vertices, edges))


def validate(g: Mlg, tb: Optional[TestbenchSpec] = None) -> list[Diagnostic]:
    tb = tb if tb is not None else g.tb
    out = []
    ids = [m.id for m in tb.modules]
    if len(set(g.vertices)) != len(g.vertices):
        out.append(Diagnostic("DuplicateVertex", "a module appears twice among the vertices"))
    for v in g.vertices:
        if v not in ids:
            out.append(Diagnostic("UnknownVertex", f"vertex {v} has no module spec"))
    for mid in ids:
        if mid not in g.vertices:
            out.append(Diagnostic("MissingVertex", f"module {mid} is not a vertex"))
    for e in g.edges:
        ports = []
        for end, side in ((e.src, "source"), (e.dst, "target")):
            mid, _, pname = end.partition(".")
            port = tb.module(mid).port(pname) if mid in ids else None
            if port is None:
                out.append(Diagnostic("UnknownPort", f"edge {e.src} -> {e.dst}: {side} port {end} does not exist"))
            ports.append(port)
        if all(ports) and ports[0].unit != ports[1].unit:
            out.append(Diagnostic("UnitMismatch",
                                  f"edge {e.src} -> {e.dst}: {ports[0].unit} bound to {ports[1].unit}"))
    known = [v for v in g.vertices if v in ids]
    cycle = _find_cycle(known, [e for e in g.edges if e.src_module in known and e.dst_module in known])
    if cycle:
        out.append(Diagnostic("CycleError", "cycle: " + " -> ".join(cycle)))
    return out


# --- composition ----------------------------------------------------------------

ModuleEvaluator = Callable[[dict, dict], tuple]


def oracle_evaluators(tb: TestbenchSpec, check_grid: bool = True) -> dict[str, ModuleEvaluator]:
    def make(mid):
        return lambda params, iface: evaluate_module(tb, mid, params, iface, check_grid=check_grid)

    return {m.id: make(m.id) for m in tb.modules}


def compose_evaluate(g: Mlg, evaluators: Mapping[str, ModuleEvaluator], full_params: dict,
                     grad: bool = False):
    """Evaluate the system through per-module evaluators in topological order.

    With ``grad=True`` the full parameters are seeded as dual numbers and the
    return value is ``(specs, jacobians)`` where ``jacobians[spec]`` has shape
    ``batch + (P,)`` over ``tb.param_names``.
    """
    tb = g.tb
    missing = [v for v in g.vertices if v not in evaluators]
    if missing:
        raise MissingEvaluator(f"no evaluator for {missing}")
    names = tb.param_names
    absent = [n for n in names if n not in full_params]
    if absent:
        raise ShapeError(f"full parameter assignment lacks {absent}")
    params = {n: full_params[n] for n in names}
    if grad:
        shape = np.broadcast_shapes(*(np.shape(ad.value_of(v)) for v in params.values()))
        params = {n: ad.Dual.seed(np.broadcast_to(np.asarray(params[n], dtype=float), shape), i, len(names))
                  for i, n in enumerate(names)}
    feeds = {e.dst: e.src for e in g.edges}
    values = {}
    for mid in g.order:
        module = tb.module(mid)
        local = {p: params[f"{mid}.{p}"] for p in module.space.names}
        iface = {p.name: values[feeds[f"{mid}.{p.name}"]] for p in module.interface_in}
        metrics, outs = evaluators[mid](local, iface)
        for k, v in {**metrics, **outs}.items():
            values[f"{mid}.{k}"] = v
    specs = REDUCERS[tb.reducer].fn(values, params, tb.cfg)
    if not grad:
        return specs
    shape = np.shape(ad.value_of(next(iter(params.values()))))
    vals, jac = {}, {}
    for k, v in specs.items():
        if isinstance(v, ad.Dual):
            vals[k], jac[k] = v.value, v.grad
        else:
            vals[k] = np.broadcast_to(np.asarray(v, dtype=float), shape)
            jac[k] = np.zeros(shape + (len(names),))
    return vals, jac


# --- CCI-NN connectivity ----------------------------------------------------------

@dataclass(frozen=True)
class ConnectivityMask:
    """Binary masks shaped like the weight matrices (``fan_in x fan_out``)."""

    layers: tuple[np.ndarray, ...]
    input_groups: tuple[str, ...]   # parameter index -> module id
    hidden_groups: tuple[str, ...]  # hidden unit -> module id (same for every hidden layer)
    output_names: tuple[str, ...]   # output index -> owning spec

    def density(self) -> float:
        total = sum(m.size for m in self.layers)
        return float(sum(m.sum() for m in self.layers) / total)

    def shapes(self) -> list[tuple[int, int]]:
        return [m.shape for m in self.layers]


def default_group_sizes(g: Mlg, width: int, minimum: int = 4) -> dict[str, int]:
    """Split ``width`` proportionally to parameter counts (largest remainder), >= ``minimum`` each."""
    counts = {v: g.tb.module(v).space.dim for v in g.order}
    if minimum * len(counts) > width:
        raise ShapeError(f"width {width} cannot hold {len(counts)} groups of {minimum}")
    total = sum(counts.values())
    raw = {v: width * c / total for v, c in counts.items()}
    sizes = {v: max(minimum, int(np.floor(r))) for v, r in raw.items()}
    by_remainder = sorted(counts, key=lambda v: (-(raw[v] - np.floor(raw[v])), v))
    i = 0
    while sum(sizes.values()) < width:
        sizes[by_remainder[i % len(by_remainder)]] += 1
        i += 1
    while sum(sizes.values()) > width:
        v = max((v for v in sizes if sizes[v] > minimum), key=lambda v: (sizes[v] - raw[v], v))
        sizes[v] -= 1
    return sizes


SYSTEM_GROUP = "__system__"


def connectivity_mask(g: Mlg, arch, group_sizes: Optional[Mapping[str, int]] = None,
                      output_names=None, system_units: int = 8) -> ConnectivityMask:
    """Masks for a network over the full parameter vector with widths ``arch``.

    Hidden units are grouped per module (in topological order). A first-layer
    unit of group ``m`` sees only ``m``'s parameters; a deeper unit of group
    ``m`` sees units of ``m`` and of every transitive upstream module.
    ``system_units`` extra units form a sink group downstream of every module,
    standing in for the reducer that combines module outputs into system
    specs; it sees everything. The output layer is dense.
    """
    arch = list(arch)
    tb = g.tb
    input_groups = tuple(n.partition(".")[0] for n in tb.param_names)
    if arch[0] != len(input_groups):
        raise ShapeError(f"input width {arch[0]} != number of parameters {len(input_groups)}")
    hidden = arch[1:-1]
    if not hidden or len(set(hidden)) != 1:
        raise ShapeError("hidden layers must all have the same width")
    if system_units < 0 or system_units >= hidden[0]:
        raise ShapeError(f"system_units {system_units} must lie in [0, {hidden[0]})")
    width = hidden[0] - system_units
    sizes = dict(group_sizes) if group_sizes is not None else default_group_sizes(g, width)
    if set(sizes) != set(g.vertices) or sum(sizes.values()) != width:
        raise ShapeError(f"group sizes {sizes} do not sum to module width {width}")
    hidden_groups = tuple(v for v in g.order for _ in range(sizes[v])) + (SYSTEM_GROUP,) * system_units
    sees = {v: g.upstream(v) | {v} for v in g.vertices}
    sees[SYSTEM_GROUP] = set(g.vertices) | {SYSTEM_GROUP}

    first = np.array([[1.0 if src == dst or dst == SYSTEM_GROUP else 0.0 for dst in hidden_groups]
                      for src in input_groups])
    inner = np.array([[1.0 if src in sees[dst] else 0.0 for dst in hidden_groups] for src in hidden_groups])
    layers = [first] + [inner.copy() for _ in range(len(hidden) - 1)] + [np.ones((hidden[-1], arch[-1]))]
    outputs = tuple(output_names) if output_names is not None else tuple(p.name for p in tb.outputs)
    return ConnectivityMask(tuple(layers), input_groups, hidden_groups, outputs)


def full_mask(arch) -> ConnectivityMask:
    """All-ones mask (equivalent to a fully-connected network)."""
    arch = list(arch)
    layers = tuple(np.ones((a, b)) for a, b in zip(arch[:-1], arch[1:]))
    return ConnectivityMask(layers, (), (), ())
