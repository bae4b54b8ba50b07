"""Arithmetic-circuit view of a forward pass: trace, verify, account.

A PolyGraph is built by replaying a recorded tape and classifying every
op that touches ciphertext-tainted data (anything downstream of a marked
graph input). Whitelisted node kinds:

    input     model input (ciphertext), 0 levels
    constant  plaintext value folded from parameters/constants, 0 levels
    add       addition/subtraction, 0 levels
    mult      ciphertext x ciphertext product, 1 level
    linear    plaintext-weighted linear combination (matmul by weights,
              constant scale, mean, elementwise plaintext product) at
              1 level; pure data movement (reshape/transpose) at 0

Every other op kind (softmax, relu, gelu, power, reductions like var/max,
clamp, ...) becomes a violation node that verify_polynomial reports with
its provenance site. Depth accounting follows the ciphertext-level model:
each level-consuming node adds one multiplicative level along its path;
bootstraps are placed greedily along the critical path when the budget
of levels-between-bootstraps runs out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import PolyformerError, ShapeError
from .seeding import SeedStream

WHITELIST = ("input", "constant", "add", "mult", "linear")


@dataclass
class NoiseModel:
    """Per-operation bounded perturbation magnitude (uniform in [-eps, eps])."""

    epsilon: float

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and >= 0")


@dataclass
class GraphNode:
    id: int
    kind: str
    inputs: list[int]
    level_cost: int
    site: str | None = None
    desc: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()


@dataclass
class Budget:
    levels: int = 12
    mults_before_bootstrap: int = 9


@dataclass
class DepthReport:
    max_depth: int
    total_mults: int
    bootstraps: int
    budget: Budget
    critical_path: list[int]

    def to_json(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "total_mults": self.total_mults,
            "bootstraps": self.bootstraps,
            "budget": {"levels": self.budget.levels,
                       "mults_before_bootstrap": self.budget.mults_before_bootstrap},
            "critical_path": self.critical_path,
        }


@dataclass
class VerificationResult:
    passed: bool
    violations: list[dict]

    def to_text(self) -> str:
        """Newline-delimited violation report (empty string when passing)."""
        return "\n".join(
            f"node {v['node_id']}: {v['kind']} at {v['site']}" for v in self.violations
        )


class PolyGraph:
    """Acyclic arithmetic graph with per-node level consumption."""

    def __init__(self):
        self.nodes: list[GraphNode] = []
        self.output_id: int | None = None
        self.input_names: dict[str, int] = {}

    def add_node(self, kind: str, inputs: list[int], level_cost: int,
                 site: str | None = None, desc: dict | None = None,
                 shape: tuple[int, ...] = ()) -> int:
        nid = len(self.nodes)
        for i in inputs:
            if i >= nid:
                raise ShapeError(f"node {nid} references future node {i}: graph must be acyclic")
        self.nodes.append(GraphNode(nid, kind, list(inputs), level_cost, site,
                                    desc or {}, tuple(shape)))
        return nid

    def add_input(self, name: str, shape: tuple[int, ...] = ()) -> int:
        nid = self.add_node("input", [], 0, site=name, desc={"fn": "input", "name": name},
                            shape=shape)
        self.input_names[name] = nid
        return nid

    def add_constant(self, value: np.ndarray, site: str | None = None) -> int:
        value = np.asarray(value, dtype=np.float64)
        return self.add_node("constant", [], 0, site=site,
                             desc={"fn": "const", "value": value}, shape=value.shape)

    # -- evaluation

    def eval(self, inputs: dict[str, np.ndarray], noise: NoiseModel | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
        """Execute the graph on plaintext arrays.

        With a noise model, every computed (non-input, non-constant) node's
        output is perturbed elementwise by uniform noise in [-eps, eps],
        mimicking approximate encrypted arithmetic. eps = 0 reproduces the
        noiseless run bit-exactly.
        """
        if self.output_id is None:
            raise PolyformerError("graph has no designated output")
        eps = 0.0 if noise is None else noise.epsilon
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            v = self._apply(node, values, inputs)
            if eps > 0.0 and node.kind not in ("input", "constant"):
                v = v + rng.uniform(-eps, eps, size=np.shape(v))
            values[node.id] = v
        return values[self.output_id]

    def _apply(self, node: GraphNode, values: dict, inputs: dict) -> np.ndarray:
        fn = node.desc.get("fn")
        args = [values[i] for i in node.inputs]
        if fn == "input":
            name = node.desc["name"]
            if name not in inputs:
                raise PolyformerError(f"missing graph input {name!r}")
            return np.asarray(inputs[name], dtype=np.float64)
        if fn == "const":
            return node.desc["value"]
        if fn == "add":
            return args[0] + args[1]
        if fn == "sub":
            return args[0] - args[1]
        if fn == "mul":
            return args[0] * args[1]
        if fn == "matmul":
            return T._mm(args[0], args[1])
        if fn == "scale":
            return args[0] * node.desc["c"]
        if fn == "mean":
            return args[0].mean(axis=node.desc["axis"], keepdims=node.desc["keepdims"])
        if fn == "sum":
            return args[0].sum(axis=node.desc["axis"], keepdims=node.desc["keepdims"])
        if fn == "reshape":
            return args[0].reshape(node.desc["shape"])
        if fn == "transpose":
            return np.transpose(args[0], node.desc["axes"])
        raise PolyformerError(
            f"node {node.id} ({node.kind}) is not executable: graph contains "
            f"non-arithmetic operations"
        )

    # -- serialization (structure only; constant payloads are not exported)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": n.id, "kind": n.kind, "inputs": n.inputs,
                 "level_cost": n.level_cost, "site": n.site}
                for n in self.nodes
            ],
            "output": self.output_id,
            "inputs": {k: v for k, v in self.input_names.items()},
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "PolyGraph":
        if isinstance(obj, str):
            obj = json.loads(obj)
        g = cls()
        for n in obj["nodes"]:
            g.add_node(n["kind"], list(n["inputs"]), int(n["level_cost"]),
                       site=n.get("site"), desc={"fn": "opaque"})
        g.output_id = obj.get("output")
        g.input_names = dict(obj.get("inputs", {}))
        return g


# ---------------------------------------------------------------------------
# tracing a tape into a PolyGraph


def _classify(t: T.Tensor, ct_flags: list[bool], idx: int) -> tuple[str, int, dict]:
    """Map one recorded engine op to (kind, level_cost, descriptor)."""
    op = t.op
    both_ct = sum(ct_flags) >= 2
    if op == "add":
        return "add", 0, {"fn": "add"}
    if op == "sub":
        return "add", 0, {"fn": "sub"}
    if op == "mul":
        return ("mult" if both_ct else "linear"), 1, {"fn": "mul"}
    if op == "matmul":
        return ("mult" if both_ct else "linear"), 1, {"fn": "matmul"}
    if op == "scale":
        c = t.meta["factor"]
        cost = 0 if c in (1.0, -1.0) else 1  # negation is free in the ring
        return "linear", cost, {"fn": "scale", "c": c}
    if op == "mean":
        return "linear", 1, {"fn": "mean", "axis": t.meta["axis"], "keepdims": t.meta["keepdims"]}
    if op == "sum":
        return "add", 0, {"fn": "sum", "axis": t.meta["axis"], "keepdims": t.meta["keepdims"]}
    if op == "reshape":
        return "linear", 0, {"fn": "reshape", "shape": t.meta["shape"]}
    if op == "transpose":
        return "linear", 0, {"fn": "transpose", "axes": t.meta["axes"]}
    # Everything else is outside the encrypted-arithmetic model.
    return op, 0, {"fn": "opaque"}


def trace_tape(tape: T.Tape, output: T.Tensor) -> PolyGraph:
    """Build the arithmetic graph for the ciphertext-tainted slice of a tape."""
    graph = PolyGraph()
    ct_ids: dict[T.Tensor, int] = {}
    const_ids: dict[T.Tensor, int] = {}

    def resolve(p: T.Tensor) -> tuple[bool, int]:
        if p in ct_ids:
            return True, ct_ids[p]
        if "graph_input" in p.meta:
            nid = graph.add_input(p.meta["graph_input"], p.shape)
            ct_ids[p] = nid
            return True, nid
        if p not in const_ids:
            const_ids[p] = graph.add_constant(p.data)
        return False, const_ids[p]

    for idx, node_t in enumerate(tape.nodes):
        if "graph_input" in node_t.meta:
            nid = graph.add_input(node_t.meta["graph_input"], node_t.shape)
            ct_ids[node_t] = nid
            continue
        parent_ct = [p in ct_ids or "graph_input" in p.meta for p in node_t.parents]
        if not any(parent_ct):
            continue  # plaintext subcomputation: folded into constants on demand
        resolved = [resolve(p) for p in node_t.parents]
        kind, cost, desc = _classify(node_t, [r[0] for r in resolved], idx)
        site = node_t.meta.get("site") or f"{node_t.op}#{idx}"
        nid = graph.add_node(kind, [r[1] for r in resolved], cost, site=site,
                             desc=desc, shape=node_t.shape)
        ct_ids[node_t] = nid

    if output in ct_ids:
        graph.output_id = ct_ids[output]
    else:
        raise PolyformerError(
            "traced output does not depend on any graph input; mark one with "
            "meta['graph_input']"
        )
    return graph


def trace_forward(fn: Callable[[], T.Tensor]) -> tuple[PolyGraph, T.Tensor]:
    """Run fn under a fresh tape and trace its arithmetic graph."""
    with T.Tape() as tape:
        out = fn()
    return trace_tape(tape, out), out


# ---------------------------------------------------------------------------
# verification and accounting


def verify_polynomial(graph: PolyGraph) -> VerificationResult:
    """Pass iff every node kind is in the arithmetic whitelist."""
    violations = [
        {"node_id": n.id, "kind": n.kind, "site": n.site or "<unknown>"}
        for n in graph.nodes
        if n.kind not in WHITELIST
    ]
    return VerificationResult(passed=not violations, violations=violations)


def node_depths(graph: PolyGraph) -> list[int]:
    depths = [0] * len(graph.nodes)
    for n in graph.nodes:
        base = max((depths[i] for i in n.inputs), default=0)
        depths[n.id] = base + n.level_cost
    return depths


def depth_report(graph: PolyGraph, budget: Budget | None = None) -> DepthReport:
    """Longest multiplicative path, total level consumers, greedy bootstraps."""
    budget = budget or Budget()
    depths = node_depths(graph)
    total_mults = sum(1 for n in graph.nodes if n.level_cost > 0)
    if not graph.nodes:
        return DepthReport(0, 0, 0, budget, [])
    tip = int(np.argmax(depths))
    # Critical path: walk back through the deepest parent.
    path = [tip]
    cur = tip
    while graph.nodes[cur].inputs:
        parents = graph.nodes[cur].inputs
        cur = max(parents, key=lambda i: depths[i])
        path.append(cur)
    path.reverse()

    consumed = 0
    bootstraps = 0
    for nid in path:
        cost = graph.nodes[nid].level_cost
        if cost == 0:
            continue
        if consumed + cost > budget.mults_before_bootstrap:
            bootstraps += 1
            consumed = 0
        consumed += cost
    return DepthReport(max(depths), total_mults, bootstraps, budget, path)


def noisy_eval(graph: PolyGraph, inputs: dict[str, np.ndarray], noise: NoiseModel,
               trials: int = 10, seed: int = 0) -> dict:
    """Evaluate under per-op bounded noise; summarize output deviations.

    Returns the noiseless output, per-trial max deviations, and the
    trial outputs (for downstream agreement statistics).
    """
    clean = graph.eval(inputs)
    stream = SeedStream(seed)
    deviations = []
    outputs = []
    for t in range(trials):
        if noise.epsilon == 0.0:
            out = graph.eval(inputs)
        else:
            out = graph.eval(inputs, noise=noise, rng=stream.rng(f"trial{t}"))
        outputs.append(out)
        deviations.append(float(np.max(np.abs(out - clean))))
    return {
        "noiseless": clean,
        "max_deviation": max(deviations) if deviations else 0.0,
        "per_trial_deviation": deviations,
        "outputs": outputs,
    }


def write_violations(path: str | Path, result: VerificationResult) -> None:
    Path(path).write_text(result.to_text() + ("\n" if result.violations else ""))
