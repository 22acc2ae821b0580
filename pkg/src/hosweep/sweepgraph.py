"""Per-ordinate element dependency graphs and sweep orderings.

Vertices are mesh elements; an edge ``u -> v`` means element ``v`` takes
upwind data from ``u``.  Orderings are built by condensing strongly
connected components (Tarjan) and breaking each component with a minimum
weight feedback arc set: exact subset dynamic programming for small
components, the Eades-Lin-Smyth greedy heuristic for large ones.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

WEIGHTINGS = ("unity", "face", "siginvface")
MAX_EXACT = 20


class WeightingError(ValueError):
    pass


def normalize_weighting(name: str) -> str:
    key = name.lower().replace("_", "").replace("-", "")
    if key == "sigmainvface":
        key = "siginvface"
    if key not in WEIGHTINGS:
        raise WeightingError(f"unknown weighting {name!r}; choose from Unity, Face, SigInvFace")
    return key


@dataclass
class DependencyGraph:
    n_vertices: int
    weights: dict                     # (u, v) -> z_{u,v} > 0
    succ: list = field(init=False, repr=False)
    pred: list = field(init=False, repr=False)

    def __post_init__(self):
        self.succ = [[] for _ in range(self.n_vertices)]
        self.pred = [[] for _ in range(self.n_vertices)]
        for (u, v), w in sorted(self.weights.items()):
            if u == v:
                raise ValueError(f"self-loop on vertex {u}")
            if not w > 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive weight {w}")
            self.succ[u].append(v)
            self.pred[v].append(u)

    @property
    def edges(self):
        return sorted(self.weights)

    @property
    def n_edges(self) -> int:
        return len(self.weights)

    def subgraph_weights(self, vertices) -> dict:
        vs = set(vertices)
        return {(u, v): w for (u, v), w in self.weights.items() if u in vs and v in vs}


def build_graph(op, d: int, weighting: str = "unity") -> DependencyGraph:
    """Dependency graph of ordinate *d* from the assembled coupling blocks.

    ``unity``: ``z = 1``; ``face``: ``max|F_{v,u}|``;
    ``siginvface``: ``max|M_{t,v}^{-1} F_{v,u}|``.
    """
    kind = normalize_weighting(weighting)
    weights = {}
    lu_cache = {}
    for v, incoming in op.couplings[d].items():
        for u, block in incoming:
            if kind == "unity":
                z = 1.0
            elif kind == "face":
                z = float(np.max(np.abs(block)))
            else:
                if v not in lu_cache:
                    Mt = op.Mt[v]
                    if not np.all(np.isfinite(Mt)) or np.linalg.cond(Mt) > 1e14:
                        raise WeightingError(
                            f"SigInvFace weighting needs invertible M_t; element {v} "
                            f"has a singular total-cross-section mass matrix")
                    lu_cache[v] = sla.lu_factor(Mt)
                z = float(np.max(np.abs(sla.lu_solve(lu_cache[v], block))))
            weights[(u, v)] = z
    return DependencyGraph(op.n_elements, weights)


# ---------------------------------------------------------------------------
# Strongly connected components

def tarjan_scc(g: DependencyGraph) -> list[list[int]]:
    """Strongly connected components in reverse topological order of the
    condensation (every edge between components points to an earlier one).

    Iterative, so deep graphs do not hit the recursion limit.
    """
    n = g.n_vertices
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    out: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, i = work[-1]
            succ = g.succ[v]
            if i < len(succ):
                work[-1] = (v, i + 1)
                w = succ[i]
                if index[w] == -1:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, 0))
                elif on_stack[w]:
                    low[v] = min(low[v], index[w])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                out.append(sorted(comp))
    return out


# ---------------------------------------------------------------------------
# Feedback arc sets

@dataclass
class FASResult:
    order: list            # vertex ids in sweep order
    lagged: list           # backward edges (u, v): u placed after v
    weight: float


def backward_edges(order, weights: dict):
    pos = {v: i for i, v in enumerate(order)}
    lagged = sorted((u, v) for (u, v) in weights if pos[u] > pos[v])
    return lagged, float(sum(weights[e] for e in lagged))


def min_fas_exact(vertices, weights: dict, threshold: int = MAX_EXACT) -> FASResult:
    """Globally minimum-weight feedback arc set by dynamic programming over
    vertex subsets.

    ``best[S]`` is the cheapest way to place the set ``S`` first; appending
    ``v`` after ``S`` costs the weight of edges ``v -> S``, which become
    backward.  ``O(2^n n^2)`` time.
    """
    vs = sorted(vertices)
    n = len(vs)
    if n > threshold or n > MAX_EXACT:
        raise ValueError(f"component of size {n} exceeds the exact-solver threshold "
                         f"{min(threshold, MAX_EXACT)}; use min_fas_heuristic")
    if n <= 1:
        return FASResult(list(vs), [], 0.0)
    loc = {v: i for i, v in enumerate(vs)}
    W = np.zeros((n, n))
    for (u, v), w in weights.items():
        if u in loc and v in loc:
            W[loc[u], loc[v]] += w

    size = 1 << n
    masks = np.arange(size, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n)) & 1
    popcount = bits.sum(axis=1)
    best = np.full(size, np.inf)
    best[0] = 0.0
    last = np.full(size, -1, dtype=np.int64)
    for k in range(1, n + 1):
        T = masks[popcount == k]
        for v in range(n):
            Tv = T[bits[T, v] == 1]
            S = Tv ^ (1 << v)
            cand = best[S] + bits[S] @ W[v]
            improve = cand < best[Tv]
            best[Tv[improve]] = cand[improve]
            last[Tv[improve]] = v
    order_local = []
    mask = size - 1
    while mask:
        v = int(last[mask])
        order_local.append(v)
        mask ^= 1 << v
    order = [vs[i] for i in reversed(order_local)]
    sub = {e: w for e, w in weights.items() if e[0] in loc and e[1] in loc}
    lagged, total = backward_edges(order, sub)
    return FASResult(order, lagged, total)


def min_fas_heuristic(vertices, weights: dict) -> FASResult:
    """Weighted Eades-Lin-Smyth greedy ordering.

    Sinks go to the tail, sources to the head, otherwise the vertex with
    the largest weighted out-degree minus in-degree goes to the head.  Ties
    break towards the smallest vertex id.
    """
    vs = sorted(vertices)
    remaining = set(vs)
    out_w = {v: {} for v in vs}
    in_w = {v: {} for v in vs}
    for (u, v), w in weights.items():
        if u in remaining and v in remaining:
            out_w[u][v] = out_w[u].get(v, 0.0) + w
            in_w[v][u] = in_w[v].get(u, 0.0) + w
    out_sum = {v: sum(out_w[v].values()) for v in vs}
    in_sum = {v: sum(in_w[v].values()) for v in vs}
    out_cnt = {v: len(out_w[v]) for v in vs}
    in_cnt = {v: len(in_w[v]) for v in vs}

    def remove(v):
        remaining.discard(v)
        for u, w in in_w[v].items():
            if u in remaining:
                out_sum[u] -= w
                out_cnt[u] -= 1
        for u, w in out_w[v].items():
            if u in remaining:
                in_sum[u] -= w
                in_cnt[u] -= 1

    head, tail = [], []
    while remaining:
        progressed = True
        while progressed:
            progressed = False
            sinks = [v for v in sorted(remaining) if out_cnt[v] == 0]
            while sinks:
                v = sinks.pop(0)
                if v not in remaining or out_cnt[v] != 0:
                    continue
                tail.append(v)
                preds = [u for u in in_w[v] if u in remaining]
                remove(v)
                sinks = sorted(set(sinks) | {u for u in preds if out_cnt[u] == 0})
                progressed = True
            sources = [v for v in sorted(remaining) if in_cnt[v] == 0]
            while sources:
                v = sources.pop(0)
                if v not in remaining or in_cnt[v] != 0:
                    continue
                head.append(v)
                succs = [u for u in out_w[v] if u in remaining]
                remove(v)
                sources = sorted(set(sources) | {u for u in succs if in_cnt[u] == 0})
                progressed = True
        if remaining:
            v = max(sorted(remaining), key=lambda x: out_sum[x] - in_sum[x])
            head.append(v)
            remove(v)
    order = head + tail[::-1]
    sub = {e: w for e, w in weights.items() if e[0] in out_w and e[1] in out_w}
    lagged, total = backward_edges(order, sub)
    return FASResult(order, lagged, total)


# ---------------------------------------------------------------------------
# Sweep ordering

@dataclass
class SweepOrdering:
    order: np.ndarray          # element ids in sweep order
    position: np.ndarray       # position[e] = index of e in order
    lagged: list               # edges (u, v) whose upwind data is lagged
    lagged_weight: float
    sccs: list                 # components in sweep (topological) order

    @property
    def n_lagged(self) -> int:
        return len(self.lagged)


def is_acyclic(n: int, edges) -> bool:
    """Kahn's algorithm."""
    indeg = [0] * n
    succ = [[] for _ in range(n)]
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    ready = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while ready:
        u = ready.pop()
        seen += 1
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    return seen == n


def sweep_ordering(g: DependencyGraph, exact_threshold: int = 10) -> SweepOrdering:
    """Element order for a lagged sweep: components in topological order,
    each internally ordered by a (near-)minimum feedback arc set."""
    if exact_threshold > MAX_EXACT:
        raise ValueError(f"exact_threshold may not exceed {MAX_EXACT}")
    sccs = tarjan_scc(g)[::-1]
    order = []
    for comp in sccs:
        if len(comp) == 1:
            order.extend(comp)
            continue
        sub = g.subgraph_weights(comp)
        if len(comp) <= exact_threshold:
            res = min_fas_exact(comp, sub, threshold=exact_threshold)
        else:
            res = min_fas_heuristic(comp, sub)
        order.extend(res.order)
    order = np.array(order, dtype=np.int64)
    position = np.empty(g.n_vertices, dtype=np.int64)
    position[order] = np.arange(g.n_vertices)
    lagged, total = backward_edges(order.tolist(), g.weights)
    retained = [e for e in g.weights if position[e[0]] < position[e[1]]]
    if not is_acyclic(g.n_vertices, retained):
        raise AssertionError("retained sweep edges contain a cycle")
    return SweepOrdering(order, position, lagged, total, sccs)


def summarize(g: DependencyGraph, ordering: SweepOrdering) -> dict:
    """Cycle statistics: SCC size histogram, simple (size 2) and large
    (size > 2) component counts, large sizes, lagged edges and weight."""
    sizes = [len(c) for c in ordering.sccs if len(c) > 1]
    return {
        "scc_histogram": dict(sorted(Counter(sizes).items())),
        "simple_cycles": sum(1 for s in sizes if s == 2),
        "large_sccs": sum(1 for s in sizes if s > 2),
        "large_sizes": sorted(s for s in sizes if s > 2),
        "edges": g.n_edges,
        "edges_lagged": ordering.n_lagged,
        "lagged_weight": ordering.lagged_weight,
    }


def mutual_pairs(g: DependencyGraph) -> list:
    """Element pairs that are each upwind of the other."""
    return sorted((u, v) for (u, v) in g.weights if u < v and (v, u) in g.weights)


def to_dot(g: DependencyGraph, ordering: SweepOrdering | None = None, name: str = "sweep") -> str:
    """Graphviz DOT text; lagged edges are dashed."""
    lagged = set(ordering.lagged) if ordering else set()
    lines = [f"digraph {name} {{"]
    for v in range(g.n_vertices):
        lines.append(f"  {v};")
    for (u, v) in g.edges:
        style = ' style="dashed"' if (u, v) in lagged else ""
        lines.append(f'  {u} -> {v} [label="{g.weights[(u, v)]:.3g}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


__all__ = ["DependencyGraph", "SweepOrdering", "FASResult", "build_graph", "tarjan_scc",
           "min_fas_exact", "min_fas_heuristic", "sweep_ordering", "summarize", "to_dot",
           "is_acyclic", "mutual_pairs", "backward_edges", "WeightingError",
           "normalize_weighting"]
