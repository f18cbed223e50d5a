"""Exact PageRank optimization under local budgets, and the certificates it yields.

Each admissible configuration of fragile edges is a policy; one iteration
solves the mean-reward system on the current perturbed graph, scores every
fragile edge by the value gained from flipping it, and keeps the best
strictly improving flips per node within budget. The fixed point maximizes
r^T pi(z) simultaneously for every teleport z, so one run per ordered class
pair certifies all nodes at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import models, ppr
from ._parallel import map_parallel
from .graph import DirectedGraph, EdgePolicy, PerturbationScenario

IMPROVE_TOL = 1e-12
ITERATION_CAP = 100
MARGIN_EPS = 1e-7


class IterationCapError(RuntimeError):
    """Policy iteration failed to stabilize; carries the value trace."""

    def __init__(self, message: str, trace: list[np.ndarray]):
        super().__init__(message)
        self.trace = trace


@dataclass(eq=False)
class PolicyIterationResult:
    policy: EdgePolicy
    value: np.ndarray                      # final mean-reward vector x
    objective_per_z: Callable[[np.ndarray], float]
    iterations: int
    trace: list[np.ndarray]
    graph: DirectedGraph                   # the optimal perturbed graph


@dataclass(eq=False)
class LocalCertificate:
    node: int
    label: int                   # class the margin is defended for
    worst_class: int
    worst_margin: float
    status: str                  # "robust" | "nonrobust"
    witness: EdgePolicy
    marginal: bool               # |margin| within numerical noise of zero


def _flipped_graph(S: PerturbationScenario, flipped: np.ndarray) -> DirectedGraph:
    present = S.fragile_in_base ^ flipped
    edges = np.concatenate([S.fixed_edges, S.fragile_edges[present]])
    return DirectedGraph.from_edges(S.node_count, edges, allow_self_loops=True)


def optimize_local(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    r: np.ndarray,
    init: EdgePolicy | None = None,
    method: str = "auto",
) -> PolicyIterationResult:
    """Maximize r^T pi(z) over local-budget-admissible perturbed graphs.

    The global budget of S is ignored here. The returned configuration is
    optimal for every teleport z at once; objective_per_z evaluates it.
    """
    r = np.asarray(r, dtype=np.float64)
    m = S.fragile_count
    src = S.fragile_edges[:, 0]
    dst = S.fragile_edges[:, 1]
    sign = np.where(S.fragile_in_base, -1.0, 1.0)
    budget = S.local_budget

    flipped = np.zeros(m, dtype=bool)
    if init is not None and len(init):
        flipped[S.fragile_index_of(init.flips)] = True

    # Per-source blocks over the canonical (src-sorted) fragile order.
    block_nodes, block_starts = (np.unique(src, return_index=True)
                                 if m else (np.empty(0, np.int64), np.empty(0, np.int64)))
    block_ends = np.append(block_starts[1:], m)

    trace: list[np.ndarray] = []
    alpha = float(alpha)
    for k in range(1, ITERATION_CAP + 1):
        graph_k = _flipped_graph(S, flipped)
        x = ppr.mean_reward(graph_k, alpha, r, method=method).values
        trace.append(x)
        if m == 0:
            return _finish(S, flipped, x, k, trace, alpha, graph_k)
        l = sign * (x[dst] - (x[src] - r[src]) / alpha)

        new_flipped = np.zeros(m, dtype=bool)
        # sort within each source block by score desc, keeping currently
        # selected edges first on exact ties, then by target id
        curr_rank = np.where(flipped, 0, 1)
        order = np.lexsort((dst, curr_rank, -l, src))
        l_sorted = l[order]
        for v, s0, s1 in zip(block_nodes, block_starts, block_ends):
            b = int(budget[v])
            if b == 0:
                continue
            blk = order[s0:s1]
            eligible = int(np.searchsorted(-l_sorted[s0:s1], -IMPROVE_TOL))
            take = min(b, eligible)
            if take:
                new_flipped[blk[:take]] = True

        if np.array_equal(new_flipped, flipped):
            return _finish(S, flipped, x, k, trace, alpha, graph_k)
        flipped = new_flipped
    raise IterationCapError(
        f"policy iteration exceeded {ITERATION_CAP} iterations (tie cycling?)",
        trace,
    )


def _finish(S, flipped, x, iterations, trace, alpha, graph) -> PolicyIterationResult:
    policy = EdgePolicy.from_pairs(S.fragile_edges[flipped])
    x_final = x.copy()

    def objective(z: np.ndarray) -> float:
        z = np.asarray(z, dtype=np.float64)
        return float((1.0 - alpha) * (z @ x_final))

    return PolicyIterationResult(
        policy=policy,
        value=x_final,
        objective_per_z=objective,
        iterations=iterations,
        trace=trace,
        graph=graph,
    )


def class_pairs(class_count: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(class_count) for b in range(class_count) if a != b]


def pair_worst_margins(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    H: np.ndarray,
    method: str = "auto",
) -> dict[tuple[int, int], tuple[np.ndarray, PolicyIterationResult]]:
    """Run one local optimization per ordered class pair (c1, c2).

    Returns, per pair, the vector of worst-case margins
    min over admissible graphs of pi(e_t)^T (H[:, c1] - H[:, c2]) for every
    node t, together with the optimization result that attains it.
    """
    H = models.check_logits(H)
    K = H.shape[1]

    def run(pair):
        c1, c2 = pair
        h = H[:, c1] - H[:, c2]
        res = optimize_local(G, S, alpha, -h, method=method)
        margins = ppr.diffused_margins(res.graph, alpha, h, method=method)
        return pair, (margins, res)

    return dict(map_parallel(run, class_pairs(K)))


def certify_local_all(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    H: np.ndarray,
    y: np.ndarray | None = None,
    method: str = "auto",
) -> list[LocalCertificate]:
    """Exact worst-case-margin certificates for every node under local budgets.

    y gives the class to defend per node (ground truth or predictions); when
    omitted, clean-graph predictions are used. A negative worst margin is a
    non-robustness certificate and the stored witness reproduces it.
    """
    H = models.check_logits(H)
    K = H.shape[1]
    if y is None:
        y = models.predict(G, alpha, H, method=method)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (G.node_count,):
        raise ValueError("need one class per node")
    if y.min() < 0 or y.max() >= K:
        raise ValueError("class id out of range")

    pairs = pair_worst_margins(G, S, alpha, H, method=method)
    certs = []
    for t in range(G.node_count):
        yt = int(y[t])
        worst_margin = np.inf
        worst_class = yt
        witness = EdgePolicy.empty()
        for c in range(K):
            if c == yt:
                continue
            margins, res = pairs[(yt, c)]
            val = float(margins[t])
            if val < worst_margin:
                worst_margin = val
                worst_class = c
                witness = res.policy
        robust = worst_margin > MARGIN_EPS
        certs.append(
            LocalCertificate(
                node=t,
                label=yt,
                worst_class=worst_class,
                worst_margin=worst_margin,
                status="robust" if robust else "nonrobust",
                witness=witness,
                marginal=(-MARGIN_EPS < worst_margin <= MARGIN_EPS),
            )
        )
    return certs
