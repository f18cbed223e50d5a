"""Lower-bound certificates under joint local and global budgets.

Pipeline: (a) an auxiliary decision process with one on/off state per
fragile edge turns the exponential per-node action sets into binary ones;
(b) its occupation-measure LP is extended with linear local-budget rows;
(c) the quadratic global-budget coupling is linearized into one row using
per-variable upper bounds. The LP optimum upper-bounds the adversary's
objective, so the negated value is a sound lower bound on the worst-case
margin. Rounding the LP edge variables yields a candidate attack that is
verified by exact re-evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import lp_solver, models, policy_iter, ppr
from ._parallel import map_parallel
from .graph import DirectedGraph, EdgePolicy, PerturbationScenario, apply_policy
from .policy_iter import MARGIN_EPS

logger = logging.getLogger(__name__)

ACTIVITY_TOL = 1e-9


class BoundError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AuxiliaryMdp:
    """Total-reward decision process on original plus per-fragile-edge states.

    Original state i has one action: probability alpha/d_i to each fixed
    successor and 1/d_i to each of its fragile-edge states, reward r_i,
    with d_i = |fixed out-edges| + |fragile out-edges| (state-independent).
    Fragile-edge state (i, j) has actions off (back to i w.p. 1, reward
    -r_i) and on (to j w.p. alpha, reward 0). Rows may be substochastic.
    """

    node_count: int
    alpha: float
    rewards: np.ndarray          # r_i for original nodes
    fixed_edges: np.ndarray
    fragile_edges: np.ndarray
    degrees: np.ndarray          # d_i per original node

    @property
    def state_count(self) -> int:
        return self.node_count + self.fragile_edges.shape[0]

    def policy_value(self, on_mask: np.ndarray) -> np.ndarray:
        """Value vector of a deterministic on/off policy over all states.

        Solves (I - T) val = rew on the auxiliary state space directly;
        used to validate the construction against independent estimates.
        """
        n = self.node_count
        m = self.fragile_edges.shape[0]
        on_mask = np.asarray(on_mask, dtype=bool)
        size = n + m
        rows, cols, data = [], [], []
        rew = np.zeros(size)
        rew[:n] = self.rewards
        for s, d in self.fixed_edges:
            rows.append(int(s))
            cols.append(int(d))
            data.append(self.alpha / self.degrees[s])
        for e, (s, d) in enumerate(self.fragile_edges):
            rows.append(int(s))
            cols.append(n + e)
            data.append(1.0 / self.degrees[s])
            if on_mask[e]:
                rows.append(n + e)
                cols.append(int(d))
                data.append(self.alpha)
            else:
                rows.append(n + e)
                cols.append(int(s))
                data.append(1.0)
                rew[n + e] = -self.rewards[s]
        T = sp.csr_matrix((data, (rows, cols)), shape=(size, size)).toarray()
        return np.linalg.solve(np.eye(size) - T, rew)


def build_aux_mdp(
    G: DirectedGraph, S: PerturbationScenario, alpha: float, r: np.ndarray
) -> AuxiliaryMdp:
    """Auxiliary decision process whose unconstrained optimum solves the
    PageRank-reward optimization on the original graph."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (S.node_count,):
        raise BoundError("reward vector has wrong length")
    fixed_out = (np.bincount(S.fixed_edges[:, 0], minlength=S.node_count)
                 if S.fixed_edges.size else np.zeros(S.node_count, np.int64))
    degrees = fixed_out + S.fragile_out_counts()
    return AuxiliaryMdp(
        node_count=S.node_count,
        alpha=float(alpha),
        rewards=r,
        fixed_edges=S.fixed_edges,
        fragile_edges=S.fragile_edges,
        degrees=degrees.astype(np.int64),
    )


def bound_slack(S: PerturbationScenario) -> np.ndarray:
    """(1 - |F^v|/d_v)^-1 per node; the worst-case inflation of the LP
    occupation variable over the PageRank score."""
    fixed_out = (np.bincount(S.fixed_edges[:, 0], minlength=S.node_count)
                 if S.fixed_edges.size else np.zeros(S.node_count, np.int64))
    frag_out = S.fragile_out_counts()
    d = fixed_out + frag_out
    if np.any(fixed_out == 0):
        bad = int(np.nonzero(fixed_out == 0)[0][0])
        raise BoundError(
            f"node {bad} has d_v = |F^v| (no fixed out-edge); add a fixed "
            "edge or shrink its fragile set to make the bound finite"
        )
    return 1.0 / (1.0 - frag_out / d)


def policy_opt_graph_cache(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    method: str = "auto",
) -> tuple[list[DirectedGraph], np.ndarray]:
    """For each node v, the local-budget-optimal graph maximizing pi(z)_v.

    The optimal graph is teleport-independent, so the expensive part is
    done once and shared across certification targets. Returns the list of
    distinct graphs and the per-node index into it.
    """
    n = S.node_count

    def run(v):
        e_v = np.zeros(n)
        e_v[v] = 1.0
        res = policy_iter.optimize_local(G, S, alpha, e_v, method=method)
        return tuple(map(tuple, res.policy.flips.tolist())), res.graph

    results = map_parallel(run, range(n))
    graphs: list[DirectedGraph] = []
    keys: dict[tuple, int] = {}
    node_graph = np.zeros(n, dtype=np.int64)
    for v, (key, graph) in enumerate(results):
        if key not in keys:
            keys[key] = len(graphs)
            graphs.append(graph)
        node_graph[v] = keys[key]
    return graphs, node_graph


def compute_upper_bounds(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    method: str = "closed_form",
    z: np.ndarray | None = None,
    graph_cache: tuple[list[DirectedGraph], np.ndarray] | None = None,
    solve_method: str = "auto",
) -> np.ndarray:
    """Per-node upper bounds on the LP occupation variables.

    closed_form bounds PageRank by 1; policy_opt replaces it with the exact
    maximum of pi(z)_v over local-budget-admissible graphs (needs the
    certification teleport z). Both are then inflated by the worst-case
    off-edge slack, which dominates every feasible variable value.
    """
    slack = bound_slack(S)
    if method == "closed_form":
        return slack
    if method != "policy_opt":
        raise BoundError(f"unknown bound method {method!r}")
    if z is None:
        raise BoundError("policy_opt bounds need the certification teleport z")
    if graph_cache is None:
        graph_cache = policy_opt_graph_cache(G, S, alpha, method=solve_method)
    graphs, node_graph = graph_cache
    pi_max = np.zeros(S.node_count)
    for g_idx, graph in enumerate(graphs):
        nodes = np.nonzero(node_graph == g_idx)[0]
        if nodes.size == 0:
            continue
        pi = ppr.ppr_vector(graph, alpha, z, method=solve_method).values
        pi_max[nodes] = pi[nodes]
    return pi_max * slack


@dataclass(eq=False)
class RelaxedLpInstance:
    """Assembled linear relaxation for one (reward, teleport) pair.

    Variables: x_v per node, then (x0, x1) per fragile edge in canonical
    order. Rows: one flow row per node, one coupling row per fragile edge,
    one local-budget row per node, one global row.
    """

    lp: lp_solver.LinearProgram
    scenario: PerturbationScenario
    alpha: float
    z: np.ndarray
    xbar: np.ndarray
    degrees: np.ndarray

    def x_index(self, v: int) -> int:
        return v

    def x0_index(self, e: int) -> int:
        return self.scenario.node_count + 2 * e

    def x1_index(self, e: int) -> int:
        return self.scenario.node_count + 2 * e + 1


def assemble_relaxed_lp(
    mdp: AuxiliaryMdp,
    S: PerturbationScenario,
    z: np.ndarray,
    xbar: np.ndarray,
) -> RelaxedLpInstance:
    """Build the relaxed budget-constrained LP for the auxiliary process."""
    n = S.node_count
    m = S.fragile_count
    alpha = mdp.alpha
    d = mdp.degrees.astype(np.float64)
    z = np.asarray(z, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if np.any(~np.isfinite(xbar)) or np.any(xbar <= 0):
        raise BoundError("upper bounds must be positive and finite")

    def x0(e):
        return n + 2 * e

    def x1(e):
        return n + 2 * e + 1

    nvars = n + 2 * m
    c = np.zeros(nvars)
    c[:n] = mdp.rewards
    for e, (i, _) in enumerate(S.fragile_edges):
        c[x0(e)] = -mdp.rewards[i]

    rows, cols, data = [], [], []
    senses, rhs, row_names = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        data.append(v)

    # flow conservation per node: x_v - incoming fixed - incoming "on"
    # - returning "off" = (1 - alpha) z_v
    for v in range(n):
        add(v, v, 1.0)
        senses.append("=")
        rhs.append((1.0 - alpha) * z[v])
        row_names.append(f"flow_{v}")
    for i, j in S.fixed_edges:
        add(int(j), int(i), -alpha / d[i])
    for e, (i, j) in enumerate(S.fragile_edges):
        add(int(j), x1(e), -alpha)     # incoming "on" edges
        add(int(i), x0(e), -1.0)       # returning "off" edges

    # coupling per fragile edge: x0 + x1 = x_i / d_i
    base = n
    for e, (i, _) in enumerate(S.fragile_edges):
        add(base + e, x0(e), 1.0)
        add(base + e, x1(e), 1.0)
        add(base + e, int(i), -1.0 / d[i])
        senses.append("=")
        rhs.append(0.0)
        row_names.append(f"aux_{S.fragile_edges[e, 0]}_{S.fragile_edges[e, 1]}")

    # local budget per node: sum of perturbing shares <= (b_v / d_v) x_v
    base = n + m
    for v in range(n):
        senses.append("<=")
        rhs.append(0.0)
        row_names.append(f"local_{v}")
        add(base + v, v, -float(S.local_budget[v]) / d[v])
    for e, (i, _) in enumerate(S.fragile_edges):
        pert = x0(e) if S.fragile_in_base[e] else x1(e)
        add(base + int(i), pert, 1.0)

    # single linearized global row: perturbing shares scaled by d_i / xbar_i
    grow = n + m + n
    senses.append("<=")
    rhs.append(float(S.global_budget))
    row_names.append("global")
    for e, (i, _) in enumerate(S.fragile_edges):
        pert = x0(e) if S.fragile_in_base[e] else x1(e)
        add(grow, pert, d[i] / xbar[i])

    names = [f"x_{v}" for v in range(n)]
    for i, j in S.fragile_edges:
        names.append(f"x0_{i}_{j}")
        names.append(f"x1_{i}_{j}")
    ub = np.full(nvars, np.inf)
    ub[:n] = xbar

    A = sp.csr_matrix((data, (rows, cols)), shape=(len(rhs), nvars))
    lp = lp_solver.LinearProgram.build(
        c, A, senses, rhs, upper_bounds=ub, names=names, row_names=row_names
    )
    return RelaxedLpInstance(
        lp=lp, scenario=S, alpha=alpha, z=z.copy(), xbar=xbar.copy(),
        degrees=mdp.degrees.copy(),
    )


def recover_pagerank(
    solution: lp_solver.LpSolution, instance: RelaxedLpInstance
) -> tuple[ppr.PageRankVector, EdgePolicy, bool]:
    """Recover PageRank scores, the configured policy, and integrality.

    pi_v = (1 - k_v / d_v) x_v with k_v the count of active "off" edges at
    v. The solution is integral when no edge has both activity variables
    above tolerance; only then does the recovered vector match an actual
    graph's PageRank.
    """
    S = instance.scenario
    x = solution.x
    n = S.node_count
    k = np.zeros(n)
    integral = True
    flips = []
    for e in range(S.fragile_count):
        i = int(S.fragile_edges[e, 0])
        x0 = x[instance.x0_index(e)]
        x1 = x[instance.x1_index(e)]
        if x0 > ACTIVITY_TOL:
            k[i] += 1
            if x1 > ACTIVITY_TOL:
                integral = False
        turned_off = x0 > ACTIVITY_TOL
        turned_on = x1 > ACTIVITY_TOL
        if S.fragile_in_base[e] and turned_off:
            flips.append(S.fragile_edges[e])
        elif not S.fragile_in_base[e] and turned_on:
            flips.append(S.fragile_edges[e])
    pi = (1.0 - k / instance.degrees) * x[:n]
    vec = ppr.PageRankVector(values=np.maximum(pi, 0.0), alpha=instance.alpha,
                             teleport=instance.z.copy())
    policy = EdgePolicy.from_pairs(np.asarray(flips, dtype=np.int64).reshape(-1, 2))
    return vec, policy, integral


@dataclass(eq=False)
class GlobalCertificate:
    node: int
    label: int
    worst_class: int
    lower_bound_margin: float
    status: str                  # "robust" | "unknown" | "nonrobust-witnessed"
    rounded_attack: EdgePolicy
    attack_verified: bool
    attacked_margin: float | None


def _rounded_attack(
    solution: lp_solver.LpSolution, instance: RelaxedLpInstance
) -> EdgePolicy:
    """Round edge activities to a budget-feasible candidate attack.

    Edge on iff x1 >= x0; flips violating a budget are dropped smallest
    |x1 - x0| first, locally then globally.
    """
    S = instance.scenario
    x = solution.x
    flips = []
    for e in range(S.fragile_count):
        x0 = x[instance.x0_index(e)]
        x1 = x[instance.x1_index(e)]
        on = x1 >= x0
        if on != bool(S.fragile_in_base[e]):
            flips.append((e, abs(x1 - x0)))
    by_node: dict[int, list[tuple[int, float]]] = {}
    for e, wgt in flips:
        by_node.setdefault(int(S.fragile_edges[e, 0]), []).append((e, wgt))
    kept: list[tuple[int, float]] = []
    for v, items in sorted(by_node.items()):
        items.sort(key=lambda t: (-t[1], t[0]))
        kept.extend(items[: int(S.local_budget[v])])
    kept.sort(key=lambda t: (-t[1], t[0]))
    kept = kept[: S.global_budget]
    idx = sorted(e for e, _ in kept)
    return EdgePolicy.from_pairs(S.fragile_edges[idx])


def certify_global(
    G: DirectedGraph,
    S: PerturbationScenario,
    alpha: float,
    H: np.ndarray,
    targets,
    y: np.ndarray | None = None,
    bound_method: str = "closed_form",
    solve_method: str = "auto",
    tols: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES,
) -> list[GlobalCertificate]:
    """Margin lower bounds for the targets under local plus global budgets.

    Per target t and class c != y_t, one relaxed LP is solved with teleport
    e_t and reward -(H[:, y_t] - H[:, c]); its objective L upper-bounds the
    adversary, so min_c(-L) lower-bounds the worst-case margin. A positive
    bound certifies robustness; otherwise the rounded LP attack is replayed
    exactly and, if the margin goes negative, reported as a witnessed
    non-robustness.
    """
    H = models.check_logits(H)
    K = H.shape[1]
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if targets.size == 0:
        raise BoundError("need at least one certification target")
    if y is None:
        y = models.predict(G, alpha, H, method=solve_method)
    y = np.asarray(y, dtype=np.int64)

    mdps = {}
    for c1 in range(K):
        for c2 in range(K):
            if c1 != c2:
                r = -(H[:, c1] - H[:, c2])
                mdps[(c1, c2)] = build_aux_mdp(G, S, alpha, r)

    cache = None
    if bound_method == "policy_opt":
        cache = policy_opt_graph_cache(G, S, alpha, method=solve_method)

    def run(t):
        t = int(t)
        yt = int(y[t])
        z = np.zeros(G.node_count)
        z[t] = 1.0
        xbar = compute_upper_bounds(
            G, S, alpha, method=bound_method, z=z, graph_cache=cache,
            solve_method=solve_method,
        )
        best_bound = np.inf
        best_class = yt
        best_solution = None
        best_instance = None
        for c in range(K):
            if c == yt:
                continue
            inst = assemble_relaxed_lp(mdps[(yt, c)], S, z, xbar)
            sol = lp_solver.solve_lp(inst.lp, tols)
            if sol.status != "optimal":
                raise lp_solver.NumericalBreakdownError(
                    f"relaxed LP for target {t}, class {c} came back "
                    f"{sol.status}; the clean policy is always feasible and "
                    "the bounds preclude unboundedness, so this is a bug"
                )
            bound = -sol.objective
            if bound < best_bound:
                best_bound = bound
                best_class = c
                best_solution = sol
                best_instance = inst
        attack = _rounded_attack(best_solution, best_instance)
        attacked_margin = None
        verified = False
        status = "robust" if best_bound > MARGIN_EPS else "unknown"
        if status != "robust":
            attacked = apply_policy(G, S, attack)
            pi = ppr.ppr_rows(attacked, alpha, [t], method=solve_method)[0]
            diffs = pi @ H
            margins = diffs[yt] - diffs
            margins[yt] = np.inf
            attacked_margin = float(margins.min())
            if attacked_margin < -MARGIN_EPS:
                status = "nonrobust-witnessed"
                verified = True
        return GlobalCertificate(
            node=t,
            label=yt,
            worst_class=best_class,
            lower_bound_margin=float(best_bound),
            status=status,
            rounded_attack=attack,
            attack_verified=verified,
            attacked_margin=attacked_margin,
        )

    return map_parallel(run, targets)
