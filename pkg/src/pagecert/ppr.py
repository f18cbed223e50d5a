"""Sparse linear-system kernels: PageRank vectors, mean rewards, diffused margins.

All three operations reduce to solving (I - a*M) x = rhs where M is the
row-stochastic transition matrix P = D^-1 A or its transpose. The spectral
radius of a*M is at most a < 1, so a stationary fixed-point iteration
converges geometrically; for small graphs a dense LU solve is used instead.

Orientation: the PageRank vector is computed with the transpose,
pi(z) = (1-a) (I - a*P^T)^-1 z, which is the orientation under which the
reward identity r^T pi(z) = (1-a) z^T x holds exactly for the mean-reward
vector x solving (I - a*P) x = r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import DirectedGraph

DENSE_LIMIT = 512
RESIDUAL_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Iterative solve failed to reach the residual tolerance."""


class KernelInputError(ValueError):
    """Invalid graph, damping factor, or right-hand side."""


@dataclass(frozen=True, eq=False)
class PageRankVector:
    values: np.ndarray
    alpha: float
    teleport: np.ndarray


@dataclass(frozen=True, eq=False)
class ValueVector:
    values: np.ndarray


def transition_matrix(G: DirectedGraph) -> sp.csr_matrix:
    """Row-stochastic P = D^-1 A; errors on zero out-degree nodes."""
    if np.any(G.out_degree == 0):
        bad = int(np.nonzero(G.out_degree == 0)[0][0])
        raise KernelInputError(f"node {bad} has no outgoing edge")
    e = G.edges
    w = 1.0 / G.out_degree[e[:, 0]]
    return sp.csr_matrix(
        (w, (e[:, 0], e[:, 1])), shape=(G.node_count, G.node_count)
    )


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise KernelInputError(f"alpha must be in (0, 1), got {alpha}")
    return float(alpha)


def _iteration_cap(alpha: float) -> int:
    return max(50, 10 * math.ceil(math.log(RESIDUAL_TOL) / math.log(alpha)))


def solve_transport(
    G: DirectedGraph,
    alpha: float,
    rhs: np.ndarray,
    transpose: bool = False,
    method: str = "auto",
) -> np.ndarray:
    """Solve (I - alpha * P[^T]) x = rhs for one or many right-hand sides.

    rhs may be (n,) or (n, k). method is "auto" (dense below DENSE_LIMIT
    nodes, iterative above), "dense", or "iterative".
    """
    alpha = _check_alpha(alpha)
    rhs = np.asarray(rhs, dtype=np.float64)
    squeeze = rhs.ndim == 1
    b = rhs.reshape(G.node_count, -1)
    if method == "auto":
        method = "dense" if G.node_count <= DENSE_LIMIT else "iterative"
    if method == "dense":
        P = transition_matrix(G).toarray()
        if transpose:
            P = P.T
        M = np.eye(G.node_count) - alpha * P
        x = np.linalg.solve(M, b)
        res = _relative_residual(M @ x - b, b)
        if res > RESIDUAL_TOL * 1e3:
            raise ConvergenceError(f"dense solve residual {res:.3e}")
    elif method == "iterative":
        P = transition_matrix(G)
        if transpose:
            P = P.T.tocsr()
        x = b.copy()
        cap = _iteration_cap(alpha)
        scale = np.maximum(np.linalg.norm(b, axis=0), 1e-300)
        converged = False
        for _ in range(cap):
            x_next = b + alpha * (P @ x)
            # residual of x_next is bounded by alpha * ||x_next - x||
            delta = np.linalg.norm(x_next - x, axis=0)
            x = x_next
            if np.all(alpha * delta <= RESIDUAL_TOL * scale):
                converged = True
                break
        if not converged:
            P2 = transition_matrix(G)
            if transpose:
                P2 = P2.T.tocsr()
            res = _relative_residual(x - alpha * (P2 @ x) - b, b)
            raise ConvergenceError(
                f"stationary iteration hit the {cap}-iteration cap with "
                f"relative residual {res:.3e}"
            )
    else:
        raise KernelInputError(f"unknown solve method {method!r}")
    return x[:, 0] if squeeze else x


def _relative_residual(res: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(res, axis=0)
    den = np.maximum(np.linalg.norm(b, axis=0), 1e-300)
    return float(np.max(num / den))


def ppr_vector(
    G: DirectedGraph, alpha: float, z: np.ndarray, method: str = "auto"
) -> PageRankVector:
    """Topic-sensitive PageRank for teleport distribution z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (G.node_count,):
        raise KernelInputError("teleport vector has wrong length")
    if z.min() < -1e-12 or abs(z.sum() - 1.0) > 1e-8:
        raise KernelInputError("teleport vector must be a probability distribution")
    x = solve_transport(G, alpha, z, transpose=True, method=method)
    pi = (1.0 - alpha) * x
    if pi.min() < -1e-12:
        raise ConvergenceError(f"negative PageRank entry {pi.min():.3e}")
    pi = np.maximum(pi, 0.0)
    if abs(pi.sum() - 1.0) > 1e-8:
        raise ConvergenceError(f"PageRank mass {pi.sum():.12f} != 1")
    return PageRankVector(values=pi, alpha=float(alpha), teleport=z.copy())


def mean_reward(
    G: DirectedGraph, alpha: float, r: np.ndarray, method: str = "auto"
) -> ValueVector:
    """Mean reward before teleportation: solves (I - alpha*D^-1*A) x = r."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (G.node_count,):
        raise KernelInputError("reward vector has wrong length")
    if not np.all(np.isfinite(r)):
        raise KernelInputError("reward vector must be finite")
    x = solve_transport(G, alpha, r, transpose=False, method=method)
    return ValueVector(values=x)


def diffused_margins(
    G: DirectedGraph, alpha: float, h: np.ndarray, method: str = "auto"
) -> np.ndarray:
    """pi(e_t)^T h for every target t at once, as (1-alpha) * mean reward.

    h may be a single length-N vector or an (N, k) stack of columns; the
    result has the same shape.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != G.node_count:
        raise KernelInputError("logit vector has wrong length")
    if not np.all(np.isfinite(h)):
        raise KernelInputError("logit values must be finite")
    return (1.0 - alpha) * solve_transport(G, alpha, h, transpose=False, method=method)


def ppr_rows(
    G: DirectedGraph, alpha: float, targets, method: str = "auto"
) -> np.ndarray:
    """Personalized PageRank vectors pi(e_t) for a batch of targets.

    Returns an array of shape (len(targets), N); row i is pi(e_targets[i]).
    """
    targets = np.asarray(targets, dtype=np.int64).ravel()
    Z = np.zeros((G.node_count, targets.size))
    Z[targets, np.arange(targets.size)] = 1.0
    X = solve_transport(G, alpha, Z, transpose=True, method=method)
    pi = (1.0 - alpha) * X.T
    return np.maximum(pi, 0.0)


def diffuse_transpose(
    G: DirectedGraph, alpha: float, s: np.ndarray, method: str = "auto"
) -> np.ndarray:
    """(1-alpha) (I - alpha*P^T)^-1 s for an arbitrary vector or matrix s.

    This is the adjoint of margin diffusion, used to backpropagate
    through diffused logits.
    """
    s = np.asarray(s, dtype=np.float64)
    return (1.0 - alpha) * solve_transport(G, alpha, s, transpose=True, method=method)
