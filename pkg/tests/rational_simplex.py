"""Exact-arithmetic reference LP solver for tests.

Dense tableau simplex over Fractions with Bland's rule: slow, tiny, and
immune to floating-point trouble, so it can arbitrate what the production
solver should have returned. Supports max c^T x, rows in {"=", "<="},
x >= 0 plus optional upper bounds (added as rows).
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def _to_frac_matrix(rows):
    return [[Fraction(v).limit_denominator(10**12) if not isinstance(v, Fraction)
             else v for v in row] for row in rows]


def solve_exact(c, A, senses, b, upper_bounds=None):
    """Returns (status, objective, x) with Fractions; status in
    {"optimal", "infeasible", "unbounded"}."""
    n = len(c)
    rows = [list(map(Fraction, row)) for row in A]
    senses = list(senses)
    b = list(map(Fraction, b))
    if upper_bounds is not None:
        for j, u in enumerate(upper_bounds):
            if u is not None and u != float("inf") and not (
                isinstance(u, float) and np.isinf(u)
            ):
                row = [Fraction(0)] * n
                row[j] = Fraction(1)
                rows.append(row)
                senses.append("<=")
                b.append(Fraction(u))
    c = list(map(Fraction, c))
    m = len(rows)

    # normalize rhs >= 0
    for i in range(m):
        if b[i] < 0:
            rows[i] = [-v for v in rows[i]]
            b[i] = -b[i]
            if senses[i] == "<=":
                senses[i] = ">="

    # columns: structural, slack (le) / surplus (ge), artificial
    slack_of = {}
    col = n
    for i in range(m):
        if senses[i] in ("<=", ">="):
            slack_of[i] = col
            col += 1
    art_of = {}
    for i in range(m):
        if senses[i] in ("=", ">="):
            art_of[i] = col
            col += 1
    total = col

    T = [[Fraction(0)] * total for _ in range(m)]
    for i in range(m):
        for j in range(n):
            T[i][j] = rows[i][j]
        if i in slack_of:
            T[i][slack_of[i]] = Fraction(1) if senses[i] == "<=" else Fraction(-1)
        if i in art_of:
            T[i][art_of[i]] = Fraction(1)
    basis = [art_of.get(i, slack_of.get(i)) for i in range(m)]
    x_b = list(b)
    artificial = set(art_of.values())

    def pivot(r, s):
        piv = T[r][s]
        T[r] = [v / piv for v in T[r]]
        x_b[r] /= piv
        for i in range(m):
            if i != r and T[i][s] != 0:
                f = T[i][s]
                T[i] = [a - f * p for a, p in zip(T[i], T[r])]
                x_b[i] -= f * x_b[r]
        basis[r] = s

    def run(cost, banned):
        while True:
            duals = [cost[basis[i]] for i in range(m)]
            entering = None
            for j in range(total):
                if j in banned or j in basis:
                    continue
                red = cost[j] - sum(duals[i] * T[i][j] for i in range(m))
                if red > 0:
                    entering = j
                    break
            if entering is None:
                return "optimal"
            ratio, leave = None, None
            for i in range(m):
                if T[i][entering] > 0:
                    r = x_b[i] / T[i][entering]
                    if ratio is None or r < ratio or (
                        r == ratio and basis[i] < basis[leave]
                    ):
                        ratio, leave = r, i
            if leave is None:
                return "unbounded"
            pivot(leave, entering)

    if artificial:
        cost1 = [Fraction(0)] * total
        for a in artificial:
            cost1[a] = Fraction(-1)
        run(cost1, set())
        if sum(x_b[i] for i in range(m) if basis[i] in artificial) > 0:
            return "infeasible", None, None
        for i in range(m):
            if basis[i] in artificial:
                for j in range(total):
                    if j not in artificial and T[i][j] != 0:
                        pivot(i, j)
                        break

    cost2 = [Fraction(0)] * total
    for j in range(n):
        cost2[j] = c[j]
    status = run(cost2, artificial)
    if status == "unbounded":
        return "unbounded", None, None
    x = [Fraction(0)] * n
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = x_b[i]
    obj = sum(c[j] * x[j] for j in range(n))
    return "optimal", obj, x
