"""Deterministic linear programming: internal simplex plus a text export path.

The internal backend is a two-phase revised simplex over sparse constraint
rows with a dense basis inverse. Pricing scales reduced costs by static
column norms; after a stall it falls back to Bland's rule, which guarantees
termination on the highly degenerate instances the certification pipeline
produces. Instances beyond a few thousand rows should be exported in
CPLEX-LP text form and solved externally, then read back with
import_solution.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg.blas import dger


@dataclass(frozen=True)
class SolverTolerances:
    feasibility: float = 1e-7     # accepted constraint violation
    optimality: float = 1e-9      # reduced-cost threshold
    pivot: float = 1e-9           # smallest usable pivot element
    stall_window: int = 50        # iterations without progress before Bland
    refactor_every: int = 100
    max_iterations: int | None = None


DEFAULT_TOLERANCES = SolverTolerances()

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class LpError(RuntimeError):
    pass


class LpFormatError(LpError):
    pass


class NumericalBreakdownError(LpError):
    pass


@dataclass(eq=False)
class LinearProgram:
    """max objective @ x subject to sparse rows with senses in {"=", "<="}
    and bounds 0 <= x <= upper_bounds (inf = absent)."""

    objective: np.ndarray
    matrix: sp.csr_matrix
    senses: np.ndarray
    rhs: np.ndarray
    upper_bounds: np.ndarray
    names: list[str]
    row_names: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, objective, rows, senses, rhs, upper_bounds=None,
              names=None, row_names=None) -> "LinearProgram":
        c = np.asarray(objective, dtype=np.float64)
        n = c.size
        A = sp.csr_matrix(rows, shape=(len(rhs), n), dtype=np.float64) if not sp.issparse(rows) \
            else rows.tocsr().astype(np.float64)
        senses = np.asarray(senses, dtype="<U2")
        b = np.asarray(rhs, dtype=np.float64)
        ub = (np.full(n, np.inf) if upper_bounds is None
              else np.asarray(upper_bounds, dtype=np.float64))
        if names is None:
            names = [f"v{j}" for j in range(n)]
        if row_names is None:
            row_names = [f"r{i}" for i in range(len(b))]
        lp = cls(c, A, senses, b, ub, list(names), list(row_names))
        lp._validate()
        return lp

    def _validate(self) -> None:
        n = self.objective.size
        m = self.rhs.size
        if self.matrix.shape != (m, n):
            raise LpFormatError("constraint matrix shape mismatch")
        if self.senses.shape != (m,) or not np.all(np.isin(self.senses, ["=", "<="])):
            raise LpFormatError("row senses must be '=' or '<='")
        if len(self.names) != n or len(self.row_names) != m:
            raise LpFormatError("name count mismatch")
        for arr in (self.objective, self.rhs, self.matrix.data):
            if arr.size and not np.all(np.isfinite(arr)):
                raise LpFormatError("coefficients must be finite")
        if np.any(np.isnan(self.upper_bounds)) or np.any(self.upper_bounds < 0):
            raise LpFormatError("upper bounds must be nonnegative or +inf")

    @property
    def n_vars(self) -> int:
        return int(self.objective.size)

    @property
    def n_rows(self) -> int:
        return int(self.rhs.size)


@dataclass(eq=False)
class LpSolution:
    status: str                  # "optimal" | "infeasible" | "unbounded"
    objective: float | None
    x: np.ndarray | None
    stats: dict

    def value_of(self, lp: LinearProgram, name: str) -> float:
        return float(self.x[lp.names.index(name)])


def max_violation(lp: LinearProgram, x: np.ndarray) -> float:
    """Largest constraint/bound violation of a candidate point."""
    ax = lp.matrix @ x
    v = 0.0
    eq = lp.senses == "="
    if eq.any():
        v = max(v, float(np.max(np.abs(ax[eq] - lp.rhs[eq]))))
    le = ~eq
    if le.any():
        v = max(v, float(np.max(ax[le] - lp.rhs[le])))
    return max(v, bound_violation(lp, x), 0.0)


def bound_violation(lp: LinearProgram, x: np.ndarray) -> float:
    """Largest variable-bound violation (held to a tighter tolerance than
    the constraint rows)."""
    v = float(np.max(-x)) if x.size else 0.0
    finite = np.isfinite(lp.upper_bounds)
    if finite.any():
        v = max(v, float(np.max(x[finite] - lp.upper_bounds[finite])))
    return max(v, 0.0)


class _Simplex:
    """Revised simplex working state for one standardized problem.

    Columns: n structural, then one slack per inequality row, then one
    artificial per row that needs it. The basis inverse is dense and
    refactorized periodically.
    """

    def __init__(self, lp: LinearProgram, tols: SolverTolerances):
        self.tols = tols
        n = lp.n_vars
        A = lp.matrix.tocoo()
        rows = [A.row]
        cols = [A.col]
        data = [A.data]
        senses = list(lp.senses)
        b = list(lp.rhs)
        # variable upper bounds become explicit rows
        for j in np.nonzero(np.isfinite(lp.upper_bounds))[0]:
            rows.append(np.array([len(b)]))
            cols.append(np.array([j]))
            data.append(np.array([1.0]))
            senses.append("<=")
            b.append(float(lp.upper_bounds[j]))
        m = len(b)
        rows = np.concatenate(rows).astype(np.int64)
        cols = np.concatenate(cols).astype(np.int64)
        data = np.concatenate(data).astype(np.float64)
        b = np.asarray(b, dtype=np.float64)
        senses = np.asarray(senses, dtype="<U2")

        # normalize rhs >= 0
        neg = b < 0
        if neg.any():
            flip = neg[rows]
            data = np.where(flip, -data, data)
            b = np.where(neg, -b, b)

        slack_col = np.full(m, -1, dtype=np.int64)
        slack_sign = np.zeros(m)
        next_col = n
        for i in range(m):
            if senses[i] == "<=":
                slack_col[i] = next_col
                slack_sign[i] = -1.0 if neg[i] else 1.0
                next_col += 1
        art_col = np.full(m, -1, dtype=np.int64)
        for i in range(m):
            if slack_col[i] < 0 or slack_sign[i] < 0:
                art_col[i] = next_col
                next_col += 1

        extra_rows, extra_cols, extra_data = [], [], []
        for i in range(m):
            if slack_col[i] >= 0:
                extra_rows.append(i)
                extra_cols.append(slack_col[i])
                extra_data.append(slack_sign[i])
            if art_col[i] >= 0:
                extra_rows.append(i)
                extra_cols.append(art_col[i])
                extra_data.append(1.0)
        rows = np.concatenate([rows, np.asarray(extra_rows, dtype=np.int64)])
        cols = np.concatenate([cols, np.asarray(extra_cols, dtype=np.int64)])
        data = np.concatenate([data, np.asarray(extra_data)])

        self.n_struct = n
        self.m = m
        self.total = next_col
        self.A = sp.csc_matrix((data, (rows, cols)), shape=(m, self.total))
        self.b = b
        self.is_artificial = np.zeros(self.total, dtype=bool)
        self.is_artificial[art_col[art_col >= 0]] = True
        self.basis = np.where(art_col >= 0, art_col, slack_col).astype(np.int64)
        self.Binv = np.asfortranarray(np.eye(m))
        self.xB = b.copy()
        self.col_norms = np.sqrt(np.asarray(self.A.multiply(self.A).sum(axis=0)).ravel())
        self.col_norms = np.maximum(self.col_norms, 1.0)
        self.pivots = 0

    def column(self, j: int) -> np.ndarray:
        return self.A[:, j].toarray().ravel()

    def refactor(self) -> None:
        B = self.A[:, self.basis].toarray()
        try:
            self.Binv = np.asfortranarray(np.linalg.inv(B))
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdownError(
                f"singular basis during refactorization (cond est "
                f"{np.linalg.cond(B):.3e})"
            ) from exc
        self.xB = self.Binv @ self.b

    def run_phase(self, c: np.ndarray, allowed: np.ndarray) -> str:
        """Maximize c over the current basis; returns "optimal" or "unbounded"."""
        tols = self.tols
        max_iter = tols.max_iterations or (2000 + 50 * (self.m + self.total))
        bland = False
        stall = 0
        last_obj = -np.inf
        it = 0
        while True:
            it += 1
            if it > max_iter:
                raise NumericalBreakdownError(
                    f"simplex exceeded {max_iter} iterations"
                )
            y = c[self.basis] @ self.Binv
            d = c - self.A.T @ y
            d[self.basis] = 0.0
            cand = (d > tols.optimality) & allowed
            if not cand.any():
                return "optimal"
            if bland:
                j = int(np.nonzero(cand)[0][0])
            else:
                scores = np.where(cand, d / self.col_norms, -np.inf)
                j = int(np.argmax(scores))
            w = self.Binv @ self.column(j)
            pos = w > tols.pivot
            if not pos.any():
                return "unbounded"
            ratios = np.where(pos, self.xB / np.where(pos, w, 1.0), np.inf)
            theta = float(ratios.min())
            ties = np.nonzero(ratios <= theta + 1e-12 * (1.0 + abs(theta)))[0]
            leave = int(ties[np.argmin(self.basis[ties])])

            piv = w[leave]
            pivrow = self.Binv[leave] / piv
            # in-place rank-1 basis-inverse update (no m*m temporary)
            self.Binv = dger(-1.0, w, pivrow, a=self.Binv, overwrite_a=1)
            self.Binv[leave] = pivrow
            self.xB -= theta * w
            self.xB[leave] = theta
            self.xB = np.maximum(self.xB, 0.0)
            self.basis[leave] = j
            self.pivots += 1
            if self.pivots % tols.refactor_every == 0:
                self.refactor()

            obj = float(c[self.basis] @ self.xB)
            if obj > last_obj + 1e-12 * (1.0 + abs(last_obj)):
                stall = 0
                last_obj = obj
            else:
                stall += 1
                if stall >= tols.stall_window and not bland:
                    bland = True

    def drive_out_artificials(self) -> None:
        """Pivot basic artificials out; delete rows that turn out redundant."""
        tols = self.tols
        redundant = []
        for i in range(self.m):
            if not self.is_artificial[self.basis[i]]:
                continue
            row = np.asarray(self.A.T @ self.Binv[i]).ravel()
            row[self.is_artificial] = 0.0
            row[self.basis] = 0.0
            cands = np.nonzero(np.abs(row) > tols.pivot)[0]
            if cands.size == 0:
                redundant.append(i)
                continue
            j = int(cands[0])
            w = self.Binv @ self.column(j)
            piv = w[i]
            pivrow = self.Binv[i] / piv
            self.Binv -= np.outer(w, pivrow)
            self.Binv[i] = pivrow
            theta = self.xB[i] / piv
            self.xB -= theta * w
            self.xB[i] = theta
            self.xB = np.maximum(self.xB, 0.0)
            self.basis[i] = j
        if redundant:
            keep = np.setdiff1d(np.arange(self.m), np.asarray(redundant))
            self.A = self.A[keep].tocsc()
            self.b = self.b[keep]
            self.basis = self.basis[keep]
            self.m = keep.size
            self.refactor()

    def solution(self) -> np.ndarray:
        x = np.zeros(self.total)
        x[self.basis] = self.xB
        return x[: self.n_struct]


def solve_lp(lp: LinearProgram, tols: SolverTolerances = DEFAULT_TOLERANCES) -> LpSolution:
    """Solve to a vertex-optimal basic solution; deterministic across runs.

    Infeasible/unbounded are reported as statuses. Numerical breakdown (a
    singular basis, iteration explosion, or a returned point failing the
    independent feasibility audit) raises NumericalBreakdownError.
    """
    state = _Simplex(lp, tols)
    stats: dict = {}

    phase1_cost = np.zeros(state.total)
    phase1_cost[state.is_artificial] = -1.0
    if state.is_artificial.any():
        status = state.run_phase(phase1_cost, np.ones(state.total, dtype=bool))
        if status != "optimal":
            raise NumericalBreakdownError("phase 1 reported unbounded")
        art_sum = float(-(phase1_cost[state.basis] @ state.xB))
        stats["phase1_pivots"] = state.pivots
        if art_sum > tols.feasibility * (1.0 + float(np.abs(state.b).max(initial=0.0))):
            return LpSolution("infeasible", None, None, stats)
        state.drive_out_artificials()

    phase2_cost = np.zeros(state.total)
    phase2_cost[: state.n_struct] = lp.objective
    allowed = ~state.is_artificial
    status = state.run_phase(phase2_cost, allowed)
    stats["pivots"] = state.pivots
    if status == "unbounded":
        return LpSolution("unbounded", None, None, stats)

    x = state.solution()
    viol = max_violation(lp, x)
    if viol > tols.feasibility or bound_violation(lp, x) > 1e-9:
        state.refactor()
        x = state.solution()
        viol = max_violation(lp, x)
        if viol > tols.feasibility:
            raise NumericalBreakdownError(
                f"returned point violates constraints by {viol:.3e}"
            )
        if bound_violation(lp, x) > 1e-9:
            raise NumericalBreakdownError(
                f"returned point violates variable bounds by "
                f"{bound_violation(lp, x):.3e}"
            )
    stats["max_violation"] = viol
    return LpSolution("optimal", float(lp.objective @ x), x, stats)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _term(coef: float, name: str, first: bool) -> str:
    sign = "-" if coef < 0 else ("" if first else "+")
    return f"{sign} {_fmt(abs(coef))} {name}"


def export_lp_text(lp: LinearProgram, path) -> None:
    """Write CPLEX-LP text with bit-stable ordering (declaration order).

    Every variable appears in the Bounds section, so a parse round-trip
    reconstructs the full variable list and order.
    """
    if lp.n_vars == 0:
        raise LpFormatError("cannot export an LP with no variables")
    for name in lp.names + lp.row_names:
        if not _NAME_RE.match(name):
            raise LpFormatError(f"invalid identifier {name!r}")
    lines = ["\\ pagecert LP export", "Maximize"]
    terms = []
    for c, name in zip(lp.objective, lp.names):
        if c != 0.0:
            terms.append(_term(c, name, not terms))
    if not terms:
        terms = [f"0 {lp.names[0]}"]
    lines.append(" obj: " + " ".join(terms))
    lines.append("Subject To")
    csr = lp.matrix.tocsr()
    for i in range(lp.n_rows):
        start, end = csr.indptr[i], csr.indptr[i + 1]
        row_terms = []
        for j, v in zip(csr.indices[start:end], csr.data[start:end]):
            if v == 0.0:
                continue
            row_terms.append(_term(v, lp.names[j], not row_terms))
        if not row_terms:
            row_terms = [f"0 {lp.names[0]}"]
        sense = "=" if lp.senses[i] == "=" else "<="
        lines.append(f" {lp.row_names[i]}: " + " ".join(row_terms)
                     + f" {sense} {_fmt(lp.rhs[i])}")
    lines.append("Bounds")
    for j, name in enumerate(lp.names):
        ub = lp.upper_bounds[j]
        if np.isfinite(ub):
            lines.append(f" {name} <= {_fmt(ub)}")
        else:
            lines.append(f" {name} >= 0")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_TOKEN_RE = re.compile(r"(<=|>=|=|\+|-|:|[A-Za-z_][A-Za-z0-9_.]*|[0-9.eE+\-]+)")


def _parse_expr(tokens: list[str]) -> dict[str, float]:
    """Parse "[+-] [coef] name ..." into name -> coefficient."""
    out: dict[str, float] = {}
    sign = 1.0
    coef: float | None = None
    for tok in tokens:
        if tok == "+":
            continue
        if tok == "-":
            sign = -sign
        elif _NAME_RE.match(tok):
            value = sign * (1.0 if coef is None else coef)
            out[tok] = out.get(tok, 0.0) + value
            sign, coef = 1.0, None
        else:
            try:
                parsed = float(tok)
            except ValueError:
                raise LpFormatError(f"unexpected token {tok!r}") from None
            if coef is not None:
                raise LpFormatError("two coefficients without a variable")
            coef = parsed
    if coef is not None:
        raise LpFormatError("dangling coefficient in expression")
    return out


def parse_lp_text(path) -> LinearProgram:
    """Parse the CPLEX-LP dialect written by export_lp_text.

    One constraint or bound per line; Maximize and Minimize sections are
    accepted (Minimize is normalized to max by negating the objective).
    """
    text = Path(path).read_text(encoding="utf-8")
    section = None
    obj: dict[str, float] = {}
    negate = False
    rows: list[tuple[str, dict[str, float], str, float]] = []
    bound_lines: list[str] = []
    order: list[str] = []

    def register(name: str) -> None:
        if name not in seen:
            seen.add(name)
            order.append(name)

    seen: set[str] = set()
    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        low = line.lower()
        if low in ("maximize", "minimize", "max", "min"):
            section = "obj"
            negate = low.startswith("min")
            continue
        if low in ("subject to", "st", "s.t.", "such that"):
            section = "rows"
            continue
        if low == "bounds":
            section = "bounds"
            continue
        if low == "end":
            break
        if section == "obj":
            tokens = _TOKEN_RE.findall(line)
            if ":" in tokens:
                tokens = tokens[tokens.index(":") + 1:]
            obj.update(_parse_expr(tokens))
        elif section == "rows":
            tokens = _TOKEN_RE.findall(line)
            if ":" not in tokens:
                raise LpFormatError(f"constraint without name: {line!r}")
            name = tokens[tokens.index(":") - 1]
            tokens = tokens[tokens.index(":") + 1:]
            sense_idx = next(
                (i for i, t in enumerate(tokens) if t in ("<=", ">=", "=")), None
            )
            if sense_idx is None:
                raise LpFormatError(f"malformed constraint: {line!r}")
            sense = tokens[sense_idx]
            tail = tokens[sense_idx + 1:]
            if len(tail) == 1:
                rhs = float(tail[0])
            elif len(tail) == 2 and tail[0] in ("+", "-"):
                rhs = float(tail[1]) * (-1.0 if tail[0] == "-" else 1.0)
            else:
                raise LpFormatError(f"malformed constraint rhs: {line!r}")
            coeffs = _parse_expr(tokens[:sense_idx])
            if sense == ">=":
                coeffs = {k: -v for k, v in coeffs.items()}
                rhs, sense = -rhs, "<="
            rows.append((name, coeffs, sense, rhs))
        elif section == "bounds":
            bound_lines.append(line)
        else:
            raise LpFormatError(f"content outside any section: {line!r}")

    ubs: dict[str, float] = {}
    for line in bound_lines:
        tokens = _TOKEN_RE.findall(line)
        names = [t for t in tokens if _NAME_RE.match(t) and t not in ("free",)]
        if len(names) != 1:
            raise LpFormatError(f"malformed bound: {line!r}")
        name = names[0]
        register(name)
        if "free" in (t.lower() for t in tokens):
            raise LpFormatError("free variables are not supported (lb is fixed at 0)")
        if tokens == [name, ">=", "0"] or tokens == ["0", "<=", name]:
            continue
        idx = tokens.index(name)
        if idx + 2 < len(tokens) and tokens[idx + 1] == "<=":
            ubs[name] = float(tokens[idx + 2])
        elif idx >= 2 and tokens[idx - 1] == ">=":
            if float(tokens[idx - 2]) != 0.0:
                raise LpFormatError(f"nonzero lower bound unsupported: {line!r}")
        elif idx >= 2 and tokens[idx - 1] == "<=":
            if float(tokens[idx - 2]) != 0.0:
                raise LpFormatError(f"nonzero lower bound unsupported: {line!r}")
            if idx + 2 < len(tokens) and tokens[idx + 1] == "<=":
                ubs[name] = float(tokens[idx + 2])
        else:
            raise LpFormatError(f"malformed bound: {line!r}")

    for name in obj:
        register(name)
    for _, coeffs, _, _ in rows:
        for name in coeffs:
            register(name)
    if not order:
        raise LpFormatError("LP file declares no variables")

    index = {name: j for j, name in enumerate(order)}
    n = len(order)
    c = np.zeros(n)
    for name, v in obj.items():
        c[index[name]] = -v if negate else v
    data, ri, ci = [], [], []
    senses, rhs, row_names = [], [], []
    for i, (name, coeffs, sense, b) in enumerate(rows):
        for var, v in coeffs.items():
            ri.append(i)
            ci.append(index[var])
            data.append(v)
        senses.append(sense)
        rhs.append(b)
        row_names.append(name)
    A = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
    ub = np.full(n, np.inf)
    for name, v in ubs.items():
        ub[index[name]] = v
    return LinearProgram.build(c, A, senses, rhs, ub, order, row_names)


def import_solution(path, lp: LinearProgram) -> LpSolution:
    """Read "name value" lines from an external solver into an LpSolution.

    Unknown names are errors; variables missing from the file default to 0
    with a counted warning. The objective is recomputed from the primal
    values.
    """
    import logging

    logger = logging.getLogger(__name__)
    index = {name: j for j, name in enumerate(lp.names)}
    x = np.zeros(lp.n_vars)
    seen = np.zeros(lp.n_vars, dtype=bool)
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise LpFormatError(f"{path}:{lineno}: expected 'name value'")
            name, val = parts
            if name not in index:
                raise LpFormatError(f"{path}:{lineno}: unknown variable {name!r}")
            x[index[name]] = float(val)
            seen[index[name]] = True
    missing = int(np.count_nonzero(~seen))
    if missing:
        logger.warning("%d variables missing from %s; defaulted to 0", missing, path)
    return LpSolution(
        status="optimal",
        objective=float(lp.objective @ x),
        x=x,
        stats={"source": "import", "missing_defaulted": missing},
    )
