"""Standard-form conic programs and a single solve() boundary.

A :class:`ConicProblem` is a linear objective (maximized) over named real
variables, plus an ordered list of cone memberships, each applied to an
affine image of the variables: zero cone (equalities), nonnegative orthant,
second-order cones, and exponential cones.  Complex quantities never appear
here; callers split them into real/imaginary coordinate pairs.

Solving is delegated to the Clarabel interior-point solver.  solve() never
reports "optimal" without re-checking primal feasibility of the returned
point against the problem's own rows, so a silently-infeasible answer
cannot leak out.

Problems are immutable in spirit once solved; building and solving distinct
problems concurrently is safe (no module-level state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

import clarabel

# cone kinds, in the row order the backend receives them
ZERO = "zero"
NONNEG = "nonneg"
SOC = "soc"
EXP = "exp"

# solve() status values
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"
ITERATION_LIMIT = "iteration_limit"

LN2 = math.log(2.0)

# affine row a'x + c, given as (columns, coefficients, constant)
Row = tuple[Sequence[int], Sequence[float], float]


@dataclass
class SolverSettings:
    feas_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False


@dataclass
class _Block:
    kind: str
    rows: list[Row]


def _row_scale(row: Row) -> float:
    cols, vals, const = row
    mx = abs(const)
    for v in vals:
        mx = max(mx, abs(v))
    return mx


def _normalize(rows: Sequence[Row], per_row: bool) -> list[Row]:
    """Divide rows by their largest coefficient when above 1.

    Cones are invariant under positive scaling (per row for the orthant and
    equalities, per block for SOC/exponential), so this only conditions the
    problem; feasibility tolerances then act relative to the row scale.
    """
    rows = [
        (tuple(int(c) for c in cols), tuple(float(v) for v in vals), float(const))
        for cols, vals, const in rows
    ]
    if per_row:
        out = []
        for row in rows:
            s = _row_scale(row)
            if s > 1.0:
                cols, vals, const = row
                row = (cols, tuple(v / s for v in vals), const / s)
            out.append(row)
        return out
    s = max((_row_scale(r) for r in rows), default=1.0)
    if s <= 1.0:
        return rows
    return [(cols, tuple(v / s for v in vals), const / s) for cols, vals, const in rows]


class ConicProblem:
    """Cone program container with a semantic-name -> column table."""

    def __init__(self):
        self._names: dict[str, int] = {}
        self._objective: dict[int, float] = {}
        self._blocks: list[_Block] = []

    # ----- variables -------------------------------------------------
    @property
    def num_vars(self) -> int:
        return len(self._names)

    @property
    def names(self) -> dict[str, int]:
        return dict(self._names)

    def add_variable(self, name: str) -> int:
        if name in self._names:
            raise ValueError(f"variable {name!r} already exists")
        col = len(self._names)
        self._names[name] = col
        return col

    def add_variables(self, names: Iterable[str]) -> list[int]:
        return [self.add_variable(n) for n in names]

    def column(self, name: str) -> int:
        return self._names[name]

    # ----- objective and constraints ----------------------------------
    def set_maximize(self, coeffs: dict[int, float]) -> None:
        self._objective = dict(coeffs)

    def add_equality(self, rows: Sequence[Row]) -> None:
        """Rows a'x + c == 0."""
        self._blocks.append(_Block(ZERO, _normalize(rows, per_row=True)))

    def add_nonneg(self, rows: Sequence[Row]) -> None:
        """Rows a'x + c >= 0."""
        self._blocks.append(_Block(NONNEG, _normalize(rows, per_row=True)))

    def add_soc(self, rows: Sequence[Row]) -> None:
        """Rows [t; u_1; ...; u_m] constrained to t >= ||u||_2."""
        if len(rows) < 1:
            raise ValueError("second-order cone needs at least one row")
        self._blocks.append(_Block(SOC, _normalize(rows, per_row=False)))

    def add_exp(self, rows: Sequence[Row]) -> None:
        """Rows (x, y, z) constrained to y*exp(x/y) <= z, y > 0."""
        if len(rows) != 3:
            raise ValueError("exponential cone needs exactly 3 rows")
        self._blocks.append(_Block(EXP, _normalize(rows, per_row=False)))

    def encode_power_of_two(self, r_col: int, z_col: int) -> list[Row]:
        """Append z >= 2^r as one exponential-cone membership.

        Exact encoding via z >= exp(r*ln 2); binding at the optimum whenever
        the constraint is active.
        """
        rows: list[Row] = [
            ((r_col,), (LN2,), 0.0),   # x = r*ln2
            ((), (), 1.0),             # y = 1
            ((z_col,), (1.0,), 0.0),   # z
        ]
        self.add_exp(rows)
        return rows

    # ----- standard form ----------------------------------------------
    def _ordered_blocks(self) -> list[_Block]:
        order = {ZERO: 0, NONNEG: 1, SOC: 2, EXP: 3}
        return sorted(self._blocks, key=lambda blk: order[blk.kind])

    def standard_form(self):
        """Return (q, A, b, cones) for: min q'x  s.t.  A x + s = b, s in K."""
        n = self.num_vars
        blocks = self._ordered_blocks()
        trip_r: list[np.ndarray] = []
        trip_c: list[np.ndarray] = []
        trip_v: list[np.ndarray] = []
        consts: list[float] = []
        cones = []
        row_idx = 0
        # consecutive nonneg/zero blocks merge into a single backend cone
        pending_kind = None
        pending_dim = 0

        def flush():
            nonlocal pending_kind, pending_dim
            if pending_kind == ZERO and pending_dim:
                cones.append(clarabel.ZeroConeT(pending_dim))
            elif pending_kind == NONNEG and pending_dim:
                cones.append(clarabel.NonnegativeConeT(pending_dim))
            pending_kind, pending_dim = None, 0

        for blk in blocks:
            if blk.kind in (ZERO, NONNEG):
                if pending_kind != blk.kind:
                    flush()
                    pending_kind = blk.kind
                pending_dim += len(blk.rows)
            else:
                flush()
                if blk.kind == SOC:
                    cones.append(clarabel.SecondOrderConeT(len(blk.rows)))
                else:
                    cones.append(clarabel.ExponentialConeT())
            for cols, vals, const in blk.rows:
                if len(cols):
                    trip_r.append(np.full(len(cols), row_idx, dtype=np.int64))
                    trip_c.append(np.asarray(cols, dtype=np.int64))
                    trip_v.append(np.asarray(vals, dtype=float))
                consts.append(float(const))
                row_idx += 1
        flush()

        if trip_r:
            rows = np.concatenate(trip_r)
            cols = np.concatenate(trip_c)
            vals = np.concatenate(trip_v)
        else:
            rows = cols = np.empty(0, dtype=np.int64)
            vals = np.empty(0, dtype=float)
        # s = b - A x must equal F x + g, so A = -F and b = g
        A = sparse.csc_matrix((-vals, (rows, cols)), shape=(row_idx, n))
        b = np.asarray(consts, dtype=float)
        q = np.zeros(n)
        for col, coef in self._objective.items():
            q[col] -= coef  # backend minimizes
        return q, A, b, cones

    # ----- diagnostics --------------------------------------------------
    def evaluate_rows(self, x: np.ndarray):
        """Yield (kind, values) per cone with values = [a'x + c for each row]."""
        for blk in self._ordered_blocks():
            vals = np.array(
                [
                    (np.dot(np.asarray(v, dtype=float), x[np.asarray(c, dtype=np.int64)]) if len(c) else 0.0)
                    + const
                    for c, v, const in blk.rows
                ]
            )
            yield blk.kind, vals

    def max_violation(self, x: np.ndarray) -> float:
        """Largest cone-membership violation of the point x (0 when feasible)."""
        worst = 0.0
        for kind, s in self.evaluate_rows(x):
            worst = max(worst, _cone_violation(kind, s))
        return worst

    def dump_text(self) -> str:
        """One cone per line: kind, then row triplets col:val, then constants.

        Example line: ``soc dim=3 | 0:1.0 ; 1:2.0,4:-1.0 | 0.0,3.0,0.0``
        where ';' separates rows inside the cone.
        """
        lines = [f"# conic program: {self.num_vars} variables, maximize"]
        obj = " ".join(f"{c}:{v:.17g}" for c, v in sorted(self._objective.items()))
        lines.append(f"objective {obj}")
        for name, col in sorted(self._names.items(), key=lambda kv: kv[1]):
            lines.append(f"var {col} {name}")
        for blk in self._ordered_blocks():
            rowtxt = " ; ".join(
                ",".join(f"{c}:{v:.17g}" for c, v in zip(cols, vals)) for cols, vals, _ in blk.rows
            )
            consts = ",".join(f"{const:.17g}" for _, _, const in blk.rows)
            lines.append(f"{blk.kind} dim={len(blk.rows)} | {rowtxt} | {consts}")
        return "\n".join(lines) + "\n"


def _cone_violation(kind: str, s: np.ndarray) -> float:
    if kind == ZERO:
        return float(np.max(np.abs(s))) if s.size else 0.0
    if kind == NONNEG:
        return float(max(0.0, -np.min(s))) if s.size else 0.0
    if kind == SOC:
        return float(max(0.0, np.linalg.norm(s[1:]) - s[0]))
    if kind == EXP:
        x, y, z = s
        if y <= 0.0:
            # closure of the cone: y = 0 requires x <= 0 and z >= 0
            return float(max(-y, x, -z, 0.0))
        ratio = x / y
        if ratio > 500.0:  # e^500 overflows; definitely violated unless z huge
            return float("inf") if z < y * math.exp(500.0) else 0.0
        return float(max(0.0, y * math.exp(ratio) - z))
    raise ValueError(f"unknown cone kind {kind!r}")


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None
    objective_value: float | None
    names: dict[str, int] = field(repr=False, default_factory=dict)
    iterations: int = 0
    primal_residual: float = float("nan")
    reduced_accuracy: bool = False

    def value(self, name: str) -> float:
        if self.x is None:
            raise ValueError(f"no primal point available (status={self.status})")
        return float(self.x[self.names[name]])


_STATUS_MAP = {
    "Solved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostSolved": OPTIMAL,  # provisional; demoted below unless residuals verify
    "AlmostPrimalInfeasible": INFEASIBLE,
    "AlmostDualInfeasible": UNBOUNDED,
    "MaxIterations": ITERATION_LIMIT,
    "MaxTime": NUMERICAL_FAILURE,
    "NumericalError": NUMERICAL_FAILURE,
    "InsufficientProgress": NUMERICAL_FAILURE,
}


def solve(problem: ConicProblem, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve the cone program, verifying feasibility before claiming optimal.

    A solver-side "almost solved" outcome is promoted to optimal only when
    the returned point passes the same residual check as a full solve; it is
    then marked ``reduced_accuracy``.
    """
    settings = settings or SolverSettings()
    q, A, b, cones = problem.standard_form()
    P = sparse.csc_matrix((problem.num_vars, problem.num_vars))
    cfg = clarabel.DefaultSettings()
    cfg.verbose = settings.verbose
    cfg.max_iter = settings.max_iter
    cfg.tol_feas = settings.feas_tol
    cfg.tol_gap_abs = settings.feas_tol
    cfg.tol_gap_rel = settings.feas_tol
    try:
        solver = clarabel.DefaultSolver(P, q, A, b, cones, cfg)
        result = solver.solve()
    except BaseException:
        return ConicSolution(NUMERICAL_FAILURE, None, None, problem.names)

    raw = str(result.status)
    status = _STATUS_MAP.get(raw, NUMERICAL_FAILURE)
    x = np.asarray(result.x) if result.x is not None else None
    if status != OPTIMAL:
        return ConicSolution(status, x, None, problem.names, int(result.iterations))

    residual = problem.max_violation(x)
    if not np.isfinite(residual) or residual > settings.feas_tol:
        return ConicSolution(
            NUMERICAL_FAILURE, x, None, problem.names, int(result.iterations), residual
        )
    obj = -float(np.dot(q, x))
    return ConicSolution(
        OPTIMAL, x, obj, problem.names, int(result.iterations), residual,
        reduced_accuracy=(raw == "AlmostSolved"),
    )
