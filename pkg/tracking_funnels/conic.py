"""
Small-scale conic solver over products of free, nonnegative and PSD cones.

Solves

    minimize    c'x
    subject to  A x = b,  x in K

with a homogeneous self-dual embedding, Nesterov-Todd scaling and a
Mehrotra predictor-corrector.  PSD blocks are stored as packed lower
triangles (column-major) with off-diagonal entries scaled by sqrt(2), so
the Euclidean inner product of packed vectors equals the trace inner
product of the matrices.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class ConeKind(str, Enum):
    FREE = "free"
    NONNEGATIVE = "nonnegative"
    PSD = "psd"


@dataclass(frozen=True)
class ConeBlock:
    """One block of the decision vector; ``size`` is the side for PSD."""

    kind: ConeKind
    size: int

    @property
    def dimension(self) -> int:
        if self.kind is ConeKind.PSD:
            return self.size * (self.size + 1) // 2
        return self.size


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max-iterations"
    NUMERICAL_ERROR = "numerical-error"


@dataclass(frozen=True)
class SolverSettings:
    feasibility_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iterations: int = 200
    step_fraction: float = 0.98
    refinement_steps: int = 2


@dataclass
class ConicProblem:
    """``min c'x + offset  s.t.  A x = b, x in blocks``."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: tuple[ConeBlock, ...]
    objective_offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.blocks = tuple(self.blocks)
        n = sum(block.dimension for block in self.blocks)
        if self.A.shape != (self.b.size, n) or self.c.size != n:
            raise ValueError(
                f"Inconsistent conic dimensions: A {self.A.shape}, "
                f"b {self.b.size}, c {self.c.size}, blocks {n}"
            )

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.b.size

    def block_offsets(self) -> list[int]:
        offsets, position = [], 0
        for block in self.blocks:
            offsets.append(position)
            position += block.dimension
        return offsets


@dataclass
class ConicSolution:
    status: SolveStatus
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    message: str = ""
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


# Packed symmetric storage


def tril_pairs(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the packed lower triangle, column-major."""
    cols, rows = np.triu_indices(side)
    return rows, cols


def svec(matrix: np.ndarray) -> np.ndarray:
    side = matrix.shape[-1]
    rows, cols = tril_pairs(side)
    scale = np.where(rows == cols, 1.0, SQRT2)
    return matrix[..., rows, cols] * scale


def smat(vector: np.ndarray, side: int) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    rows, cols = tril_pairs(side)
    scale = np.where(rows == cols, 1.0, 1.0 / SQRT2)
    out = np.zeros(vector.shape[:-1] + (side, side))
    out[..., rows, cols] = vector * scale
    out[..., cols, rows] = vector * scale
    return out


def packed_index(side: int, i: int, j: int) -> int:
    """Position of entry (i, j) of a ``side`` matrix in packed storage."""
    if i < j:
        i, j = j, i
    return j * side - j * (j - 1) // 2 + (i - j)


# Presolve


@dataclass
class _Reduction:
    problem: ConicProblem
    kept_rows: np.ndarray
    kept_cols: np.ndarray
    n_original: int
    m_original: int

    def restore(
        self, solution: ConicSolution, original: ConicProblem
    ) -> ConicSolution:
        x = np.zeros(self.n_original)
        s = np.zeros(self.n_original)
        y = np.zeros(self.m_original)
        x[self.kept_cols] = solution.x
        s[self.kept_cols] = solution.s
        y[self.kept_rows] = solution.y
        solution.x, solution.y, solution.s = x, y, s
        return solution


def _trivial(
    problem: ConicProblem, status: SolveStatus, message: str
) -> ConicSolution:
    return ConicSolution(
        status=status,
        x=np.zeros(problem.n),
        y=np.zeros(problem.m),
        s=np.zeros(problem.n),
        primal_objective=problem.objective_offset,
        dual_objective=problem.objective_offset,
        primal_residual=0.0,
        dual_residual=0.0,
        gap=0.0,
        iterations=0,
        message=message,
    )


def _presolve(
    problem: ConicProblem, settings: SolverSettings
) -> _Reduction | ConicSolution:
    A = problem.A.tocsr()
    b = problem.b
    scale_b = 1.0 + np.linalg.norm(b)
    kinds = np.concatenate(
        [
            np.full(block.dimension, block.kind is ConeKind.FREE)
            for block in problem.blocks
        ]
    ) if problem.blocks else np.zeros(0, dtype=bool)

    # Empty rows
    row_nnz = np.diff(A.indptr)
    empty = row_nnz == 0
    if np.any(np.abs(b[empty]) > settings.feasibility_tol * scale_b):
        return _trivial(
            problem, SolveStatus.INFEASIBLE, "Empty equality row with nonzero rhs"
        )
    rows = np.flatnonzero(~empty)

    # Dependent rows among those touching only free columns
    if rows.size:
        A_rows = A[rows]
        cone_cols = ~kinds
        touches_cone = (
            np.asarray(abs(A_rows[:, cone_cols]).sum(axis=1)).ravel() > 0
            if cone_cols.any()
            else np.zeros(rows.size, dtype=bool)
        )
        pure = rows[~touches_cone]
        if pure.size > 1:
            dense = A[pure][:, kinds].toarray()
            _, r_factor, pivots = la.qr(
                dense.T, mode="economic", pivoting=True
            )
            diag = np.abs(np.diag(r_factor))
            threshold = 1e-10 * max(1.0, diag[0] if diag.size else 1.0)
            rank = int(np.sum(diag > threshold))
            keep = np.sort(pivots[:rank])
            drop = np.sort(pivots[rank:])
            if drop.size:
                kept_rows, dropped_rows = pure[keep], pure[drop]
                coeffs, *_ = la.lstsq(
                    dense[keep].T, dense[drop].T
                )
                mismatch = coeffs.T @ b[kept_rows] - b[dropped_rows]
                if np.max(np.abs(mismatch)) > 1e-9 * scale_b:
                    return _trivial(
                        problem,
                        SolveStatus.INFEASIBLE,
                        "Inconsistent dependent equality rows",
                    )
                logger.debug("Presolve dropped %d dependent rows", drop.size)
                rows = np.setdiff1d(rows, dropped_rows)

    # Free columns that appear nowhere
    col_nnz = np.diff(A[rows].tocsc().indptr) if rows.size else np.zeros(
        problem.n, dtype=int
    )
    unused_free = kinds & (col_nnz == 0)
    if np.any(np.abs(problem.c[unused_free]) > 0):
        return _trivial(
            problem,
            SolveStatus.UNBOUNDED,
            "Unconstrained free variable with nonzero cost",
        )
    cols = np.flatnonzero(~unused_free)

    blocks: list[ConeBlock] = []
    offset = 0
    for block in problem.blocks:
        if block.kind is ConeKind.FREE:
            kept = int(np.sum(~unused_free[offset : offset + block.size]))
            if kept:
                blocks.append(ConeBlock(ConeKind.FREE, kept))
        else:
            blocks.append(block)
        offset += block.dimension

    reduced = ConicProblem(
        c=problem.c[cols],
        A=A[rows][:, cols],
        b=b[rows],
        blocks=tuple(blocks),
        objective_offset=problem.objective_offset,
    )
    return _Reduction(reduced, rows, cols, problem.n, problem.m)


# Interior point engine


class _UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class _PsdBlock:
    cols: np.ndarray
    side: int
    rows: np.ndarray
    A_dense: np.ndarray
    G: np.ndarray | None = None
    G_inv: np.ndarray | None = None
    W: np.ndarray | None = None
    lam: np.ndarray | None = None
    Lx: np.ndarray | None = None
    Ls: np.ndarray | None = None


@dataclass
class _Component:
    rows: np.ndarray
    psd: list[tuple[int, np.ndarray]]
    lp_cols: np.ndarray
    factor: tuple | None = None
    M: np.ndarray | None = None


class _NumericalBreakdown(Exception):
    pass


class _InteriorPoint:
    """One cold-started solve of a presolved problem."""

    def __init__(self, problem: ConicProblem, settings: SolverSettings):
        self.p = problem
        self.settings = settings
        self.A = problem.A.tocsr()
        self.AT = self.A.T.tocsr()
        self.b = problem.b
        self.c = problem.c
        self.n, self.m = problem.n, problem.m

        free, lp = [], []
        self.psd: list[_PsdBlock] = []
        A_csc = self.A.tocsc()
        for block, offset in zip(problem.blocks, problem.block_offsets()):
            idx = np.arange(offset, offset + block.dimension)
            if block.kind is ConeKind.FREE:
                free.append(idx)
            elif block.kind is ConeKind.NONNEGATIVE:
                lp.append(idx)
            else:
                sub = A_csc[:, idx]
                rows = np.unique(sub.indices)
                self.psd.append(
                    _PsdBlock(
                        cols=idx,
                        side=block.size,
                        rows=rows,
                        A_dense=sub[rows].toarray(),
                    )
                )
        self.free = np.concatenate(free) if free else np.zeros(0, dtype=int)
        self.lp = np.concatenate(lp) if lp else np.zeros(0, dtype=int)
        self.cone_mask = np.ones(self.n, dtype=bool)
        self.cone_mask[self.free] = False
        self.degree = self.lp.size + sum(blk.side for blk in self.psd)

        self.A_free = self.A[:, self.free].toarray()
        self._build_components(A_csc)

    def _build_components(self, A_csc: sp.csc_matrix):
        touched = np.zeros(self.m, dtype=bool)
        uf = _UnionFind(self.m)
        for blk in self.psd:
            touched[blk.rows] = True
            for r in blk.rows[1:]:
                uf.union(int(blk.rows[0]), int(r))
        lp_rows = []
        for col in self.lp:
            rows = A_csc.indices[A_csc.indptr[col] : A_csc.indptr[col + 1]]
            lp_rows.append(rows)
            touched[rows] = True
            for r in rows[1:]:
                uf.union(int(rows[0]), int(r))
        self.cone_rows = np.flatnonzero(touched)
        self.pure_rows = np.flatnonzero(~touched)

        groups: dict[int, list[int]] = {}
        for r in self.cone_rows:
            groups.setdefault(uf.find(int(r)), []).append(int(r))
        self.components: list[_Component] = []
        root_to_comp: dict[int, int] = {}
        for root in sorted(groups):
            root_to_comp[root] = len(self.components)
            self.components.append(
                _Component(
                    rows=np.array(groups[root]), psd=[], lp_cols=np.zeros(0, int)
                )
            )
        for k, blk in enumerate(self.psd):
            if blk.rows.size:
                comp = self.components[root_to_comp[uf.find(int(blk.rows[0]))]]
                comp.psd.append(
                    (k, np.searchsorted(comp.rows, blk.rows))
                )
        lp_by_comp: dict[int, list[int]] = {}
        for col, rows in zip(self.lp, lp_rows):
            if rows.size:
                key = root_to_comp[uf.find(int(rows[0]))]
                lp_by_comp.setdefault(key, []).append(int(col))
        for key, cols in lp_by_comp.items():
            self.components[key].lp_cols = np.array(cols)

    # Scaling

    def _scale(self, x: np.ndarray, s: np.ndarray):
        for blk in self.psd:
            X = smat(x[blk.cols], blk.side)
            S = smat(s[blk.cols], blk.side)
            try:
                Lx = la.cholesky(X, lower=True)
                Ls = la.cholesky(S, lower=True)
            except la.LinAlgError as e:
                raise _NumericalBreakdown(
                    "Lost positive definiteness of an iterate"
                ) from e
            _, sig, Vt = la.svd(Ls.T @ Lx)
            G = (Lx @ Vt.T) / np.sqrt(sig)
            LxinvT_V = la.solve_triangular(Lx, Vt.T, lower=True, trans="T")
            G_inv = np.sqrt(sig)[:, None] * LxinvT_V.T
            blk.G, blk.G_inv, blk.W, blk.lam = G, G_inv, G @ G.T, sig
            blk.Lx, blk.Ls = Lx, Ls
        self.lp_q2 = x[self.lp] / s[self.lp]
        self.lp_lam = np.sqrt(x[self.lp] * s[self.lp])

    def _apply_w(self, v: np.ndarray) -> np.ndarray:
        """Cone part of ``W v`` (zero on free coordinates)."""
        out = np.zeros(self.n)
        out[self.lp] = self.lp_q2 * v[self.lp]
        for blk in self.psd:
            V = smat(v[blk.cols], blk.side)
            out[blk.cols] = svec(blk.W @ V @ blk.W)
        return out

    def _factor(self):
        delta = 1e-13
        for comp in self.components:
            M = np.zeros((comp.rows.size, comp.rows.size))
            for k, local in comp.psd:
                blk = self.psd[k]
                mats = smat(blk.A_dense, blk.side)
                scaled = svec(np.matmul(blk.G.T, np.matmul(mats, blk.G)))
                M[np.ix_(local, local)] += scaled @ scaled.T
            if comp.lp_cols.size:
                A_lp = self.A[comp.rows][:, comp.lp_cols].toarray()
                q2 = self.lp_q2[np.searchsorted(self.lp, comp.lp_cols)]
                M += (A_lp * q2) @ A_lp.T
            comp.M = M
            try:
                comp.factor = la.cho_factor(M, lower=True)
            except la.LinAlgError:
                reg = 1e-10 * max(1.0, float(np.max(np.diag(M))))
                logger.debug("Regularizing a singular Schur block by %g", reg)
                comp.factor = la.cho_factor(
                    M + reg * np.eye(M.shape[0]), lower=True
                )

        n_f, n_p = self.free.size, self.pure_rows.size
        self.schur = np.zeros((n_f, n_f))
        self._minv_af: list[np.ndarray] = []
        for comp in self.components:
            Af = self.A_free[comp.rows]
            Y = la.cho_solve(comp.factor, Af)
            self._minv_af.append(Y)
            self.schur += Af.T @ Y
        size = n_f + n_p
        if size:
            K = np.zeros((size, size))
            K[:n_f, :n_f] = -(self.schur + delta * np.eye(n_f))
            Ap = self.A_free[self.pure_rows]
            K[:n_f, n_f:] = Ap.T
            K[n_f:, :n_f] = Ap
            K[n_f:, n_f:] = -delta * np.eye(n_p)
            self.small = la.lu_factor(K)
        else:
            self.small = None

    def _apply_k(self, p: np.ndarray, q: np.ndarray):
        top = self.A_free.T @ q
        bottom = self.A_free @ p
        for comp in self.components:
            bottom[comp.rows] += comp.M @ q[comp.rows]
        return top, bottom

    def _solve_k_once(self, u_f: np.ndarray, u: np.ndarray):
        n_f = self.free.size
        q = np.zeros(self.m)
        minv_u = []
        rhs_f = u_f.copy()
        for comp, Y in zip(self.components, self._minv_af):
            z = la.cho_solve(comp.factor, u[comp.rows])
            minv_u.append(z)
            rhs_f -= self.A_free[comp.rows].T @ z
        if self.small is not None:
            sol = la.lu_solve(
                self.small, np.concatenate([rhs_f, u[self.pure_rows]])
            )
            p = sol[:n_f]
            q[self.pure_rows] = sol[n_f:]
        else:
            p = np.zeros(0)
        for comp, Y, z in zip(self.components, self._minv_af, minv_u):
            q[comp.rows] = z - Y @ p
        return p, q

    def _solve_k(self, u_f: np.ndarray, u: np.ndarray):
        p, q = self._solve_k_once(u_f, u)
        for _ in range(self.settings.refinement_steps):
            top, bottom = self._apply_k(p, q)
            dp, dq = self._solve_k_once(u_f - top, u - bottom)
            p, q = p + dp, q + dq
        return p, q

    # Newton directions

    def _direction(self, r1, r2, r3, r4, r5, tau, kappa, fixed):
        """Solve the linearized embedding for one right-hand side."""
        cone = self.cone_mask
        t_c = r4 - self._apply_w(r2)
        t_c[~cone] = 0.0
        u = r1 - self.A @ t_c
        p, q = self._solve_k(r2[self.free], u)
        p2, q2, w_atq2_minus_wc = fixed

        x_part = t_c + self._apply_w(self.AT @ q)
        x_part[~cone] = 0.0
        numerator = (
            r3
            - self.c[self.free] @ p
            - self.c[cone] @ x_part[cone]
            + self.b @ q
            - r5 / tau
        )
        denominator = (
            self.c[self.free] @ p2
            + self.c[cone] @ w_atq2_minus_wc[cone]
            - self.b @ q2
            - kappa / tau
        )
        dtau = numerator / denominator
        dy = q + q2 * dtau
        dx = x_part + w_atq2_minus_wc * dtau
        dx[self.free] = p + p2 * dtau
        ds = r2 - self.AT @ dy + self.c * dtau
        ds[self.free] = 0.0
        dkappa = (r5 - kappa * dtau) / tau
        return dx, dy, ds, dtau, dkappa

    def _fixed_system(self):
        cone = self.cone_mask
        c_cone = np.where(cone, self.c, 0.0)
        w_c = self._apply_w(c_cone)
        rhs = self.A @ w_c + self.b
        p2, q2 = self._solve_k(self.c[self.free], rhs)
        w_atq2 = self._apply_w(self.AT @ q2)
        diff = w_atq2 - w_c
        diff[~cone] = 0.0
        return p2, q2, diff

    # Step lengths

    def _max_step(self, x, dx, s, ds, tau, dtau, kappa, dkappa) -> float:
        alpha = np.inf
        for value, delta in ((x[self.lp], dx[self.lp]), (s[self.lp], ds[self.lp])):
            neg = delta < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-value[neg] / delta[neg])))
        for value, delta in ((tau, dtau), (kappa, dkappa)):
            if delta < 0:
                alpha = min(alpha, -value / delta)
        for blk in self.psd:
            for L, d in ((blk.Lx, dx), (blk.Ls, ds)):
                D = smat(d[blk.cols], blk.side)
                T = la.solve_triangular(L, D, lower=True)
                T = la.solve_triangular(L, T.T, lower=True)
                smallest = la.eigvalsh(0.5 * (T + T.T))[0]
                if smallest < 0:
                    alpha = min(alpha, -1.0 / smallest)
        return alpha

    def _corrector_rhs(self, dx_a, ds_a, sigma_mu):
        r4 = np.zeros(self.n)
        if self.lp.size:
            q = np.sqrt(self.lp_q2)
            dxt = dx_a[self.lp] / q
            dst = ds_a[self.lp] * q
            lam = self.lp_lam
            r4[self.lp] = q * (sigma_mu - lam**2 - dxt * dst) / lam
        for blk in self.psd:
            dX = smat(dx_a[blk.cols], blk.side)
            dS = smat(ds_a[blk.cols], blk.side)
            dXt = blk.G_inv @ dX @ blk.G_inv.T
            dSt = blk.G.T @ dS @ blk.G
            R = -0.5 * (dXt @ dSt + dSt @ dXt)
            R[np.diag_indices(blk.side)] += sigma_mu - blk.lam**2
            Rt = 2.0 * R / (blk.lam[:, None] + blk.lam[None, :])
            r4[blk.cols] = svec(blk.G @ Rt @ blk.G.T)
        return r4

    # Main loop

    def _initial_point(self):
        x = np.zeros(self.n)
        s = np.zeros(self.n)
        x[self.lp] = 1.0
        s[self.lp] = 1.0
        for blk in self.psd:
            x[blk.cols] = svec(np.eye(blk.side))
            s[blk.cols] = svec(np.eye(blk.side))
        return x, np.zeros(self.m), s, 1.0, 1.0

    def run(self) -> ConicSolution:
        st = self.settings
        x, y, s, tau, kappa = self._initial_point()
        norm_b = 1.0 + np.linalg.norm(self.b)
        norm_c = 1.0 + np.linalg.norm(self.c)
        cone = self.cone_mask
        history: list[dict[str, float]] = []
        status = SolveStatus.MAX_ITERATIONS
        message = "Iteration cap reached"
        iteration = 0
        pres = dres = gap = np.inf
        pobj = dobj = np.nan

        for iteration in range(st.max_iterations + 1):
            rp = self.A @ x - self.b * tau
            rd = self.AT @ y + s - self.c * tau
            rg = self.c @ x - self.b @ y + kappa
            mu = (x[cone] @ s[cone] + tau * kappa) / (self.degree + 1)

            pobj = self.c @ x / tau
            dobj = self.b @ y / tau
            pres = np.linalg.norm(rp) / tau / norm_b
            dres = np.linalg.norm(rd) / tau / norm_c
            gap = abs(pobj - dobj) / max(1.0, abs(pobj))
            history.append(
                {"pres": pres, "dres": dres, "gap": gap, "mu": mu, "tau": tau}
            )
            logger.debug(
                "ipm %3d pres %.2e dres %.2e gap %.2e mu %.2e tau %.2e",
                iteration, pres, dres, gap, mu, tau,
            )
            if not np.all(np.isfinite([pres, dres, gap, mu])):
                status = SolveStatus.NUMERICAL_ERROR
                message = "Non-finite iterate"
                break
            if pres <= st.feasibility_tol and dres <= st.feasibility_tol and (
                gap <= st.gap_tol
            ):
                status = SolveStatus.OPTIMAL
                message = "Converged"
                break
            by = self.b @ y
            if by > 0:
                ray = self.AT @ y + s
                if np.linalg.norm(ray) / by <= st.feasibility_tol:
                    status = SolveStatus.INFEASIBLE
                    message = "Certified primal infeasibility"
                    y, s, x = y / by, s / by, np.zeros(self.n)
                    tau = 1.0
                    break
            cx = self.c @ x
            if cx < 0:
                if np.linalg.norm(self.A @ x) / -cx <= st.feasibility_tol:
                    status = SolveStatus.UNBOUNDED
                    message = "Certified dual infeasibility"
                    x, y, s = x / -cx, np.zeros(self.m), np.zeros(self.n)
                    tau = 1.0
                    break
            if iteration == st.max_iterations:
                break

            try:
                self._scale(x, s)
                self._factor()
                fixed = self._fixed_system()

                # Predictor
                r4 = -np.where(cone, x, 0.0)
                d_aff = self._direction(
                    -rp, -rd, -rg, r4, -tau * kappa, tau, kappa, fixed
                )
                dx_a, _, ds_a, dtau_a, dkappa_a = d_aff
                alpha_a = min(
                    1.0,
                    self._max_step(x, dx_a, s, ds_a, tau, dtau_a, kappa, dkappa_a),
                )
                sigma = (1.0 - alpha_a) ** 3
                eta = 1.0 - sigma

                # Corrector
                r4 = self._corrector_rhs(dx_a, ds_a, sigma * mu)
                r5 = sigma * mu - tau * kappa - dtau_a * dkappa_a
                dx, dy, ds, dtau, dkappa = self._direction(
                    -eta * rp, -eta * rd, -eta * rg, r4, r5, tau, kappa, fixed
                )
                alpha = min(
                    1.0,
                    st.step_fraction
                    * self._max_step(x, dx, s, ds, tau, dtau, kappa, dkappa),
                )
            except (_NumericalBreakdown, la.LinAlgError, ValueError) as e:
                status = SolveStatus.NUMERICAL_ERROR
                message = str(e)
                break

            x = x + alpha * dx
            y = y + alpha * dy
            s = s + alpha * ds
            s[self.free] = 0.0
            tau = tau + alpha * dtau
            kappa = kappa + alpha * dkappa

        if status in (SolveStatus.INFEASIBLE, SolveStatus.UNBOUNDED):
            return ConicSolution(
                status=status,
                x=x,
                y=y,
                s=s,
                primal_objective=float(self.c @ x) + self.p.objective_offset,
                dual_objective=float(self.b @ y) + self.p.objective_offset,
                primal_residual=float(pres),
                dual_residual=float(dres),
                gap=float(gap),
                iterations=iteration,
                message=message,
                history=history,
            )
        return ConicSolution(
            status=status,
            x=x / tau,
            y=y / tau,
            s=s / tau,
            primal_objective=float(pobj) + self.p.objective_offset,
            dual_objective=float(dobj) + self.p.objective_offset,
            primal_residual=float(pres),
            dual_residual=float(dres),
            gap=float(gap),
            iterations=iteration,
            message=message,
            history=history,
        )


def solve(
    problem: ConicProblem, settings: SolverSettings | None = None
) -> ConicSolution:
    """
    Solve a conic problem from a cold start.

    Args:
        problem: Problem in standard form
        settings: Tolerances and iteration cap (defaults 1e-8 / 200)

    Returns:
        ConicSolution: Status, primal/dual vectors and residuals
    """
    settings = settings or SolverSettings()
    if problem.n == 0 and problem.m == 0:
        return _trivial(problem, SolveStatus.OPTIMAL, "Empty problem")
    reduction = _presolve(problem, settings)
    if isinstance(reduction, ConicSolution):
        logger.debug("Presolve decided: %s", reduction.message)
        return reduction
    reduced = reduction.problem
    if reduced.n == 0:
        if reduced.m:
            return _trivial(
                problem, SolveStatus.INFEASIBLE, "Rows without variables"
            )
        return reduction.restore(
            _trivial(reduced, SolveStatus.OPTIMAL, "All variables fixed"),
            problem,
        )
    solution = _InteriorPoint(reduced, settings).run()
    logger.debug(
        "Conic solve: %s after %d iterations (%s)",
        solution.status.value, solution.iterations, solution.message,
    )
    return reduction.restore(solution, problem)


def psd_blocks(
    problem: ConicProblem, x: np.ndarray
) -> list[np.ndarray]:
    """Unpack every PSD block of ``x`` into a dense symmetric matrix."""
    out = []
    for block, offset in zip(problem.blocks, problem.block_offsets()):
        if block.kind is ConeKind.PSD:
            out.append(smat(x[offset : offset + block.dimension], block.size))
    return out


# Sparse text dump


def dump_problem(problem: ConicProblem, path: str | Path) -> Path:
    """
    Write the problem as block descriptors plus triplets.

    Format (one record per line)::

        blocks <count>
        block <free|nonnegative|psd> <size>
        rows <m>
        offset <value>
        c <col> <value>
        b <row> <value>
        A <row> <col> <value>
    """
    path = Path(path)
    lines = [f"blocks {len(problem.blocks)}"]
    lines += [f"block {blk.kind.value} {blk.size}" for blk in problem.blocks]
    lines.append(f"rows {problem.m}")
    lines.append(f"offset {float(problem.objective_offset)!r}")
    lines += [
        f"c {j} {float(problem.c[j])!r}" for j in np.flatnonzero(problem.c)
    ]
    lines += [
        f"b {i} {float(problem.b[i])!r}" for i in np.flatnonzero(problem.b)
    ]
    coo = problem.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines += [
        f"A {coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}" for k in order
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_problem(path: str | Path) -> ConicProblem:
    """Read a problem written by :func:`dump_problem`."""
    blocks: list[ConeBlock] = []
    m = 0
    offset = 0.0
    c_entries: list[tuple[int, float]] = []
    b_entries: list[tuple[int, float]] = []
    triplets: list[tuple[int, int, float]] = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "block":
            blocks.append(ConeBlock(ConeKind(parts[1]), int(parts[2])))
        elif tag == "rows":
            m = int(parts[1])
        elif tag == "offset":
            offset = float(parts[1])
        elif tag == "c":
            c_entries.append((int(parts[1]), float(parts[2])))
        elif tag == "b":
            b_entries.append((int(parts[1]), float(parts[2])))
        elif tag == "A":
            triplets.append((int(parts[1]), int(parts[2]), float(parts[3])))
    n = sum(block.dimension for block in blocks)
    c = np.zeros(n)
    b = np.zeros(m)
    for j, v in c_entries:
        c[j] = v
    for i, v in b_entries:
        b[i] = v
    if triplets:
        rows, cols, vals = zip(*triplets)
    else:
        rows, cols, vals = (), (), ()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    return ConicProblem(c, A, b, tuple(blocks), offset)


def min_psd_eigenvalue(
    problem: ConicProblem, x: np.ndarray
) -> float:
    values = [la.eigvalsh(M)[0] for M in psd_blocks(problem, x)]
    return float(min(values)) if values else math.inf


def blocks_from_sizes(
    free: int = 0, nonnegative: int = 0, psd: Sequence[int] = ()
) -> tuple[ConeBlock, ...]:
    """Convenience constructor for block lists in declaration order."""
    blocks: list[ConeBlock] = []
    if free:
        blocks.append(ConeBlock(ConeKind.FREE, free))
    if nonnegative:
        blocks.append(ConeBlock(ConeKind.NONNEGATIVE, nonnegative))
    blocks += [ConeBlock(ConeKind.PSD, side) for side in psd]
    return tuple(blocks)
