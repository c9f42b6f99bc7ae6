"""
Alternating-direction solution of bilinear SOS programs.

A :class:`BilinearSosProblem` splits its decisions into a *storage* group
(the storage function V and the multipliers that never multiply it) and a
*controller* group (the controller, the level-set multipliers and every
other multiplier that appears in a product with V).  Fixing either group
leaves a convex SOS program; :func:`initialize_v0` and :func:`alternate`
solve those programs in turn.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from scipy import linalg

from tracking_funnels.conic import SolverSettings
from tracking_funnels.errors import AlternationError, InitializationError
from tracking_funnels.poly import Polynomial, Variable, VariableRegistry
from tracking_funnels.sosprog import AffinePoly, SosProgram, solve_program

logger = logging.getLogger(__name__)

GAMMA_REL_TOL = 1e-3
LAMBDA_STALL_TOL = 1e-4


class Group(str, Enum):
    CONTROLLER = "controller"
    STORAGE = "storage"


@dataclass
class StepProgram:
    """One convex instance plus the expressions to read back."""

    program: SosProgram
    outputs: dict[str, AffinePoly]
    slack: AffinePoly | None = None


class BilinearSosProblem(Protocol):
    """Constraint template instantiated with one group fixed."""

    name: str
    controller_group: tuple[str, ...]
    storage_group: tuple[str, ...]

    def build(
        self,
        decide: Group,
        fixed: Mapping[str, Polynomial],
        gamma: float,
        *,
        relaxed: bool = False,
        reference: Polynomial | None = None,
    ) -> StepProgram: ...

    def gamma_floor(self, storage: Polynomial) -> float: ...


@dataclass
class Iterate:
    """A certified point: storage, level and controller-group values."""

    storage: Polynomial
    gamma: float
    controller: dict[str, Polynomial]
    storage_group: dict[str, Polynomial] = field(default_factory=dict)


@dataclass
class StepRecord:
    iteration: int
    phase: str
    gamma: float
    slack: float | None
    residual: float
    seconds: float
    status: str


@dataclass
class AlternationReport:
    """Per-solve log of initialization and alternation."""

    records: list[StepRecord] = field(default_factory=list)
    lambda_trace: list[float] = field(default_factory=list)
    termination: str = ""

    @property
    def gammas(self) -> list[float]:
        return [r.gamma for r in self.records if r.phase == "kappa"]

    def add(self, record: StepRecord):
        self.records.append(record)
        logger.info(
            "%s step %d: gamma=%.6g slack=%s status=%s (%.2fs)",
            record.phase,
            record.iteration,
            record.gamma,
            "-" if record.slack is None else f"{record.slack:.3e}",
            record.status,
            record.seconds,
        )

    def to_csv(self, path: str | Path | None = None) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            ["iteration", "phase", "gamma", "lambda", "residual", "status"]
        )
        for r in self.records:
            writer.writerow(
                [
                    r.iteration,
                    r.phase,
                    repr(float(r.gamma)),
                    "" if r.slack is None else repr(float(r.slack)),
                    repr(float(r.residual)),
                    r.status,
                ]
            )
        text = buffer.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_dict(self) -> dict[str, Any]:
        return {
            "records": [
                {k: v for k, v in asdict(r).items() if k != "seconds"}
                for r in self.records
            ],
            "lambda_trace": list(self.lambda_trace),
            "termination": self.termination,
        }


@dataclass
class _StepResult:
    values: dict[str, Polynomial]
    slack: float | None
    residual: float
    seconds: float
    status: str


def _run(step: StepProgram, settings: SolverSettings | None) -> _StepResult | None:
    started = time.perf_counter()
    outcome = solve_program(step.program, settings)
    seconds = time.perf_counter() - started
    if not outcome.feasible:
        logger.debug(
            "Program '%s' failed (%s): %s",
            step.program.name, outcome.status, outcome.message,
        )
        return None
    certs = outcome.certificates
    values = {name: certs.evaluate(expr) for name, expr in step.outputs.items()}
    slack = (
        None if step.slack is None
        else certs.evaluate(step.slack).constant_term()
    )
    residual = max(certs.residuals.values(), default=0.0)
    return _StepResult(values, slack, residual, seconds, outcome.status)


# Seeds


def lqr_seed(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray | None = None,
    R: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    LQR gain and a closed-loop Lyapunov matrix.

    Args:
        A: Linearized error drift
        B: Linearized input matrix
        Q: State weight (identity by default)
        R: Input weight (identity by default)

    Returns:
        (P, K): ``P`` solves ``A_cl' P + P A_cl = -(Q + K' R K)`` with
        ``A_cl = A - B K``
    """
    n, m = B.shape
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(m) if R is None else np.asarray(R, dtype=float)
    X = linalg.solve_continuous_are(A, B, Q, R)
    K = linalg.solve(R, B.T @ X)
    A_cl = A - B @ K
    P = linalg.solve_continuous_lyapunov(A_cl.T, -(Q + K.T @ R @ K))
    return 0.5 * (P + P.T), K


def lyapunov_seed(A_cl: np.ndarray, alpha: float = 0.0) -> np.ndarray:
    """Solution of ``P A + A' P = -alpha P - I``."""
    n = A_cl.shape[0]
    shifted = A_cl + 0.5 * alpha * np.eye(n)
    P = linalg.solve_continuous_lyapunov(shifted.T, -np.eye(n))
    return 0.5 * (P + P.T)


def quadratic_storage(
    registry: VariableRegistry, error: Sequence[Variable], P: np.ndarray
) -> Polynomial:
    e = registry.polys(error)
    acc = registry.zero()
    for i in range(len(e)):
        for j in range(len(e)):
            if P[i, j]:
                acc = acc + float(P[i, j]) * e[i] * e[j]
    return acc


def time_varying_seed(
    registry: VariableRegistry,
    error: Sequence[Variable],
    time_var: Variable,
    P: np.ndarray,
    alpha: float,
    *,
    total_degree: int = 3,
    gamma: float = 1.0,
) -> Polynomial:
    """
    Polynomial stand-in for ``exp(alpha t) e'Pe``.

    Degree 3 allows ``(1 + alpha t) e'Pe``; at total degree 2 the time
    growth moves into an offset, ``e'Pe + alpha gamma t``, which has the
    same level-set growth at ``V = gamma``.
    """
    base = quadratic_storage(registry, error, P)
    t = registry.poly(time_var)
    if alpha == 0:
        return base
    if total_degree >= 3:
        return base * (1.0 + alpha * t)
    return base + alpha * gamma * t


# Procedures


def _controller_step(
    problem: BilinearSosProblem,
    storage: Polynomial,
    gamma: float,
    fixed_storage: Mapping[str, Polynomial],
    settings: SolverSettings | None,
    relaxed: bool,
) -> _StepResult | None:
    fixed = dict(fixed_storage)
    fixed["V"] = storage
    step = problem.build(Group.CONTROLLER, fixed, gamma, relaxed=relaxed)
    return _run(step, settings)


def _storage_step(
    problem: BilinearSosProblem,
    controller: Mapping[str, Polynomial],
    gamma: float,
    reference: Polynomial | None,
    settings: SolverSettings | None,
    relaxed: bool,
) -> _StepResult | None:
    step = problem.build(
        Group.STORAGE, controller, gamma, relaxed=relaxed, reference=reference
    )
    return _run(step, settings)


def initialize_v0(
    problem: BilinearSosProblem,
    seed: Polynomial,
    gamma: float = 1.0,
    *,
    max_iterations: int = 10,
    settings: SolverSettings | None = None,
    report: AlternationReport | None = None,
) -> Iterate:
    """
    Find a storage function for which the program is feasible at ``gamma``.

    Every constraint carries a scalar slack ``+lambda``; controller and
    storage steps alternately minimize it until ``lambda <= 0``.

    Args:
        problem: Constraint template
        seed: Positive definite starting storage
        gamma: Fixed level
        max_iterations: Cap on controller/storage rounds
        settings: Interior-point settings
        report: Report to append to

    Returns:
        Iterate: Certified at ``gamma`` with ``lambda <= 0``

    Raises:
        InitializationError: If lambda stagnates above zero or a relaxed
            step fails; carries the lambda trace
    """
    report = report if report is not None else AlternationReport()
    storage = seed
    for iteration in range(1, max_iterations + 1):
        result = _controller_step(problem, storage, gamma, {}, settings, True)
        if result is None:
            raise InitializationError(
                f"Relaxed controller step failed at iteration {iteration}",
                report.lambda_trace,
            )
        report.lambda_trace.append(result.slack)
        report.add(
            StepRecord(iteration, "init-kappa", gamma, result.slack,
                       result.residual, result.seconds, result.status)
        )
        controller = {
            k: v for k, v in result.values.items()
            if k in problem.controller_group
        }
        if result.slack <= 0:
            report.termination = "initialized"
            return Iterate(storage, gamma, controller)

        result = _storage_step(problem, controller, gamma, None, settings, True)
        if result is None:
            raise InitializationError(
                f"Relaxed storage step failed at iteration {iteration}",
                report.lambda_trace,
            )
        report.lambda_trace.append(result.slack)
        report.add(
            StepRecord(iteration, "init-v", gamma, result.slack,
                       result.residual, result.seconds, result.status)
        )
        storage = result.values["V"]
        if result.slack <= 0:
            report.termination = "initialized"
            storage_group = {
                k: v for k, v in result.values.items()
                if k in problem.storage_group and k != "V"
            }
            return Iterate(storage, gamma, controller, storage_group)
        trace = report.lambda_trace
        if len(trace) >= 4:
            recent = trace[-4] - trace[-1]
            if recent < LAMBDA_STALL_TOL * max(1.0, abs(trace[-4])):
                break
    report.termination = "initialization-stalled"
    raise InitializationError(
        f"Slack stayed positive (last {report.lambda_trace[-1]:.3e}) "
        f"after {len(report.lambda_trace)} relaxed solves",
        report.lambda_trace,
    )


def bisect_gamma(
    problem: BilinearSosProblem,
    storage: Polynomial,
    upper: float,
    *,
    settings: SolverSettings | None = None,
    rel_tol: float = GAMMA_REL_TOL,
    max_steps: int = 12,
) -> tuple[float, _StepResult | None]:
    """
    Smallest level in ``[floor, upper]`` with a feasible controller step.

    The level enters bilinearly with the level-set multipliers, so it is
    searched rather than decided.  ``upper`` is tried first.
    """
    best = _controller_step(problem, storage, upper, {}, settings, False)
    if best is None:
        return upper, None
    hi = upper
    lo = min(problem.gamma_floor(storage), hi)
    for _ in range(max_steps):
        if hi - lo <= rel_tol * max(abs(hi), 1e-12):
            break
        mid = 0.5 * (lo + hi)
        result = _controller_step(problem, storage, mid, {}, settings, False)
        if result is None:
            lo = mid
        else:
            hi, best = mid, result
    return hi, best


def alternate(
    problem: BilinearSosProblem,
    start: Iterate,
    iterations: int = 10,
    *,
    settings: SolverSettings | None = None,
    report: AlternationReport | None = None,
) -> tuple[Iterate, AlternationReport]:
    """
    Alternate level-minimizing controller steps and storage steps.

    Each storage step keeps ``Omega(V_j, gamma_j)`` inside
    ``Omega(V_{j-1}, gamma_j)``.  With ``iterations == 0`` a single
    controller step is taken at the starting storage.

    Returns:
        (best iterate, report)

    Raises:
        AlternationError: If not even the first controller step succeeds
    """
    report = report if report is not None else AlternationReport()
    gamma, result = bisect_gamma(
        problem, start.storage, start.gamma, settings=settings
    )
    if result is None:
        report.termination = "first-step-infeasible"
        raise AlternationError(
            "Controller step infeasible at the starting storage", report
        )
    report.add(
        StepRecord(0, "kappa", gamma, None, result.residual,
                   result.seconds, result.status)
    )
    controller = {
        k: v for k, v in result.values.items() if k in problem.controller_group
    }
    best = Iterate(start.storage, gamma, controller)
    if iterations <= 0:
        report.termination = "no-iterations"
        return best, report

    stalls = 0
    for j in range(1, iterations + 1):
        step = _storage_step(
            problem, best.controller, best.gamma, best.storage, settings, False
        )
        if step is None:
            logger.warning(
                "Storage step %d failed; keeping the best iterate", j
            )
            report.termination = "storage-step-failed"
            return best, report
        report.add(
            StepRecord(j, "v", best.gamma, None, step.residual,
                       step.seconds, step.status)
        )
        storage = step.values["V"]
        storage_group = {
            k: v for k, v in step.values.items()
            if k in problem.storage_group and k != "V"
        }
        best = Iterate(storage, best.gamma, best.controller, storage_group)

        gamma, result = bisect_gamma(
            problem, storage, best.gamma, settings=settings
        )
        if result is None:
            logger.warning(
                "Controller step %d failed; keeping the best iterate", j
            )
            report.termination = "controller-step-failed"
            return best, report
        report.add(
            StepRecord(j, "kappa", gamma, None, result.residual,
                       result.seconds, result.status)
        )
        improvement = (best.gamma - gamma) / max(abs(best.gamma), 1e-12)
        best = Iterate(
            storage,
            min(gamma, best.gamma),
            {k: v for k, v in result.values.items()
             if k in problem.controller_group},
            storage_group,
        )
        stalls = stalls + 1 if improvement < GAMMA_REL_TOL else 0
        if stalls >= 2:
            report.termination = "converged"
            return best, report
    report.termination = "iteration-cap"
    return best, report
