"""
Receding-horizon planner for the low-fidelity model.

The horizon is single-shooting over the stacked input sequence with
forward-Euler prediction ``xh+ = xh + T_s f_approx(xh, uh)``; SLSQP
handles the input box, the input-jump box, the position limits and the
TEB-inflated obstacle exclusions with analytic Jacobians.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import minimize

from tracking_funnels.errors import StructuralError
from tracking_funnels.models import BoxSet, PlannerModel, planner_polynomial_dynamics
from tracking_funnels.poly import PolyEvaluator

logger = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-6


@dataclass(frozen=True)
class Obstacle:
    """Ball ``||p - center|| < radius`` in planner position coordinates."""

    center: tuple[float, ...]
    radius: float

    def distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.linalg.norm(points - np.asarray(self.center), axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class GoalSet:
    """Axis-aligned box of positions."""

    center: tuple[float, ...]
    half_width: tuple[float, ...]

    def contains(self, position: Sequence[float]) -> bool:
        p = np.asarray(position, dtype=float)
        return bool(
            np.all(np.abs(p - np.asarray(self.center)) <= np.asarray(self.half_width))
        )


def inflate_obstacles(
    obstacles: Sequence[Obstacle],
    deviation: float,
    *,
    clearance: float = 0.0,
) -> list[Obstacle]:
    """
    Grow every radius by the maximum position deviation.

    ``deviation`` is usually :meth:`Teb.position_bound` of the certified
    TEB.
    """
    if deviation < 0:
        raise StructuralError("Position deviation must be nonnegative")
    grown = [
        Obstacle(tuple(o.center), o.radius + deviation + clearance)
        for o in obstacles
    ]
    logger.debug(
        "Inflated %d obstacles by %.4f (+%.4f clearance)",
        len(grown), deviation, clearance,
    )
    return grown


@dataclass
class MpcProblem:
    """
    Horizon, costs, sets and obstacles of one receding-horizon planner.

    Cost: ``sum ||p_k - goal||^2 + input_weight ||uh_k - uh_{k-1}||^2``
    over the horizon plus ``terminal_weight ||p_N - goal||^2``.
    """

    planner: PlannerModel
    goal: GoalSet
    obstacles: tuple[Obstacle, ...] = ()
    horizon: int = 15
    input_weight: float = 0.1
    terminal_weight: float = 10.0
    fit_degree: int = 5
    max_iterations: int = 50
    position_box: BoxSet | None = None
    _compiled: dict[str, Any] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise StructuralError("MPC horizon must be at least one step")
        positions = self.planner.position_indices
        if len(self.goal.center) != len(positions):
            raise StructuralError("Goal dimension does not match positions")
        for o in self.obstacles:
            if len(o.center) != len(positions):
                raise StructuralError("Obstacle dimension does not match positions")
        if self.position_box is None:
            box = self.planner.state_box
            self.position_box = BoxSet.of(
                [box.variables[i] for i in positions],
                [box.lower[i] for i in positions],
                [box.upper[i] for i in positions],
            )

    @property
    def n_x(self) -> int:
        return len(self.planner.state)

    @property
    def n_u(self) -> int:
        return len(self.planner.inputs)

    def _evaluators(self) -> tuple[PolyEvaluator, PolyEvaluator]:
        if not self._compiled:
            planner = self.planner
            f = planner_polynomial_dynamics(planner, self.fit_degree)
            variables = planner.state + planner.inputs
            partials = [p.differentiate(v) for p in f for v in variables]
            self._compiled["f"] = PolyEvaluator(f, variables)
            self._compiled["df"] = PolyEvaluator(partials, variables)
        return self._compiled["f"], self._compiled["df"]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        f, _ = self._evaluators()
        return x + self.planner.sampling_time * f(np.concatenate([x, u]))


def predict(
    problem: MpcProblem, x0: np.ndarray, inputs: np.ndarray
) -> np.ndarray:
    """Forward-Euler prediction, ``(N + 1, n)``."""
    states = [np.asarray(x0, dtype=float)]
    for u in np.asarray(inputs, dtype=float).reshape(-1, problem.n_u):
        states.append(problem.step(states[-1], u))
    return np.array(states)


def _rollout(
    problem: MpcProblem, x0: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Prediction and its sensitivities ``d x_k / d z``."""
    n, m, N = problem.n_x, problem.n_u, problem.horizon
    Ts = problem.planner.sampling_time
    f, df = problem._evaluators()
    U = z.reshape(N, m)
    X = np.zeros((N + 1, n))
    S = np.zeros((N + 1, n, N * m))
    X[0] = x0
    for k in range(N):
        point = np.concatenate([X[k], U[k]])
        J = df(point).reshape(n, n + m)
        A, B = J[:, :n], J[:, n:]
        X[k + 1] = X[k] + Ts * f(point)
        S[k + 1] = S[k] + Ts * (A @ S[k])
        S[k + 1][:, k * m : (k + 1) * m] += Ts * B
    return X, S


@dataclass
class PlanStep:
    input: np.ndarray
    inputs: np.ndarray
    predicted: np.ndarray
    status: str
    cost: float
    converged: bool
    iterations: int = 0
    message: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "input": self.input.tolist(),
            "status": self.status,
            "cost": self.cost,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
        }


def _cost_terms(problem: MpcProblem, u_prev: np.ndarray):
    pos = list(problem.planner.position_indices)
    goal = np.asarray(problem.goal.center, dtype=float)
    N, m = problem.horizon, problem.n_u
    weights = np.ones(N + 1)
    weights[0] = 0.0
    weights[N] = 1.0 + problem.terminal_weight

    def cost(z: np.ndarray, X: np.ndarray, S: np.ndarray) -> tuple[float, np.ndarray]:
        U = z.reshape(N, m)
        dU = np.diff(np.vstack([u_prev, U]), axis=0)
        dev = X[:, pos] - goal
        value = float(np.sum(weights[:, None] * dev**2))
        value += problem.input_weight * float(np.sum(dU**2))
        grad = np.einsum("k,ki,kiz->z", 2.0 * weights, dev, S[:, pos, :])
        gU = 2.0 * problem.input_weight * dU
        gU[:-1] -= 2.0 * problem.input_weight * dU[1:]
        return value, grad + gU.ravel()

    return cost


def _constraints(
    problem: MpcProblem, x0: np.ndarray, u_prev: np.ndarray, cache: dict
) -> list[dict[str, Any]]:
    N, m = problem.horizon, problem.n_u
    pos = list(problem.planner.position_indices)
    jump = problem.planner.jump_box
    lo_d, hi_d = np.array(jump.lower), np.array(jump.upper)
    # D z - d_prev gives the input increments.
    D = np.eye(N * m)
    for k in range(1, N):
        D[k * m : (k + 1) * m, (k - 1) * m : k * m] -= np.eye(m)
    d_prev = np.zeros(N * m)
    d_prev[:m] = u_prev

    def rollout(z):
        key = z.tobytes()
        if cache.get("key") != key:
            cache["key"] = key
            cache["value"] = _rollout(problem, x0, z)
        return cache["value"]

    cons: list[dict[str, Any]] = [
        {
            "type": "ineq",
            "fun": lambda z: np.concatenate(
                [D @ z - d_prev - np.tile(lo_d, N), np.tile(hi_d, N) - (D @ z - d_prev)]
            ),
            "jac": lambda z: np.vstack([D, -D]),
        }
    ]
    box = problem.position_box
    if box is not None and box.dimension:
        lo_p, hi_p = np.array(box.lower), np.array(box.upper)

        def box_fun(z):
            X, _ = rollout(z)
            P = X[1:, pos]
            return np.concatenate([(P - lo_p).ravel(), (hi_p - P).ravel()])

        def box_jac(z):
            _, S = rollout(z)
            J = S[1:, pos, :].reshape(-1, N * m)
            return np.vstack([J, -J])

        cons.append({"type": "ineq", "fun": box_fun, "jac": box_jac})
    if problem.obstacles:
        centers = np.array([o.center for o in problem.obstacles])
        radii2 = np.array([o.radius**2 for o in problem.obstacles])

        def obstacle_fun(z):
            X, _ = rollout(z)
            P = X[1:, pos]
            diff = P[:, None, :] - centers[None, :, :]
            return (np.sum(diff**2, axis=2) - radii2).ravel()

        def obstacle_jac(z):
            X, S = rollout(z)
            P = X[1:, pos]
            diff = P[:, None, :] - centers[None, :, :]
            return np.einsum("koi,kiz->koz", 2.0 * diff, S[1:, pos, :]).reshape(
                -1, N * m
            )

        cons.append({"type": "ineq", "fun": obstacle_fun, "jac": obstacle_jac})
    return cons


def _violation(cons: list[dict[str, Any]], z: np.ndarray) -> float:
    worst = 0.0
    for c in cons:
        values = c["fun"](z)
        if len(values):
            worst = max(worst, float(-np.min(values)))
    return worst


def solve_mpc(
    problem: MpcProblem,
    x0: Sequence[float],
    u_prev: Sequence[float],
    *,
    warm_start: np.ndarray | None = None,
) -> PlanStep:
    """
    One receding-horizon solve.

    Args:
        problem: Horizon, costs and constraint sets
        x0: Current planner state
        u_prev: Input held over the previous period
        warm_start: ``(N, m)`` initial input sequence

    Returns:
        PlanStep: First input (inside the input box and within one
        input jump of ``u_prev``), the sequence and its prediction.  A
        failed solve holds ``u_prev`` with status ``fallback``.
    """
    x0 = np.asarray(x0, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    N, m = problem.horizon, problem.n_u
    box = problem.planner.input_box
    if not box.contains(u_prev, tol=1e-9):
        raise StructuralError("Previous planner input lies outside the input box")
    z0 = (
        np.asarray(warm_start, dtype=float).ravel()
        if warm_start is not None
        else np.tile(u_prev, N)
    )
    z0 = np.clip(z0, np.tile(box.lower, N), np.tile(box.upper, N))
    cache: dict[str, Any] = {}
    cons = _constraints(problem, x0, u_prev, cache)
    cost = _cost_terms(problem, u_prev)

    def objective(z):
        key = z.tobytes()
        if cache.get("key") != key:
            cache["key"] = key
            cache["value"] = _rollout(problem, x0, z)
        X, S = cache["value"]
        return cost(z, X, S)

    result = minimize(
        objective,
        z0,
        jac=True,
        method="SLSQP",
        bounds=list(zip(np.tile(box.lower, N), np.tile(box.upper, N))),
        constraints=cons,
        options={"maxiter": problem.max_iterations, "ftol": 1e-9},
    )
    z = np.asarray(result.x, dtype=float)
    violation = _violation(cons, z)
    converged = bool(result.success) and violation <= CONSTRAINT_TOL
    status = "optimal" if converged else "fallback"
    if not converged and violation > CONSTRAINT_TOL:
        z = np.tile(u_prev, N)
        logger.warning(
            "MPC solve failed (%s, violation %.2e); holding previous input",
            result.message, violation,
        )
    elif not result.success:
        status = "feasible"
    inputs = z.reshape(N, m).copy()
    jump = problem.planner.jump_box
    applied = u_prev + np.clip(inputs[0] - u_prev, jump.lower, jump.upper)
    inputs[0] = box.clip(applied)
    predicted = predict(problem, x0, inputs)
    value, _ = cost(inputs.ravel(), *_rollout(problem, x0, inputs.ravel()))
    return PlanStep(
        input=inputs[0].copy(),
        inputs=inputs,
        predicted=predicted,
        status=status,
        cost=value,
        converged=converged,
        iterations=int(getattr(result, "nit", 0)),
        message=str(result.message),
    )


@dataclass
class PlannerRun:
    """Planner-only closed loop under zero-order hold."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    steps: list[PlanStep]
    reached: bool
    goal_step: int | None
    positions: tuple[int, ...] = (0, 1)

    @property
    def statuses(self) -> list[str]:
        return [s.status for s in self.steps]

    def min_clearance(self, obstacles: Sequence[Obstacle]) -> float:
        if not obstacles:
            return math.inf
        positions = self.states[:, list(self.positions)]
        return float(min(np.min(o.distance(positions) - o.radius) for o in obstacles))

    def report(self) -> dict[str, Any]:
        return {
            "reached": self.reached,
            "goal_step": self.goal_step,
            "steps": len(self.steps),
            "statuses": {s: self.statuses.count(s) for s in set(self.statuses)},
            "final_state": self.states[-1].tolist(),
        }


def _wrap_heading(planner: PlannerModel, x: np.ndarray) -> np.ndarray:
    if planner.heading_index is None:
        return x
    x = x.copy()
    h = planner.heading_index
    x[h] = (x[h] + math.pi) % (2.0 * math.pi) - math.pi
    return x


def run_receding_horizon(
    problem: MpcProblem,
    x0: Sequence[float],
    u0: Sequence[float],
    max_steps: int = 400,
) -> PlannerRun:
    """
    Iterate :func:`solve_mpc` and hold each input for one period.

    The planner advances by its exact flow.  Terminates on goal-set entry
    or after ``max_steps`` periods.
    """
    planner = problem.planner
    positions = list(planner.position_indices)
    x = _wrap_heading(planner, np.asarray(x0, dtype=float))
    u = np.asarray(u0, dtype=float)
    states, inputs, steps = [x], [], []
    reached = problem.goal.contains(x[positions])
    goal_step = 0 if reached else None
    warm = None
    for k in range(max_steps):
        if reached:
            break
        step = solve_mpc(problem, x, u, warm_start=warm)
        steps.append(step)
        u = step.input
        x = _wrap_heading(planner, planner.propagate(x, u, planner.sampling_time))
        states.append(x)
        inputs.append(u)
        warm = np.vstack([step.inputs[1:], step.inputs[-1:]])
        if problem.goal.contains(x[positions]):
            reached, goal_step = True, k + 1
    Ts = planner.sampling_time
    run = PlannerRun(
        times=Ts * np.arange(len(states)),
        states=np.array(states),
        inputs=np.array(inputs).reshape(-1, problem.n_u),
        steps=steps,
        reached=reached,
        goal_step=goal_step,
        positions=tuple(positions),
    )
    if reached:
        logger.info("Planner reached the goal after %d steps", goal_step)
    else:
        logger.warning("Planner did not reach the goal within %d steps", max_steps)
    return run
