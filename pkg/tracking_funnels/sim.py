"""
Closed-loop simulation of the planner–tracker pair.

The tracker follows its true dynamics (atoms evaluated exactly) under
``u = sat(kappa(t mod T_s, e, xi))``, integrated with classical RK4 at
``T_s / substeps``.  The planner input is held over each period and the
planner state advances by its exact flow.  Membership in the funnel and
the TEB is recorded and audited, never assumed.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from tracking_funnels.errors import StructuralError
from tracking_funnels.models import ErrorSystem, PlannerModel
from tracking_funnels.planner import MpcProblem, Obstacle, PlanStep, solve_mpc
from tracking_funnels.poly import PolyEvaluator
from tracking_funnels.synthesis import Funnel, Teb, TebShape, ray_boundary

logger = logging.getLogger(__name__)

MIN_SUBSTEPS = 10
DEFAULT_SUBSTEPS = 20
INITIAL_SET_TOL = 1e-9


def rk4_step(
    fn: Callable[[float, np.ndarray], np.ndarray],
    t: float,
    x: np.ndarray,
    h: float,
) -> np.ndarray:
    """One classical Runge–Kutta step of ``x' = fn(t, x)``."""
    k1 = fn(t, x)
    k2 = fn(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = fn(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = fn(t + h, x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Planner input sources


def validate_schedule(
    planner: PlannerModel, u0: Sequence[float], schedule: np.ndarray
) -> np.ndarray:
    """Check a scripted input sequence against the input and jump boxes."""
    schedule = np.atleast_2d(np.asarray(schedule, dtype=float))
    m = len(planner.inputs)
    if schedule.size == 0:
        return np.zeros((0, m))
    if schedule.shape[1] != m:
        raise StructuralError(
            f"Schedule has {schedule.shape[1]} columns, planner has {m} inputs"
        )
    previous = np.asarray(u0, dtype=float)
    for k, u in enumerate(schedule):
        if not planner.input_box.contains(u, tol=1e-9):
            raise StructuralError(f"Schedule entry {k} leaves the input box")
        if not planner.jump_box.contains(u - previous, tol=1e-9):
            raise StructuralError(f"Schedule step {k} exceeds the input-jump box")
        previous = u
    return schedule


def random_schedule(
    planner: PlannerModel,
    u0: Sequence[float],
    periods: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Random walk of admissible input jumps clipped to the input box."""
    u = np.asarray(u0, dtype=float)
    out = []
    for du in planner.jump_box.sample(rng, periods):
        u = planner.input_box.clip(u + du)
        out.append(u)
    return np.array(out).reshape(periods, len(planner.inputs))


def step_schedule(
    planner: PlannerModel,
    u0: Sequence[float],
    periods: int,
    step: Sequence[float],
) -> np.ndarray:
    """Alternate ``+step`` and ``-step`` jumps every period."""
    u = np.asarray(u0, dtype=float)
    step = np.asarray(step, dtype=float)
    out = []
    for k in range(periods):
        u = u + (step if k % 2 == 0 else -step)
        out.append(u)
    return validate_schedule(
        planner, u0, np.array(out).reshape(periods, len(planner.inputs))
    )


# Configuration and trace


@dataclass
class SimConfig:
    """
    One closed-loop run.

    Exactly one of ``x0`` (tracker state) and ``e0`` (initial error) is
    given.  Planner inputs come from ``mpc`` when set, otherwise from
    ``schedule`` (one row per sampling instant after the first, held
    at its last row), otherwise ``u0`` is held throughout.
    """

    system: ErrorSystem
    funnel: Funnel
    xh0: Sequence[float]
    u0: Sequence[float]
    duration: float
    x0: Sequence[float] | None = None
    e0: Sequence[float] | None = None
    substeps: int = DEFAULT_SUBSTEPS
    mpc: MpcProblem | None = None
    schedule: np.ndarray | None = None
    obstacles: tuple[Obstacle, ...] = ()
    kappa_scale: float = 1.0
    saturate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.substeps < MIN_SUBSTEPS:
            raise StructuralError(
                f"At least {MIN_SUBSTEPS} substeps per period are required"
            )
        if self.duration < 0 or not math.isfinite(self.duration):
            raise StructuralError("Duration must be finite and nonnegative")
        if (self.x0 is None) == (self.e0 is None):
            raise StructuralError("Give exactly one of x0 and e0")
        planner = self.system.planner
        if len(self.xh0) != len(planner.state) or len(self.u0) != len(planner.inputs):
            raise StructuralError("Initial planner state/input has wrong size")
        if not planner.input_box.contains(self.u0, tol=1e-9):
            raise StructuralError("Initial planner input lies outside the input box")
        if self.schedule is not None:
            self.schedule = validate_schedule(planner, self.u0, self.schedule)

    def initial_state(self) -> np.ndarray:
        xh = np.asarray(self.xh0, dtype=float)
        uh = np.asarray(self.u0, dtype=float)
        if self.x0 is not None:
            return np.asarray(self.x0, dtype=float)
        return self.system.state_of(np.asarray(self.e0, dtype=float), xh, uh)


@dataclass
class JumpEvent:
    time: float
    e_minus: np.ndarray
    e_plus: np.ndarray
    du: np.ndarray
    level_minus: float
    level_plus: float
    residual: float

    def row(self) -> list[float]:
        return (
            [self.time]
            + self.e_minus.tolist()
            + self.e_plus.tolist()
            + self.du.tolist()
            + [self.level_minus, self.level_plus, self.residual]
        )


@dataclass
class SimTrace:
    """Samples at every integration substep plus the jump record."""

    system_name: str
    gamma: float
    error_names: tuple[str, ...]
    times: np.ndarray
    x: np.ndarray
    xh: np.ndarray
    uh: np.ndarray
    u: np.ndarray
    e: np.ndarray
    V: np.ndarray
    in_funnel: np.ndarray
    obstacle_distance: np.ndarray
    positions: tuple[int, ...] = (0, 1)
    jumps: list[JumpEvent] = field(default_factory=list)
    plan_steps: list[PlanStep] = field(default_factory=list)
    saturations: int = 0
    reached: bool = False
    goal_time: float | None = None
    aborted: bool = False
    message: str = ""

    def __len__(self) -> int:
        return len(self.times)

    def columns(self) -> list[str]:
        def names(prefix, count):
            return [f"{prefix}{i + 1}" for i in range(count)]

        return (
            ["t"]
            + names("x", self.x.shape[1])
            + names("xh", self.xh.shape[1])
            + names("uh", self.uh.shape[1])
            + names("u", self.u.shape[1])
            + list(self.error_names)
            + ["V", "in_funnel", "min_obst_dist"]
        )

    def rows(self) -> list[list[float]]:
        table = np.concatenate(
            [
                self.times[:, None],
                self.x,
                self.xh,
                self.uh,
                self.u,
                self.e,
                self.V[:, None],
                self.in_funnel[:, None].astype(float),
                self.obstacle_distance[:, None],
            ],
            axis=1,
        )
        return table.tolist()

    def jump_columns(self) -> list[str]:
        m = self.uh.shape[1]
        return (
            ["t"]
            + [f"{e}_minus" for e in self.error_names]
            + [f"{e}_plus" for e in self.error_names]
            + [f"du{i + 1}" for i in range(m)]
            + ["V_minus", "V_plus", "jump_residual"]
        )

    def jump_rows(self) -> list[list[float]]:
        return [j.row() for j in self.jumps]


# Simulation


class _ClosedLoop:
    """Numeric pieces of one run, compiled once."""

    def __init__(self, config: SimConfig):
        system, funnel = config.system, config.funnel
        self.config = config
        self.system = system
        self.funnel = funnel
        planner = system.planner
        n_xh = len(planner.state)
        slots = []
        for v in funnel.planner_variables:
            if v in planner.state:
                slots.append(planner.state.index(v))
            elif v in planner.inputs:
                slots.append(n_xh + planner.inputs.index(v))
            else:
                raise StructuralError(
                    f"Controller variable '{v.name}' is not a planner variable"
                )
        self.slots = np.array(slots, dtype=int)
        self.box = system.tracker.input_box
        self.initial = PolyEvaluator(list(system.initial_set), system.error)
        self.positions = list(system.tracker.position_indices)
        self.obstacle_centers = np.array(
            [o.center for o in config.obstacles], dtype=float
        ).reshape(len(config.obstacles), len(self.positions))
        self.obstacle_radii = np.array([o.radius for o in config.obstacles])

    def control(
        self, tau: float, x: np.ndarray, xh: np.ndarray, uh: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, bool]:
        e = self.system.error_of(x, xh, uh)
        xi = np.concatenate([xh, uh])[self.slots]
        u = self.config.kappa_scale * self.funnel.control(tau, e, xi)
        if not self.config.saturate:
            return u, e, False
        clipped = self.box.clip(u)
        return clipped, e, bool(np.any(np.abs(clipped - u) > 1e-12))

    def level(self, tau: float, e: np.ndarray) -> float:
        return float(self.funnel.storage_value(tau, e))

    def obstacle_distance(self, x: np.ndarray) -> float:
        if not len(self.obstacle_radii):
            return math.inf
        p = x[self.positions]
        d = np.linalg.norm(self.obstacle_centers - p, axis=1)
        return float(np.min(d - self.obstacle_radii))

    def in_initial_set(self, e: np.ndarray) -> bool:
        values = self.initial(e)
        return bool(np.all(values <= INITIAL_SET_TOL))


def simulate(config: SimConfig) -> SimTrace:
    """
    Run the coupled tracker/planner loop.

    The first planner input is ``u0``; at every later sampling instant a
    new input is taken from the MPC or the schedule and the jump
    ``(e-, e+, du)`` is recorded.  Halts on goal entry of the planner
    position, at the duration cap, or when the state stops being finite.

    Raises:
        StructuralError: If the initial error lies outside the initial set
    """
    system, funnel = config.system, config.funnel
    loop = _ClosedLoop(config)
    planner = system.planner
    tracker = system.tracker
    Ts = planner.sampling_time
    h = Ts / config.substeps
    rng = np.random.default_rng(config.seed)
    w_box = tracker.disturbance_box
    n_w = len(tracker.disturbances)

    x = config.initial_state()
    xh = np.asarray(config.xh0, dtype=float)
    uh = np.asarray(config.u0, dtype=float)
    e0 = system.error_of(x, xh, uh)
    if not loop.in_initial_set(e0):
        raise StructuralError(f"Initial error {e0.tolist()} lies outside the initial set")

    goal = config.mpc.goal if config.mpc is not None else None
    planner_positions = list(planner.position_indices)
    periods = int(math.floor(config.duration / Ts + 1e-9))
    samples: dict[str, list] = {
        k: [] for k in ("t", "x", "xh", "uh", "u", "e", "V", "dist")
    }
    trace_extra: dict[str, Any] = {
        "jumps": [], "plan_steps": [], "saturations": 0,
        "reached": False, "goal_time": None, "aborted": False, "message": "",
    }

    def record(t, tau, x, xh, uh):
        u, e, clipped = loop.control(tau, x, xh, uh)
        samples["t"].append(t)
        samples["x"].append(x)
        samples["xh"].append(xh)
        samples["uh"].append(uh)
        samples["u"].append(u)
        samples["e"].append(e)
        samples["V"].append(loop.level(tau, e))
        samples["dist"].append(loop.obstacle_distance(x))
        trace_extra["saturations"] += int(clipped)

    if goal is not None and goal.contains(xh[planner_positions]):
        trace_extra.update(reached=True, goal_time=0.0)
        periods = 0
    if periods == 0:
        record(0.0, 0.0, x, xh, uh)

    warm = None
    for k in range(periods):
        t0 = k * Ts
        if k > 0:
            u_next = uh
            if config.mpc is not None:
                step = solve_mpc(config.mpc, xh, uh, warm_start=warm)
                trace_extra["plan_steps"].append(step)
                warm = np.vstack([step.inputs[1:], step.inputs[-1:]])
                u_next = step.input
            elif config.schedule is not None and len(config.schedule):
                u_next = config.schedule[min(k - 1, len(config.schedule) - 1)]
            du = u_next - uh
            e_minus = system.error_of(x, xh, uh)
            e_plus = system.error_of(x, xh, u_next)
            predicted = system.jump(e_minus, xh, uh, du)
            trace_extra["jumps"].append(
                JumpEvent(
                    time=t0,
                    e_minus=e_minus,
                    e_plus=e_plus,
                    du=du,
                    level_minus=loop.level(Ts, e_minus),
                    level_plus=loop.level(0.0, e_plus),
                    residual=float(np.max(np.abs(e_plus - predicted), initial=0.0)),
                )
            )
            uh = np.asarray(u_next, dtype=float)

        # planner states on the half-substep grid of this period
        grid = [xh]
        for _ in range(2 * config.substeps):
            grid.append(planner.propagate(grid[-1], uh, 0.5 * h))
        w = (
            w_box.sample(rng, 1)[0]
            if n_w and w_box is not None else np.zeros(n_w)
        )

        for i in range(config.substeps):
            tau = i * h
            record(t0 + tau, tau, x, grid[2 * i], uh)

            def rhs(s, state, i=i):
                j = 2 * i + int(round(2.0 * (s - i * h) / h))
                u, _, _ = loop.control(s, state, grid[j], uh)
                return tracker.dynamics(state, u, w)

            x = rk4_step(rhs, tau, x, h)
            if not np.all(np.isfinite(x)):
                trace_extra.update(
                    aborted=True,
                    message=f"Non-finite tracker state at t={t0 + tau + h:.6g}",
                )
                break
        if trace_extra["aborted"]:
            logger.error(trace_extra["message"])
            break
        xh = grid[-1]
        if goal is not None and goal.contains(xh[planner_positions]):
            trace_extra.update(reached=True, goal_time=t0 + Ts)
            break
    if periods and not trace_extra["aborted"]:
        # end of the last period, before any further jump
        t_end = samples["t"][-1] + h
        record(t_end, Ts, x, xh, uh)

    n_u = len(tracker.inputs)

    def stack(key, width):
        return np.array(samples[key], dtype=float).reshape(len(samples["t"]), width)

    V = np.array(samples["V"], dtype=float)
    trace = SimTrace(
        system_name=system.name,
        gamma=float(funnel.gamma),
        error_names=tuple(v.name for v in system.error),
        times=np.array(samples["t"], dtype=float),
        x=stack("x", tracker.n_x),
        xh=stack("xh", len(planner.state)),
        uh=stack("uh", len(planner.inputs)),
        u=stack("u", n_u),
        e=stack("e", system.n_x),
        V=V,
        in_funnel=V <= funnel.gamma * (1.0 + 1e-9) + 1e-12,
        obstacle_distance=np.array(samples["dist"], dtype=float),
        positions=tuple(loop.positions),
        **trace_extra,
    )
    logger.info(
        "Simulated %d samples, %d jumps (reached=%s, aborted=%s)",
        len(trace), len(trace.jumps), trace.reached, trace.aborted,
    )
    return trace


# Audit


@dataclass
class AuditReport:
    max_ratio: float
    funnel_violations: int
    first_violation_time: float | None
    jump_violations: int
    max_jump_residual: float
    teb_violations: int
    teb_worst_margin: float | None
    first_teb_violation_time: float | None
    min_obstacle_distance: float
    goal_time: float | None
    reached: bool
    saturations: int
    aborted: bool
    samples: int

    @property
    def violations(self) -> int:
        return self.funnel_violations + self.jump_violations + self.teb_violations

    def to_dict(self) -> dict[str, Any]:
        def finite(v):
            return v if v is None or math.isfinite(v) else None

        return {
            "max_ratio": finite(self.max_ratio),
            "funnel_violations": self.funnel_violations,
            "first_violation_time": self.first_violation_time,
            "jump_violations": self.jump_violations,
            "max_jump_residual": self.max_jump_residual,
            "teb_violations": self.teb_violations,
            "teb_worst_margin": finite(self.teb_worst_margin),
            "first_teb_violation_time": self.first_teb_violation_time,
            "min_obstacle_distance": finite(self.min_obstacle_distance),
            "goal_time": self.goal_time,
            "reached": self.reached,
            "saturations": self.saturations,
            "aborted": self.aborted,
            "samples": self.samples,
            "violations": self.violations,
        }


def teb_margin(teb: Teb, points: np.ndarray) -> np.ndarray:
    """Signed membership margin, ``<= 0`` inside."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if teb.shape is TebShape.ELLIPSOID:
        return np.einsum("ni,ij,nj->n", points, teb.P, points) - 1.0
    return np.max(points @ teb.A.T - teb.b, axis=1)


def audit(
    trace: SimTrace,
    funnel: Funnel,
    teb: Teb | None = None,
    obstacles: Sequence[Obstacle] = (),
    *,
    slack: float = 1e-6,
) -> AuditReport:
    """
    Funnel, jump and TEB membership along a trace.

    ``obstacles`` are the true obstacles; the reported distance is from
    the tracker position to their boundary.
    """
    gamma = funnel.gamma
    limit = gamma + slack
    over = trace.V > limit
    first = float(trace.times[np.argmax(over)]) if np.any(over) else None
    ratios = trace.V / gamma if gamma > 0 else np.full(len(trace), math.inf)
    jump_levels = np.array(
        [max(j.level_minus, j.level_plus) for j in trace.jumps], dtype=float
    )
    jump_over = jump_levels > limit
    if np.any(jump_over) and first is None:
        first = trace.jumps[int(np.argmax(jump_over))].time
    max_ratio = float(np.max(ratios, initial=0.0))
    if len(jump_levels) and gamma > 0:
        max_ratio = max(max_ratio, float(np.max(jump_levels)) / gamma)

    teb_violations, worst, first_teb = 0, None, None
    if teb is not None and len(trace):
        idx = [trace.error_names.index(c) for c in teb.coordinates]
        margins = teb_margin(teb, trace.e[:, idx])
        outside = margins > slack
        teb_violations = int(np.sum(outside))
        worst = float(np.max(margins))
        if teb_violations:
            first_teb = float(trace.times[np.argmax(outside)])

    distance = math.inf
    if obstacles and len(trace):
        positions = trace.x[:, list(trace.positions)]
        distance = float(
            min(np.min(o.distance(positions) - o.radius) for o in obstacles)
        )

    report = AuditReport(
        max_ratio=max_ratio,
        funnel_violations=int(np.sum(over)),
        first_violation_time=first,
        jump_violations=int(np.sum(jump_over)),
        max_jump_residual=float(
            max((j.residual for j in trace.jumps), default=0.0)
        ),
        teb_violations=teb_violations,
        teb_worst_margin=worst,
        first_teb_violation_time=first_teb,
        min_obstacle_distance=distance,
        goal_time=trace.goal_time,
        reached=trace.reached,
        saturations=trace.saturations,
        aborted=trace.aborted,
        samples=len(trace),
    )
    logger.info(
        "Audit: max V/gamma %.4f, %d funnel, %d jump, %d TEB violations",
        report.max_ratio, report.funnel_violations,
        report.jump_violations, report.teb_violations,
    )
    return report


# Monte Carlo


def sample_initial_errors(
    system: ErrorSystem, rng: np.random.Generator, count: int
) -> np.ndarray:
    """Uniform-radius draws along random rays of the initial set."""
    initial = PolyEvaluator(list(system.initial_set), system.error)

    def value(points):
        return np.max(initial(points), axis=-1)

    d = rng.normal(size=(count, system.n_x))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = ray_boundary(value, d, 0.0)
    scale = rng.uniform(0.0, 1.0, count) ** (1.0 / system.n_x)
    return (radius * scale)[:, None] * d


def _run_one(config: SimConfig, funnel: Funnel, teb: Teb | None) -> dict[str, Any]:
    trace = simulate(config)
    report = audit(trace, funnel, teb, config.obstacles).to_dict()
    report["seed"] = config.seed
    return report


def monte_carlo(
    config: SimConfig,
    runs: int,
    *,
    teb: Teb | None = None,
    seed: int = 0,
    workers: int = 1,
    random_inputs: bool = True,
) -> list[dict[str, Any]]:
    """
    Audits of ``runs`` independent closed-loop runs.

    Each run draws its initial error from the initial set and, with
    ``random_inputs``, a random admissible input-jump sequence in place
    of the configured planner source.  Results keep run order.
    """
    children = np.random.SeedSequence(seed).spawn(runs)
    periods = max(1, int(math.floor(config.duration / config.system.sampling_time)))
    configs = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        e0 = sample_initial_errors(config.system, rng, 1)[0]
        overrides: dict[str, Any] = {
            "x0": None, "e0": e0, "seed": seed + index,
        }
        if random_inputs:
            overrides["mpc"] = None
            overrides["schedule"] = random_schedule(
                config.system.planner, config.u0, periods, rng
            )
        configs.append(replace(config, **overrides))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(lambda c: _run_one(c, config.funnel, teb), configs)
        )
    failing = sum(1 for r in results if r["violations"])
    logger.info("Monte Carlo: %d/%d runs with violations", failing, runs)
    return results
