"""
Funnel synthesis pipelines, tracking-error-bound extraction and safety
checks.

A :class:`FunnelTemplate` instantiates the storage/controller SOS
programs for one error system; :mod:`tracking_funnels.bilinear` drives
the alternation.  Time-invariant synthesis is the same template without
the time variable and without the jump constraint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from scipy.optimize import linprog

from tracking_funnels.bilinear import (
    AlternationReport,
    Group,
    StepProgram,
    alternate,
    initialize_v0,
    lqr_seed,
    lyapunov_seed,
    time_varying_seed,
)
from tracking_funnels.conic import SolverSettings
from tracking_funnels.errors import (
    AlternationError,
    InitializationError,
    SolverRefusal,
    StructuralError,
)
from tracking_funnels.models import (
    AtomKind,
    BoxSet,
    ErrorSystem,
    NumericField,
)
from tracking_funnels.poly import (
    Polynomial,
    PolyEvaluator,
    Variable,
    VariableRegistry,
)
from tracking_funnels.sosprog import (
    EPSILON,
    AffinePoly,
    Antecedent,
    MultiplierKind,
    SosProgram,
    SProcedure,
    box_antecedents,
    solve_program,
)

logger = logging.getLogger(__name__)

SAFETY_TOL = 1e-6
DEFAULT_SCHEDULE = (1.0, 0.9, 0.8, 0.7, 0.6)


@dataclass(frozen=True)
class SynthesisDegrees:
    """Total degrees of the decision polynomials."""

    storage: int = 2
    storage_time: int = 1
    controller: int = 2
    multiplier: int = 2
    epsilon: float = EPSILON


@dataclass(frozen=True)
class SynthesisOptions:
    degrees: SynthesisDegrees = field(default_factory=SynthesisDegrees)
    gamma_seed: float = 1.0
    alpha: float = 0.1
    iterations: int = 10
    init_iterations: int = 10
    seed_gain: tuple[tuple[float, ...], ...] | None = None
    lqr_state_weight: tuple[float, ...] | None = None
    lqr_input_weight: tuple[float, ...] | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)


# Template


@dataclass
class _Implication:
    label: str
    set_poly: AffinePoly | Polynomial
    kind: MultiplierKind = MultiplierKind.SOS
    multiplier: Polynomial | None = None
    output: str | None = None


def _degree(expr: AffinePoly | Polynomial) -> int:
    return expr.degree() if not expr.is_zero() else 0


class FunnelTemplate:
    """
    Storage/controller SOS programs for one error system.

    Decisions bilinear in V (controller, ``l``, the input-bound and jump
    multipliers on ``V - gamma``) form the controller group.
    """

    def __init__(
        self,
        system: ErrorSystem,
        degrees: SynthesisDegrees | None = None,
        *,
        time_varying: bool = True,
        include_jump: bool = True,
    ):
        self.system = system
        self.degrees = degrees or SynthesisDegrees()
        self.time_varying = time_varying
        self.include_jump = include_jump
        self.registry: VariableRegistry = system.registry
        self.name = f"{system.name}-{'funnel' if time_varying else 'invariant'}"
        self.error = system.error
        self.time: Variable | None = system.time if time_varying else None
        self.planner_vars = system.planner_variables()
        self.jump_planner_vars = system.jump_planner_variables()
        self.disturbances = tuple(
            v for v in system.tracker.disturbances
            if any(p.depends_on(v) for p in system.f_e)
        )
        self.kappa_vars = (
            ((self.time,) if self.time else ()) + self.error + self.planner_vars
        )
        n_u = system.n_u
        groups = [f"kappa{i + 1}" for i in range(n_u)] + ["l"]
        groups += [f"s_upper{i + 1}" for i in range(n_u)]
        groups += [f"s_lower{i + 1}" for i in range(n_u)]
        if include_jump:
            groups.append("s_jump")
        self.controller_group = tuple(groups)
        self.storage_group = ("V",)

    # Helpers

    def _e_polys(self) -> list[Polynomial]:
        return self.registry.polys(self.error)

    def _norm2(self) -> Polynomial:
        acc = self.registry.zero()
        for e in self._e_polys():
            acc = acc + e * e
        return acc

    def _time_set(self) -> list[_Implication]:
        if self.time is None:
            return []
        t = self.registry.poly(self.time)
        return [_Implication("time", t * t - self.system.sampling_time * t)]

    def _box_sets(self, box: BoxSet | None, label: str) -> list[_Implication]:
        if box is None:
            return []
        return [
            _Implication(f"{label}{k + 1}", p)
            for k, p in enumerate(box.polynomials(self.registry))
        ]

    def _planner_sets(self, variables: Sequence[Variable]) -> list[_Implication]:
        if not variables:
            return []
        return self._box_sets(self.system.planner_box(variables), "planner")

    def _at_time(self, V, value: float):
        if self.time is None:
            return V
        return V.substitute({self.time: value})

    def _implies(
        self,
        prog: SosProgram,
        name: str,
        consequent: AffinePoly | Polynomial,
        items: Sequence[_Implication],
        outputs: dict[str, AffinePoly],
    ) -> SProcedure:
        """
        S-procedure with multiplier degrees matched to the consequent.

        All products ``s_i p_i`` reach a common even target degree.
        """
        base = self.degrees.multiplier
        target = _degree(consequent)
        for item in items:
            if item.multiplier is None:
                target = max(target, _degree(item.set_poly) + base)
            else:
                target = max(
                    target, _degree(item.set_poly) + _degree(item.multiplier)
                )
        target += target % 2
        antecedents = []
        for item in items:
            deg = max(target - _degree(item.set_poly), 0)
            if item.kind is MultiplierKind.SOS:
                deg -= deg % 2
            antecedents.append(
                Antecedent(
                    item.set_poly,
                    item.kind,
                    degree=deg,
                    multiplier=item.multiplier,
                    label=item.label,
                )
            )
        sp = prog.s_procedure_implication(antecedents, consequent, name=name)
        for item, decision in zip(items, sp.multipliers):
            if item.output and decision is not None:
                outputs[item.output] = decision.poly
        return sp

    def _declare_storage(self, prog: SosProgram) -> AffinePoly:
        d = self.degrees.storage
        V = prog.declare_poly("V0", self.error, d, min_degree=2).poly
        if self.time is None:
            return V
        t = self.registry.poly(self.time)
        for k in range(1, min(self.degrees.storage_time, d) + 1):
            part = prog.declare_poly(f"V{k}", self.error, d - k).poly
            V = V + part * t**k
        return V

    def _trace(self, V: AffinePoly) -> AffinePoly:
        slices = (
            [V]
            if self.time is None
            else [self._at_time(V, 0.0), self._at_time(V, self.system.sampling_time)]
        )
        squares = set()
        for e in self.error:
            exponent = [0] * (e.index + 1)
            exponent[e.index] = 2
            squares.add(tuple(exponent))
        merged: dict[int, float] = {}
        for part in slices:
            for exponent, coeffs in part.items():
                if exponent in squares:
                    for h, c in coeffs.items():
                        merged[h] = merged.get(h, 0.0) + c
        return AffinePoly(self.registry, {(): merged})

    def decrease_expression(
        self,
        V: AffinePoly | Polynomial,
        kappa: Sequence[AffinePoly | Polynomial],
    ) -> AffinePoly:
        """``dV/dt`` along ``f_e + g_e kappa``; at most one side decided."""
        V = AffinePoly.lift(V, self.registry)
        total = (
            V.differentiate(self.time) if self.time is not None
            else AffinePoly(self.registry)
        )
        for i, e in enumerate(self.error):
            flow = AffinePoly.lift(self.system.f_e[i], self.registry)
            for c, k in enumerate(kappa):
                flow = flow + AffinePoly.lift(k, self.registry) * self.system.g_e[i][c]
            total = total + V.differentiate(e) * flow
        return total

    # Bilinear interface

    def build(
        self,
        decide: Group,
        fixed: Mapping[str, Polynomial],
        gamma: float,
        *,
        relaxed: bool = False,
        reference: Polynomial | None = None,
    ) -> StepProgram:
        system = self.system
        prog = SosProgram(self.registry, name=f"{self.name}-{decide.value}")
        outputs: dict[str, AffinePoly] = {}
        lam = None
        if relaxed:
            lam = prog.scalar("lambda")
            floor = prog.scalar("lambda_floor", nonnegative=True)
            prog.assert_zero(lam + 1.0 - floor, name="lambda_bound")

        def relax(expr):
            return expr + lam if lam is not None else expr

        n_u = system.n_u
        deciding_storage = decide is Group.STORAGE
        if deciding_storage:
            V = self._declare_storage(prog)
            kappa = [fixed[f"kappa{i + 1}"] for i in range(n_u)]
            outputs["V"] = V
        else:
            V = AffinePoly.lift(fixed["V"], self.registry)
            kappa = []
            for i in range(n_u):
                k = prog.declare_poly(
                    f"kappa{i + 1}", self.kappa_vars, self.degrees.controller
                ).poly
                outputs[f"kappa{i + 1}"] = k
                kappa.append(k)
        level = V - gamma

        def bilinear(label: str, kind=MultiplierKind.SOS) -> _Implication:
            if deciding_storage:
                return _Implication(
                    label, level, kind, multiplier=fixed[label]
                )
            return _Implication(label, level, kind, output=label)

        e2 = self._norm2()

        self._implies(
            prog,
            "initial",
            relax(gamma - self._at_time(V, 0.0)),
            [
                _Implication(f"initial{k + 1}", p)
                for k, p in enumerate(system.initial_set)
            ],
            outputs,
        )
        if deciding_storage:
            self._implies(
                prog,
                "positive",
                V - self.degrees.epsilon * e2,
                self._time_set(),
                outputs,
            )
            if reference is not None:
                ref_level = reference - gamma
                self._implies(
                    prog,
                    "containment",
                    level - self.degrees.epsilon * ref_level,
                    [_Implication("outside", -ref_level)] + self._time_set(),
                    outputs,
                )

        dV = self.decrease_expression(V, kappa)
        self._implies(
            prog,
            "decrease",
            relax(-dV - self.degrees.epsilon * e2),
            [bilinear("l", MultiplierKind.FREE)]
            + self._time_set()
            + self._planner_sets(self.planner_vars)
            + self._box_sets(
                system.tracker.disturbance_box if self.disturbances else None,
                "disturbance",
            ),
            outputs,
        )

        # Input bounds per channel.
        box = system.tracker.input_box
        for i in range(n_u):
            shared = self._time_set() + self._planner_sets(self.planner_vars)
            self._implies(
                prog,
                f"upper{i + 1}",
                relax(box.upper[i] - kappa[i]),
                [bilinear(f"s_upper{i + 1}")] + shared,
                outputs,
            )
            self._implies(
                prog,
                f"lower{i + 1}",
                relax(kappa[i] - box.lower[i]),
                [bilinear(f"s_lower{i + 1}")] + list(shared),
                outputs,
            )

        # Sampling-instant jump.
        if self.include_jump:
            h_bindings = dict(zip(self.error, system.h))
            V0 = self._at_time(V, 0.0)
            after = V0.substitute(h_bindings)
            end_level = self._at_time(V, system.sampling_time) - gamma
            jump_item = (
                _Implication("s_jump", end_level, multiplier=fixed["s_jump"])
                if deciding_storage
                else _Implication("s_jump", end_level, output="s_jump")
            )
            self._implies(
                prog,
                "jump",
                relax(gamma - after),
                [jump_item]
                + self._box_sets(system.planner.jump_box, "jump")
                + self._planner_sets(self.jump_planner_vars),
                outputs,
            )

        if lam is not None:
            prog.minimize(lam)
        elif deciding_storage:
            prog.minimize(self._trace(V))
        return StepProgram(prog, outputs, lam)

    def gamma_floor(self, storage: Polynomial) -> float:
        """Least level whose sublevel set contains the initial set."""
        prog = SosProgram(self.registry, name=f"{self.name}-floor")
        g = prog.scalar("gamma")
        self._implies(
            prog,
            "initial",
            g - self._at_time(storage, 0.0),
            [
                _Implication(f"initial{k + 1}", p)
                for k, p in enumerate(self.system.initial_set)
            ],
            {},
        )
        prog.minimize(g)
        outcome = solve_program(prog)
        if not outcome.feasible:
            return 0.0
        return max(outcome.certificates.scalar("gamma"), 0.0)


# Funnel


def _digest(payload: Mapping[str, Any]) -> str:
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Funnel:
    """Certified storage function, level and tracking controller."""

    storage: Polynomial
    gamma: float
    sampling_time: float
    controller: tuple[Polynomial, ...]
    error: tuple[Variable, ...]
    time: Variable | None
    planner_variables: tuple[Variable, ...]
    multipliers: dict[str, Polynomial] = field(default_factory=dict)
    report: AlternationReport | None = None
    system_name: str = ""
    epsilon: float = EPSILON
    _cache: dict[str, Any] = field(default_factory=dict, init=False, repr=False)

    @property
    def time_varying(self) -> bool:
        return self.time is not None and self.storage.depends_on(self.time)

    @property
    def registry(self) -> VariableRegistry:
        return self.storage.registry

    def _inputs(self) -> tuple[Variable, ...]:
        head = (self.time,) if self.time is not None else ()
        return head + self.error + self.planner_variables

    def storage_value(self, t: Any, e: np.ndarray) -> np.ndarray:
        """``V(t, e)``; ``e`` has the error coordinates on its last axis."""
        e = np.asarray(e, dtype=float)
        if "storage" not in self._cache:
            head = (self.time,) if self.time is not None else ()
            self._cache["storage"] = PolyEvaluator([self.storage], head + self.error)
        if self.time is not None:
            tt = np.broadcast_to(np.asarray(t, dtype=float), e.shape[:-1])
            e = np.concatenate([tt[..., None], e], axis=-1)
        return self._cache["storage"](e)[..., 0]

    def control(
        self, t: float, e: np.ndarray, planner_values: np.ndarray
    ) -> np.ndarray:
        """
        ``kappa(t, e, xi)`` with ``planner_values`` ordered as
        ``planner_variables``.
        """
        if "control" not in self._cache:
            self._cache["control"] = PolyEvaluator(
                list(self.controller), self._inputs()
            )
        head = [float(t)] if self.time is not None else []
        point = np.concatenate(
            [head, np.asarray(e, dtype=float), np.asarray(planner_values, dtype=float)]
        )
        return self._cache["control"](point)

    def to_dict(self) -> dict[str, Any]:
        body = {
            "system": self.system_name,
            "storage": self.storage.to_terms(),
            "gamma": float(self.gamma),
            "sampling_time": float(self.sampling_time),
            "controller": [k.to_terms() for k in self.controller],
            "error": [v.name for v in self.error],
            "time": self.time.name if self.time is not None else None,
            "planner_variables": [v.name for v in self.planner_variables],
            "epsilon": float(self.epsilon),
            "multipliers": {
                name: p.to_terms() for name, p in sorted(self.multipliers.items())
            },
        }
        body["digest"] = _digest(body)
        return body

    @classmethod
    def from_dict(
        cls, data: Mapping[str, Any], registry: VariableRegistry
    ) -> Funnel:
        digest = data.get("digest")
        if digest is not None:
            body = {k: v for k, v in data.items() if k != "digest"}
            if _digest(body) != digest:
                raise StructuralError("Funnel document digest does not match")
        try:
            time_name = data.get("time")
            return cls(
                storage=Polynomial.from_terms(registry, data["storage"]),
                gamma=float(data["gamma"]),
                sampling_time=float(data["sampling_time"]),
                controller=tuple(
                    Polynomial.from_terms(registry, k) for k in data["controller"]
                ),
                error=tuple(registry.var(n) for n in data["error"]),
                time=registry.var(time_name) if time_name else None,
                planner_variables=tuple(
                    registry.var(n) for n in data.get("planner_variables", [])
                ),
                multipliers={
                    name: Polynomial.from_terms(registry, terms)
                    for name, terms in data.get("multipliers", {}).items()
                },
                system_name=data.get("system", ""),
                epsilon=float(data.get("epsilon", EPSILON)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise StructuralError(f"Malformed funnel document: {e}") from e


def _seed_storage(
    system: ErrorSystem, options: SynthesisOptions, time_varying: bool
) -> Polynomial:
    A, B = system.linearize()
    if options.seed_gain is not None:
        K = np.asarray(options.seed_gain, dtype=float)
        P = lyapunov_seed(A - B @ K, options.alpha)
    else:
        Q = (
            np.diag(options.lqr_state_weight)
            if options.lqr_state_weight is not None else None
        )
        R = (
            np.diag(options.lqr_input_weight)
            if options.lqr_input_weight is not None else None
        )
        P, _ = lqr_seed(A, B, Q, R)
    if not time_varying:
        return time_varying_seed(
            system.registry, system.error, system.time, P, 0.0
        )
    return time_varying_seed(
        system.registry,
        system.error,
        system.time,
        P,
        options.alpha,
        total_degree=options.degrees.storage,
        gamma=options.gamma_seed,
    )


def _run_pipeline(
    template: FunnelTemplate,
    options: SynthesisOptions,
    seed: Polynomial | None,
) -> Funnel:
    system = template.system
    seed = seed or _seed_storage(system, options, template.time_varying)
    report = AlternationReport()
    start = initialize_v0(
        template,
        seed,
        options.gamma_seed,
        max_iterations=options.init_iterations,
        settings=options.solver,
        report=report,
    )
    best, report = alternate(
        template,
        start,
        options.iterations,
        settings=options.solver,
        report=report,
    )
    kappa = tuple(
        best.controller[f"kappa{i + 1}"] for i in range(system.n_u)
    )
    multipliers = {
        k: v for k, v in best.controller.items() if not k.startswith("kappa")
    }
    logger.info(
        "Synthesized %s: gamma=%.6g after %d solves (%s)",
        template.name, best.gamma, len(report.records), report.termination,
    )
    return Funnel(
        storage=best.storage,
        gamma=best.gamma,
        sampling_time=system.sampling_time,
        controller=kappa,
        error=system.error,
        time=template.time,
        planner_variables=template.planner_vars,
        multipliers=multipliers,
        report=report,
        system_name=system.name,
        epsilon=template.degrees.epsilon,
    )


def synthesize_invariant(
    system: ErrorSystem,
    options: SynthesisOptions | None = None,
    *,
    seed: Polynomial | None = None,
) -> Funnel:
    """
    Time-invariant tracking funnel (no sampling jump).

    Args:
        system: Error system whose comparison map ignores the planner input
        options: Degrees, seed level and iteration caps
        seed: Starting storage (LQR on the linearization by default)

    Returns:
        Funnel: Certified t-free storage, level and controller

    Raises:
        StructuralError: If pi depends on the planner input
        InitializationError: If the relaxed programs cannot reach lambda <= 0
        AlternationError: If the first level-minimizing step fails
    """
    options = options or SynthesisOptions()
    planner_inputs = set(system.planner.inputs)
    if any(v in planner_inputs for p in system.maps.pi for v in p.variables()):
        raise StructuralError(
            "Time-invariant synthesis needs a comparison map that does not "
            "depend on the planner input; use synthesize_funnel"
        )
    degrees = SynthesisDegrees(
        storage=options.degrees.storage,
        storage_time=0,
        controller=options.degrees.controller,
        multiplier=options.degrees.multiplier,
        epsilon=options.degrees.epsilon,
    )
    template = FunnelTemplate(
        system, degrees, time_varying=False, include_jump=False
    )
    return _run_pipeline(template, options, seed)


def synthesize_funnel(
    system: ErrorSystem,
    options: SynthesisOptions | None = None,
    *,
    seed: Polynomial | None = None,
) -> Funnel:
    """
    Time-varying funnel over one sampling period with the jump condition.

    The same funnel applies on every period after shifting time.
    """
    options = options or SynthesisOptions()
    template = FunnelTemplate(system, options.degrees)
    return _run_pipeline(template, options, seed)


# Tracking error bounds


class TebShape(str, Enum):
    BOX = "box"
    ELLIPSOID = "ellipsoid"
    POLYTOPE = "polytope"


@dataclass
class Teb:
    """Set containing every funnel slice, on a subset of error coordinates."""

    shape: TebShape
    coordinates: tuple[str, ...]
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    P: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return len(self.coordinates)

    def extents(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box ``(lower, upper)``."""
        k = self.dimension
        if self.shape is TebShape.ELLIPSOID:
            half = np.sqrt(np.diag(np.linalg.inv(self.P)))
            return -half, half
        if self.shape is TebShape.BOX:
            return -np.asarray(self.b[k:]), np.asarray(self.b[:k])
        lower, upper = np.zeros(k), np.zeros(k)
        for i in range(k):
            for sign, out in ((1.0, upper), (-1.0, lower)):
                c = np.zeros(k)
                c[i] = -sign
                res = linprog(
                    c, A_ub=self.A, b_ub=self.b, bounds=[(None, None)] * k,
                    method="highs",
                )
                out[i] = -res.fun * sign if res.status == 0 else sign * np.inf
        return lower, upper

    def half_widths(self) -> np.ndarray:
        lower, upper = self.extents()
        return np.maximum(np.abs(lower), np.abs(upper))

    def bound(self, coordinate: str) -> float:
        return float(self.half_widths()[self.coordinates.index(coordinate)])

    def position_bound(
        self, coordinates: Sequence[str], norm: str = "inf"
    ) -> float:
        """Largest deviation of the listed coordinates in the given norm."""
        idx = [self.coordinates.index(c) for c in coordinates]
        if not idx:
            return 0.0
        if norm == "inf":
            return float(np.max(self.half_widths()[idx]))
        if norm != "2":
            raise StructuralError(f"Unknown norm '{norm}'")
        if self.shape is TebShape.ELLIPSOID:
            inv = np.linalg.inv(self.P)[np.ix_(idx, idx)]
            return float(math.sqrt(max(np.linalg.eigvalsh(inv)[-1], 0.0)))
        return float(np.linalg.norm(self.half_widths()[idx]))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shape is TebShape.ELLIPSOID:
            q = np.einsum("ni,ij,nj->n", points, self.P, points)
            return q <= 1.0 + tol
        return np.all(points @ self.A.T <= self.b + tol, axis=1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lower, upper = self.extents()
        out = []
        while sum(len(o) for o in out) < count:
            batch = rng.uniform(lower, upper, size=(count, self.dimension))
            out.append(batch[self.contains(batch)])
        return np.concatenate(out)[:count]

    def polynomials(self, registry: VariableRegistry) -> list[Polynomial]:
        """Defining inequalities ``p <= 0``."""
        e = registry.polys(self.coordinates)
        if self.shape is TebShape.ELLIPSOID:
            acc = registry.zero()
            for i in range(self.dimension):
                for j in range(self.dimension):
                    if self.P[i, j]:
                        acc = acc + float(self.P[i, j]) * e[i] * e[j]
            return [acc - 1.0]
        if self.shape is TebShape.BOX:
            lower, upper = self.extents()
            return [
                (x - lo) * (x - hi) for x, lo, hi in zip(e, lower, upper)
            ]
        out = []
        for row, rhs in zip(self.A, self.b):
            acc = registry.constant(-float(rhs))
            for a, x in zip(row, e):
                if a:
                    acc = acc + float(a) * x
            out.append(acc)
        return out

    def to_dict(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "shape": self.shape.value,
            "coordinates": list(self.coordinates),
        }
        if self.shape is TebShape.ELLIPSOID:
            body["P"] = self.P.tolist()
        else:
            body["A"] = self.A.tolist()
            body["b"] = self.b.tolist()
        lower, upper = self.extents()
        body["lower"] = lower.tolist()
        body["upper"] = upper.tolist()
        return body

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Teb:
        try:
            shape = TebShape(data["shape"])
            coords = tuple(data["coordinates"])
            if shape is TebShape.ELLIPSOID:
                return cls(shape, coords, P=np.array(data["P"], dtype=float))
            return cls(
                shape,
                coords,
                A=np.array(data["A"], dtype=float),
                b=np.array(data["b"], dtype=float),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise StructuralError(f"Malformed TEB document: {e}") from e


def box_directions(dimension: int) -> np.ndarray:
    return np.vstack([np.eye(dimension), -np.eye(dimension)])


def _slice_items(
    funnel: Funnel, sampling_time: float
) -> tuple[list[Antecedent], Polynomial]:
    registry = funnel.registry
    level = funnel.storage - funnel.gamma
    items = [Antecedent(level, label="level")]
    if funnel.time is not None:
        t = registry.poly(funnel.time)
        items.append(Antecedent(t * t - sampling_time * t, label="time"))
    return items, level


def _with_degrees(
    items: Sequence[Antecedent], consequent_degree: int, base: int
) -> list[Antecedent]:
    target = consequent_degree
    for item in items:
        target = max(target, item.set_poly.degree() + base)
    target += target % 2
    out = []
    for item in items:
        deg = max(target - item.set_poly.degree(), 0)
        if item.kind is MultiplierKind.SOS:
            deg -= deg % 2
        out.append(
            Antecedent(item.set_poly, item.kind, degree=deg, label=item.label)
        )
    return out


def extract_teb(
    funnel: Funnel,
    shape: TebShape | str = TebShape.BOX,
    *,
    coordinates: Sequence[str] | None = None,
    directions: np.ndarray | None = None,
    multiplier_degree: int = 2,
    settings: SolverSettings | None = None,
) -> Teb:
    """
    Tightest set of the requested shape containing every funnel slice.

    Box and polytope bounds minimize ``sum(b)`` for fixed directions; the
    ellipsoid maximizes ``det(P)^(1/k)`` through a geometric-mean chain of
    2x2 LMIs.

    Args:
        funnel: Certified funnel
        shape: ``box``, ``ellipsoid`` or ``polytope``
        coordinates: Error coordinates to bound (all by default)
        directions: Polytope rows (required for ``polytope``)
        multiplier_degree: Degree of the S-procedure multipliers
        settings: Interior-point settings

    Returns:
        Teb: The certified bound

    Raises:
        SolverRefusal: If the containment program is not solved
    """
    shape = TebShape(shape)
    registry = funnel.registry
    names = tuple(coordinates or [v.name for v in funnel.error])
    e = registry.polys(names)
    k = len(names)
    base_items, _ = _slice_items(funnel, funnel.sampling_time)
    prog = SosProgram(registry, name=f"teb-{shape.value}")

    if shape is TebShape.ELLIPSOID:
        P = [[None] * k for _ in range(k)]
        for i in range(k):
            for j in range(i + 1):
                P[i][j] = P[j][i] = prog.scalar(f"P{i}_{j}")
        quad = AffinePoly(registry)
        for i in range(k):
            for j in range(k):
                quad = quad + P[i][j] * (e[i] * e[j])
        consequent = 1.0 - quad
        prog.s_procedure_implication(
            _with_degrees(base_items, 2, multiplier_degree),
            consequent,
            name="contain",
        )
        Z = [[None] * k for _ in range(k)]
        zero = AffinePoly(registry)
        for i in range(k):
            for j in range(k):
                Z[i][j] = prog.scalar(f"Z{i}_{j}") if j <= i else zero
        block = [
            [P[i][j] for j in range(k)] + [Z[i][j] for j in range(k)]
            for i in range(k)
        ] + [
            [Z[j][i] for j in range(k)]
            + [Z[i][i] if i == j else zero for j in range(k)]
            for i in range(k)
        ]
        prog.assert_psd(block, name="det_lmi")
        tau = prog.scalar("tau")
        leaves = [Z[i][i] for i in range(k)]
        width = 1 << max(k - 1, 0).bit_length()
        leaves += [tau] * (width - k)
        level = 0
        while len(leaves) > 1:
            merged = []
            for a, b in zip(leaves[0::2], leaves[1::2]):
                w = prog.scalar(f"g{level}_{len(merged)}")
                prog.assert_psd([[a, w], [w, b]], name=f"gm{level}_{len(merged)}")
                merged.append(w)
            leaves = merged
            level += 1
        gap = prog.scalar("gm_gap", nonnegative=True)
        prog.assert_zero(leaves[0] - tau - gap, name="gm_root")
        prog.maximize(tau)
        outcome = solve_program(prog, settings)
        if not outcome.feasible:
            raise SolverRefusal(
                f"Ellipsoidal bound not certified: {outcome.message}",
                outcome.status,
            )
        certs = outcome.certificates
        Pv = np.array(
            [[certs.scalar(f"P{max(i, j)}_{min(i, j)}") for j in range(k)]
             for i in range(k)]
        )
        return Teb(shape, names, P=Pv)

    if shape is TebShape.BOX:
        directions = box_directions(k)
    elif directions is None:
        raise StructuralError("A polytope bound needs its directions")
    directions = np.asarray(directions, dtype=float)
    if directions.shape[1] != k:
        raise StructuralError("Directions do not match the coordinates")
    bs = []
    for r, row in enumerate(directions):
        b = prog.scalar(f"b{r}")
        bs.append(b)
        linear = registry.zero()
        for a, x in zip(row, e):
            if a:
                linear = linear + float(a) * x
        prog.s_procedure_implication(
            _with_degrees(base_items, 1, multiplier_degree),
            b - linear,
            name=f"row{r}",
        )
    objective = AffinePoly(registry)
    for b in bs:
        objective = objective + b
    prog.minimize(objective)
    outcome = solve_program(prog, settings)
    if not outcome.feasible:
        raise SolverRefusal(
            f"Polytopic bound not certified: {outcome.message}", outcome.status
        )
    values = np.array(
        [outcome.certificates.scalar(f"b{r}") for r in range(len(bs))]
    )
    logger.info("Extracted %s TEB on %s", shape.value, ", ".join(names))
    return Teb(shape, names, A=directions, b=values)


# Safety


@dataclass
class ConstraintMargin:
    index: int
    constraint: str
    certified_margin: float | None
    sampled_max: float | None
    witness: dict[str, float] | None = None
    message: str = ""

    @property
    def safe(self) -> bool:
        return (
            self.certified_margin is not None
            and self.certified_margin >= -SAFETY_TOL
        )


@dataclass
class SafetyVerdict:
    safe: bool
    margins: list[ConstraintMargin]
    shrink_suggestion: float | None = None

    def violated(self) -> list[ConstraintMargin]:
        return [m for m in self.margins if not m.safe]

    def to_dict(self) -> dict[str, Any]:
        return {
            "safe": self.safe,
            "shrink_suggestion": self.shrink_suggestion,
            "margins": [
                {
                    "index": m.index,
                    "constraint": m.constraint,
                    "certified_margin": m.certified_margin,
                    "sampled_max": m.sampled_max,
                    "witness": m.witness,
                    "message": m.message,
                }
                for m in self.margins
            ],
        }


def _trig_identities(
    system: ErrorSystem, expr: Polynomial
) -> list[Antecedent]:
    atoms = system.atoms
    if atoms is None:
        return []
    registry = system.registry
    out = []
    for atom in atoms.atoms_in(expr):
        if atom.kind is AtomKind.RECIPROCAL:
            raise StructuralError(
                f"Cannot certify containment through reciprocal atom "
                f"'{atom.symbol.name}'"
            )
        if atom.kind is AtomKind.COS:
            c = registry.poly(atom.symbol)
            s = registry.poly(atom.partner)
            out.append(
                Antecedent(
                    c * c + s * s - 1.0,
                    MultiplierKind.FREE,
                    label=f"unit_{atom.symbol.name}",
                )
            )
    for atom in atoms.atoms_in(expr):
        if atom.kind is AtomKind.SIN and not expr.depends_on(atom.partner):
            s = registry.poly(atom.symbol)
            out.append(Antecedent(s * s - 1.0, label=f"unit_{atom.symbol.name}"))
    return out


def _sampled_max(
    system: ErrorSystem,
    expr: Polynomial,
    teb: Teb,
    state_box: BoxSet,
    input_box: BoxSet,
    rng: np.random.Generator,
    samples: int,
) -> tuple[float, dict[str, float]]:
    registry = system.registry
    planner = tuple(state_box.variables) + tuple(input_box.variables)
    variables = tuple(registry[n] for n in teb.coordinates) + planner
    fieldfn = NumericField([expr], variables, system.atoms)
    e = teb.sample(rng, samples)
    if teb.shape is TebShape.BOX:
        lower, upper = teb.extents()
        corners = BoxSet.of(
            [registry[n] for n in teb.coordinates], lower, upper
        ).vertices()
        e = np.concatenate([corners, e])
    n = len(e)
    xh = state_box.sample(rng, n)
    uh = input_box.sample(rng, n)
    if state_box.dimension:
        xh[: len(state_box.vertices())] = state_box.vertices()[: n]
    values = fieldfn(np.concatenate([e, xh, uh], axis=1))[:, 0]
    k = int(np.argmax(values))
    point = np.concatenate([e[k], xh[k], uh[k]])
    return float(values[k]), {
        v.name: float(x) for v, x in zip(variables, point)
    }


def check_safety(
    teb: Teb,
    system: ErrorSystem,
    *,
    constraints: Sequence[Polynomial] | None = None,
    state_box: BoxSet | None = None,
    input_box: BoxSet | None = None,
    multiplier_degree: int = 2,
    samples: int = 2000,
    seed: int = 0,
    settings: SolverSettings | None = None,
) -> SafetyVerdict:
    """
    Certify ``nu(O, Xh, Uh)`` inside every tracker constraint ``q(x) <= 0``.

    Each constraint gets the largest margin ``m`` with ``q(nu) + m <= 0``
    certified by the S-procedure; planner trig atoms are bound by
    ``c^2 + s^2 = 1``.  Sampling supplies a witness for failures.

    Returns:
        SafetyVerdict: ``safe`` only when every margin is certified
    """
    registry = system.registry
    planner = system.planner
    state_box = state_box or planner.state_box
    input_box = input_box or planner.input_box
    constraints = (
        list(system.tracker.state_constraints)
        if constraints is None else list(constraints)
    )
    bindings = {x: nu for x, nu in zip(system.tracker.state, system.maps.nu)}
    teb_sets = [
        Antecedent(p, label=f"teb{k + 1}")
        for k, p in enumerate(teb.polynomials(registry))
    ]
    lookup = {}
    for box in (state_box, input_box):
        for v, lo, hi in zip(box.variables, box.lower, box.upper):
            lookup[v] = (lo, hi)
    rng = np.random.default_rng(seed)
    margins: list[ConstraintMargin] = []
    allowed = set(teb.coordinates)
    checkable: list[Polynomial] = []
    for index, q in enumerate(constraints):
        expr = q.substitute(bindings)
        loose = [
            v.name for v in expr.variables()
            if v in system.error and v.name not in allowed
        ]
        if loose:
            margins.append(
                ConstraintMargin(
                    index, q.to_text(), None, None, None,
                    f"Error coordinates {loose} are not bounded by the TEB",
                )
            )
            continue
        checkable.append(q)
        sampled, witness = _sampled_max(
            system, expr, teb, state_box, input_box, rng, samples
        )
        bounded = [v for v in expr.variables() if v in lookup]
        planner_sets = box_antecedents(
            registry,
            bounded,
            [lookup[v][0] for v in bounded],
            [lookup[v][1] for v in bounded],
            label="planner",
        )
        fixed_planner = {
            v: lookup[v][0] for v in expr.variables()
            if v in lookup and lookup[v][1] == lookup[v][0]
        }
        expr = expr.substitute(fixed_planner) if fixed_planner else expr
        try:
            identities = _trig_identities(system, expr)
        except StructuralError as e:
            margins.append(
                ConstraintMargin(index, q.to_text(), None, sampled, witness, str(e))
            )
            continue
        prog = SosProgram(registry, name=f"safety{index}")
        m = prog.scalar("margin")
        items = _with_degrees(
            teb_sets + planner_sets + identities, expr.degree(), multiplier_degree
        )
        prog.s_procedure_implication(items, -expr - m, name="contain")
        prog.maximize(m)
        outcome = solve_program(prog, settings)
        certified = (
            outcome.certificates.scalar("margin") if outcome.feasible else None
        )
        margins.append(
            ConstraintMargin(
                index,
                q.to_text(),
                certified,
                sampled,
                witness if sampled > 0 else None,
                "" if outcome.feasible else outcome.message,
            )
        )
    safe = all(m.safe for m in margins)
    suggestion = None
    if not safe:
        suggestion = _shrink_suggestion(
            system, teb, checkable, bindings, state_box, input_box, rng
        )
    verdict = SafetyVerdict(safe, margins, suggestion)
    logger.info(
        "Safety check: %s (%d constraints)",
        "safe" if safe else "unsafe", len(margins),
    )
    return verdict


def _shrink_suggestion(
    system, teb, constraints, bindings, state_box, input_box, rng
) -> float | None:
    """Largest planner-set scale whose samples satisfy every constraint."""
    for factor in np.arange(0.9, 0.05, -0.1):
        ok = True
        for q in constraints:
            value, _ = _sampled_max(
                system,
                q.substitute(bindings),
                teb,
                state_box.scaled(factor),
                input_box.scaled(factor),
                rng,
                500,
            )
            if value > 0:
                ok = False
                break
        if ok:
            return round(float(factor), 2)
    return None


# Shrink-and-retry


@dataclass
class ShrinkAttempt:
    factor: float
    gamma: float | None
    safe: bool
    message: str = ""
    failure: str | None = None


@dataclass
class ShrinkOutcome:
    funnel: Funnel | None
    teb: Teb | None
    verdict: SafetyVerdict | None
    history: list[ShrinkAttempt]
    system: ErrorSystem

    @property
    def safe(self) -> bool:
        return self.verdict is not None and self.verdict.safe


def shrink_and_retry(
    system: ErrorSystem,
    options: SynthesisOptions | None = None,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
    *,
    time_varying: bool = True,
    teb_shape: TebShape | str = TebShape.BOX,
    teb_coordinates: Sequence[str] | None = None,
    teb_directions: np.ndarray | None = None,
    constraints: Sequence[Polynomial] | None = None,
) -> ShrinkOutcome:
    """
    Synthesize, bound and check; shrink the planner sets until safe.

    Planner state and input boxes are scaled about their centers by each
    factor in turn.

    Raises:
        StructuralError: If the schedule is empty or a factor is outside
            ``(0, 1]``
    """
    if not schedule:
        raise StructuralError("Shrink schedule is empty")
    if any(not 0 < f <= 1 for f in schedule):
        raise StructuralError("Shrink factors must lie in (0, 1]")
    options = options or SynthesisOptions()
    history: list[ShrinkAttempt] = []
    last = ShrinkOutcome(None, None, None, history, system)
    for factor in schedule:
        scaled = system.with_planner_sets(
            system.planner.state_box.scaled(factor),
            system.planner.input_box.scaled(factor),
        )
        logger.info("Synthesis attempt with planner sets scaled by %.2f", factor)
        try:
            if time_varying:
                funnel = synthesize_funnel(scaled, options)
            else:
                funnel = synthesize_invariant(scaled, options)
            teb = extract_teb(
                funnel,
                teb_shape,
                coordinates=teb_coordinates,
                directions=teb_directions,
                multiplier_degree=options.degrees.multiplier,
                settings=options.solver,
            )
        except (InitializationError, AlternationError, SolverRefusal) as e:
            failure = {
                InitializationError: "initialization",
                AlternationError: "alternation",
            }.get(type(e), "solver")
            history.append(
                ShrinkAttempt(float(factor), None, False, str(e), failure)
            )
            continue
        verdict = check_safety(
            teb, scaled, constraints=constraints,
            multiplier_degree=options.degrees.multiplier,
            settings=options.solver,
        )
        history.append(ShrinkAttempt(float(factor), funnel.gamma, verdict.safe))
        last = ShrinkOutcome(funnel, teb, verdict, history, scaled)
        if verdict.safe:
            return last
    logger.warning("Shrink schedule exhausted without a safe funnel")
    return last


# Sampled audits


def ray_boundary(
    value_fn, directions: np.ndarray, level: float, max_radius: float = 1e3
) -> np.ndarray:
    """Radius along each direction where ``value_fn`` first reaches level."""
    lo = np.zeros(len(directions))
    hi = np.full(len(directions), 1e-3)
    for _ in range(60):
        grow = (value_fn(hi[:, None] * directions) < level) & (hi < max_radius)
        if not np.any(grow):
            break
        hi = np.where(grow, hi * 2.0, hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        inside = value_fn(mid[:, None] * directions) < level
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo


def sample_funnel_conditions(
    funnel: Funnel,
    system: ErrorSystem,
    *,
    teb: Teb | None = None,
    samples: int = 10_000,
    seed: int = 0,
    slack: float = 1e-6,
) -> dict[str, Any]:
    """
    Monte-Carlo re-check of the certified conditions on the polynomial
    error system.

    Boundary points of each slice come from bisection along random rays;
    interior points are scaled copies.  Counts a sample as violating when
    it misses a condition by more than ``slack``.

    Returns:
        Violation counts and worst values per condition
    """
    rng = np.random.default_rng(seed)
    registry = system.registry
    n = system.n_x
    Ts = funnel.sampling_time
    t_var = system.time
    xi_vars = funnel.planner_variables
    w_vars = system.tracker.disturbances
    V = funnel.storage

    dV = registry.zero()
    if funnel.time is not None:
        dV = V.differentiate(funnel.time)
    for i, e in enumerate(system.error):
        flow = system.f_e[i]
        for c, k in enumerate(funnel.controller):
            flow = flow + system.g_e[i][c] * k
        dV = dV + V.differentiate(e) * flow
    e2 = registry.zero()
    for ep in registry.polys(system.error):
        e2 = e2 + ep * ep
    dV = dV + funnel.epsilon * e2
    evaluate = PolyEvaluator(
        [dV] + list(funnel.controller),
        (t_var,) + system.error + xi_vars + w_vars,
    )

    def storage_at(t):
        return lambda e: funnel.storage_value(t, e)

    t = (
        rng.uniform(0.0, Ts, samples)
        if funnel.time is not None else np.zeros(samples)
    )
    d = rng.normal(size=(samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = ray_boundary(storage_at(t), d, funnel.gamma)
    e_boundary = radius[:, None] * d
    xi = (
        system.planner_box(xi_vars).sample(rng, samples)
        if xi_vars else np.zeros((samples, 0))
    )
    w = (
        system.tracker.disturbance_box.sample(rng, samples)
        if w_vars and system.tracker.disturbance_box is not None
        else np.zeros((samples, len(w_vars)))
    )
    values = evaluate(np.concatenate([t[:, None], e_boundary, xi, w], axis=1))
    decrease = values[:, 0]

    shrink = rng.uniform(0.0, 1.0, samples) ** (1.0 / n)
    e_inside = e_boundary * shrink[:, None]
    values = evaluate(np.concatenate([t[:, None], e_inside, xi, w], axis=1))
    box = system.tracker.input_box
    u = values[:, 1:]
    excess = np.max(
        np.maximum(u - np.array(box.upper), np.array(box.lower) - u), axis=1
    )

    report: dict[str, Any] = {
        "samples": samples,
        "decrease_violations": int(np.sum(decrease > slack)),
        "worst_decrease": float(np.max(decrease)),
        "input_violations": int(np.sum(excess > slack)),
        "worst_input_excess": float(np.max(excess)),
    }

    if funnel.time is not None:
        radius_end = ray_boundary(storage_at(Ts), d, funnel.gamma)
        e_end = (radius_end * shrink)[:, None] * d
        planner = system.planner
        xh = planner.state_box.sample(rng, samples)
        uh = planner.input_box.sample(rng, samples)
        du = planner.jump_box.sample(rng, samples)
        jump = PolyEvaluator(
            list(system.h),
            system.error + planner.state + planner.inputs + system.jump_inputs,
        )
        after = jump(np.concatenate([e_end, xh, uh, du], axis=1))
        level = funnel.storage_value(0.0, after)
        report["jump_violations"] = int(np.sum(level > funnel.gamma + slack))
        report["worst_jump_level"] = float(np.max(level))

    if teb is not None:
        idx = [system.error.index(registry[c]) for c in teb.coordinates]
        contained = teb.contains(e_inside[:, idx], tol=slack)
        report["teb_violations"] = int(np.sum(~contained))
    report["violations"] = sum(
        v for k, v in report.items() if k.endswith("_violations")
    )
    logger.info(
        "Sampled %d points: %d violations", samples, report["violations"]
    )
    return report
