"""
Shared fixtures: small error systems and analytic funnels that need no
SOS solve.
"""

from pathlib import Path

import numpy as np
import pytest

from tracking_funnels import artifacts
from tracking_funnels.bilinear import lyapunov_seed, quadratic_storage
from tracking_funnels.models import inline_error_system, integrator_error_system
from tracking_funnels.settings import OUTPUT_DIR_ENV, WORKERS_ENV, reset_settings
from tracking_funnels.synthesis import Funnel, Teb, TebShape

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

# Gains of the analytic integrator controller u = -k1 e1 - k2 e2.
GAINS = (1.0, 2.0)

INTERVAL_DEFINITION = {
    "drift": ["0"],
    "input_matrix": [["1"]],
    "input_bounds": [[-5.0, 5.0]],
    "state_constraints": ["x1**2 - 4"],
    "planner_dynamics": ["uh1"],
    "planner_state_bounds": [[-1.0, 1.0]],
    "planner_input_bounds": [[-1.0, 1.0]],
    "jump_bounds": [[-0.05, 0.05]],
    "sampling_time": 0.1,
    "pi": ["xh1"],
    "nu": ["e1 + xh1"],
}


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture
def integrator_system():
    return integrator_error_system()


@pytest.fixture
def scalar_system():
    return inline_error_system(
        {
            "drift": ["-x1"],
            "input_matrix": [["1"]],
            "input_bounds": [[-2.0, 2.0]],
            "state_constraints": ["x1**2 - 4"],
            "sampling_time": 0.1,
            "pi": ["0"],
            "nu": ["e1"],
            "initial_radius2": 0.25,
        },
        name="scalar",
    )


@pytest.fixture
def interval_system():
    """Tracker ``x = e + xh`` with planner position and speed in [-1, 1]."""
    return inline_error_system(dict(INTERVAL_DEFINITION), name="interval")


def analytic_integrator_P() -> np.ndarray:
    k1, k2 = GAINS
    A_cl = np.array([[0.0, 1.0], [-k1, -k2]])
    return lyapunov_seed(A_cl, 0.0)


def analytic_integrator_funnel(system, gamma: float = 1.0) -> Funnel:
    """``V = e'Pe`` with ``P A_cl + A_cl' P = -I`` and a linear controller."""
    registry = system.registry
    e1, e2 = registry.polys(system.error)
    k1, k2 = GAINS
    return Funnel(
        storage=quadratic_storage(registry, system.error, analytic_integrator_P()),
        gamma=gamma,
        sampling_time=system.sampling_time,
        controller=(-k1 * e1 - k2 * e2,),
        error=system.error,
        time=None,
        planner_variables=(),
        system_name=system.name,
    )


def unit_funnel(system, gamma: float = 1.0, gain: float = 1.0) -> Funnel:
    """``V = e'e`` with ``kappa = -gain * e`` on a one-input system."""
    registry = system.registry
    e = registry.polys(system.error)
    storage = registry.zero()
    for ei in e:
        storage = storage + ei * ei
    return Funnel(
        storage=storage,
        gamma=gamma,
        sampling_time=system.sampling_time,
        controller=(-gain * e[0],),
        error=system.error,
        time=None,
        planner_variables=(),
        system_name=system.name,
    )


def unit_box_teb(coordinates=("e1",), half_width: float = 1.0) -> Teb:
    k = len(coordinates)
    return Teb(
        TebShape.BOX,
        tuple(coordinates),
        A=np.vstack([np.eye(k), -np.eye(k)]),
        b=np.full(2 * k, half_width),
    )


def write_funnel(out_dir: Path, funnel: Funnel, scale: float = 1.0) -> Path:
    return artifacts.write_json(
        out_dir / artifacts.FUNNEL_FILE,
        {"funnel": funnel.to_dict(), "planner_scale": scale},
    )


def write_teb(out_dir: Path, teb: Teb) -> Path:
    return artifacts.write_json(out_dir / artifacts.TEB_FILE, teb.to_dict())
