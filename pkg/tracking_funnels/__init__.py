"""
Tracking Funnels

Planner-tracker synthesis: sum-of-squares tracking controllers and
tracking error bounds for a high-fidelity tracker following a
low-fidelity planner under zero-order hold, plus MPC planning and
closed-loop simulation.
"""

__version__ = "0.1.0"
