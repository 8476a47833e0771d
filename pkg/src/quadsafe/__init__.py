"""Safe quadrotor trajectory tracking: sampled-data high-order barrier MPC
with a cascaded tilt-prioritized attitude loop."""

__version__ = "0.1.0"
