"""State-based observation for the experts.

Layout of the 16-vector (all entries roughly in [-1, 1]):

====  ==========================================
0-2   cart x, y, theta
3-5   cart vx, vy, omega
6-8   block x, y, theta
9-11  block vx, vy, omega
12    cart width
13    block height
14-15 target x, y
====  ==========================================

Positions map the 1 m workspace to [-1, 1]; angles are divided by pi/2,
linear velocities by 1 m/s and angular velocities by 5 rad/s.  Widths and
heights are centered on the middle of their randomization ranges.
"""
import math

import numpy as np

OBS_DIM = 16
_ANG = math.pi / 2
_OMEGA = 5.0


def _body(b) -> list:
    return [2 * b.x - 1, 2 * b.y - 1, b.theta / _ANG, b.vx, b.vy, b.omega / _OMEGA]


def observe_state(world, config) -> np.ndarray:
    obs = _body(world.cart) + _body(world.block) + [
        (config.cart_width - 0.21) / 0.05,
        (config.block_height - 0.10) / 0.02,
        2 * config.target[0] - 1,
        2 * config.target[1] - 1,
    ]
    return np.asarray(obs, dtype=np.float32)


def decode_state(obs) -> dict:
    """Inverse of :func:`observe_state` for the physical quantities."""
    o = np.asarray(obs, dtype=np.float64)

    def body(v):
        return np.array([(v[0] + 1) / 2, (v[1] + 1) / 2, v[2] * _ANG, v[3], v[4], v[5] * _OMEGA])

    return {"cart": body(o[0:6]), "block": body(o[6:12]),
            "cart_width": o[12] * 0.05 + 0.21, "block_height": o[13] * 0.02 + 0.10,
            "target": (o[14:16] + 1) / 2}
