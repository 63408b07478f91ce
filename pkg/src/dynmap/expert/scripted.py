"""Scripted experts that follow precomputed rest-to-rest plans.

The cart is kinematic, so an open-loop plan in pose-update space is executed
exactly.  Each leg is a discrete trapezoid: the per-step pose update grows by
at most ``a_max * dt**2`` per step, stays under the velocity bound and ramps
back to zero, scaled so the leg covers its displacement exactly.  With
``a_max = 0.3 * mu * g`` static friction holds the block throughout.
"""
from __future__ import annotations

import math

import numpy as np

from ..sim import PhysicsParams
from ..tasks import ActionBounds, ConfigurationError, EpisodeConfig, TaskId

DEFAULT_A_MAX = 0.3 * PhysicsParams().friction_mu * PhysicsParams().gravity
ALPHA_MAX = 20.0
OVER_ROUTE_Y = 0.64
UNDER_ROUTE_Y = 0.12
DUMP_HEIGHT = 0.14
DUMP_ANGLE = math.radians(60.0)
# the cart is parked this far toward its raised end so the block clears the
# lowered end before it can wedge against the bin wall
DUMP_OFFSET = 0.07


def trapezoid_profile(length: float, step_limit: float, speed_limit: float) -> np.ndarray:
    """Per-step travel for a rest-to-rest move of ``length``.

    ``step_limit`` bounds the change between consecutive entries (and the
    first and last entries), ``speed_limit`` bounds every entry.  The result
    has the fewest steps that satisfy both and sums to ``length``.
    """
    if length <= 0:
        return np.zeros(0)
    k = max(int(math.floor(speed_limit / step_limit)), 1)
    n = 1
    while True:
        t = np.arange(n)
        shape = np.minimum(np.minimum(t + 1, n - t), k).astype(float)
        if step_limit * shape.sum() >= length:
            return shape * (length / shape.sum())
        n += 1


def leg_deltas(start, end, a_max: float, dt: float, bounds: ActionBounds,
               alpha_max: float = ALPHA_MAX) -> np.ndarray:
    """Pose updates moving from ``start`` to ``end`` (x, y, theta) and stopping."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    d = end - start
    lin = math.hypot(d[0], d[1])
    # stay a little inside the velocity bounds so recorded actions never clip
    lin_prof = trapezoid_profile(lin, a_max * dt * dt, 0.95 * min(bounds.dx, bounds.dy))
    ang_prof = trapezoid_profile(abs(d[2]), alpha_max * dt * dt, 0.95 * bounds.dtheta)
    n = max(len(lin_prof), len(ang_prof))
    out = np.zeros((n, 3))
    if lin > 0:
        out[:len(lin_prof), 0] = lin_prof * d[0] / lin
        out[:len(lin_prof), 1] = lin_prof * d[1] / lin
    if d[2] != 0:
        out[:len(ang_prof), 2] = ang_prof * math.copysign(1.0, d[2])
    return out


class ScriptedExpert:
    """Base class: build a waypoint plan on reset and replay it.

    ``act`` returns the cart acceleration for the next control step; after
    the plan is exhausted the cart is held at rest.
    """

    name = "scripted"

    def __init__(self, a_max: float = DEFAULT_A_MAX, params: PhysicsParams | None = None,
                 bounds: ActionBounds = ActionBounds()):
        self.a_max = a_max
        self.params = params or PhysicsParams()
        self.bounds = bounds
        self.plan = np.zeros((0, 3))
        self.t = 0
        self.prev = np.zeros(3)

    def waypoints(self, config: EpisodeConfig) -> list:
        raise NotImplementedError

    def reset(self, config: EpisodeConfig):
        dt = self.params.control_period
        pose = (config.cart_start[0], config.cart_start[1], 0.0)
        legs = []
        for wp in self.waypoints(config):
            legs.append(leg_deltas(pose, wp, self.a_max, dt, self.bounds))
            pose = wp
        self.plan = np.concatenate(legs) if legs else np.zeros((0, 3))
        if len(self.plan) > config.max_steps:
            raise ConfigurationError(
                f"{self.name}: plan needs {len(self.plan)} steps, episode allows {config.max_steps}")
        self.t = 0
        self.prev = np.zeros(3)
        return self

    def next_delta(self) -> np.ndarray:
        d = self.plan[self.t] if self.t < len(self.plan) else np.zeros(3)
        self.t += 1
        return d

    def act(self, episode=None) -> np.ndarray:
        dt = self.params.control_period
        d = self.next_delta()
        a = (d - self.prev) / (dt * dt)
        self.prev = d
        return a


class StraightLineExpert(ScriptedExpert):
    """Balance-Reaching: straight line to the goal."""

    name = "straight"

    def waypoints(self, config):
        return [(config.target[0], config.target[1], 0.0)]


class LPathExpert(ScriptedExpert):
    """Balance-Reaching: horizontal leg first, then vertical."""

    name = "lpath"

    def waypoints(self, config):
        return [(config.target[0], config.cart_start[1], 0.0),
                (config.target[0], config.target[1], 0.0)]


class ObstacleExpert(ScriptedExpert):
    """Balance-Reaching-v2: climb (or dip) to a route height, cross, settle."""

    def __init__(self, route: str = "over", **kw):
        super().__init__(**kw)
        if route not in ("over", "under"):
            raise ValueError("route must be 'over' or 'under'")
        self.route = route
        self.name = f"obstacle_{route}"

    def waypoints(self, config):
        y = OVER_ROUTE_Y if self.route == "over" else UNDER_ROUTE_Y
        sx, _ = config.cart_start
        tx, ty = config.target
        return [(sx, y, 0.0), (tx, y, 0.0), (tx, ty, 0.0)]


class TiltDumpExpert(ScriptedExpert):
    """Bin-Dropping: carry the block over the bin and tilt the cart to dump it.

    A positive ``side`` turns the cart counter-clockwise, lowering its left end.
    """

    def __init__(self, side: int = 1, **kw):
        super().__init__(**kw)
        self.side = 1 if side >= 0 else -1
        self.name = f"tilt_{'left' if self.side > 0 else 'right'}"

    def waypoints(self, config):
        bx = config.target[0] + self.side * DUMP_OFFSET
        return [(bx, DUMP_HEIGHT, 0.0), (bx, DUMP_HEIGHT, self.side * DUMP_ANGLE)]


def scripted_expert(task, variant: str | None = None, **kw) -> ScriptedExpert:
    """Default scripted expert (or a named variant) for a task."""
    task = TaskId(task)
    if task is TaskId.BALANCE_REACHING:
        return LPathExpert(**kw) if variant == "lpath" else StraightLineExpert(**kw)
    if task is TaskId.BALANCE_REACHING_V2:
        return ObstacleExpert(route=variant or "over", **kw)
    return TiltDumpExpert(side=-1 if variant == "right" else 1, **kw)


def expert_variants(task) -> list:
    task = TaskId(task)
    if task is TaskId.BALANCE_REACHING:
        return [StraightLineExpert(), LPathExpert()]
    if task is TaskId.BALANCE_REACHING_V2:
        return [ObstacleExpert("over"), ObstacleExpert("under")]
    return [TiltDumpExpert(1), TiltDumpExpert(-1)]
