"""2D rigid-body simulation of a kinematic cart carrying a dynamic block.

The cart is driven directly by acceleration commands and never reacts to
contacts.  The block is a dynamic box that touches the cart, the floor and
any static geometry through a sequential-impulse contact solver with Coulomb
friction and split-impulse position correction.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels

__all__ = [
    "BodyState",
    "BodyShape",
    "StaticBox",
    "PhysicsParams",
    "WorldState",
    "AccelCommand",
    "SupportStatus",
    "SimulationDiverged",
    "make_world",
    "step_physics",
    "control_step",
    "support_status",
    "max_penetration",
    "block_energy",
]


class SimulationDiverged(RuntimeError):
    """A body state became non-finite during integration."""

    def __init__(self, body: str, step_index: int):
        super().__init__(f"simulation diverged: {body} non-finite at physics step {step_index}")
        self.body = body
        self.step_index = step_index


@dataclass(frozen=True)
class BodyState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.vx, self.vy, self.omega])

    @classmethod
    def from_array(cls, a) -> "BodyState":
        return cls(*(float(v) for v in a))

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])


@dataclass(frozen=True)
class BodyShape:
    half_w: float
    half_h: float
    density: float = 100.0
    kind: str = "box"

    def __post_init__(self):
        if self.kind != "box":
            raise ValueError(f"unsupported shape kind {self.kind!r}")
        if not (self.half_w > 0 and self.half_h > 0):
            raise ValueError("half extents must be positive")
        if not self.density > 0:
            raise ValueError("density must be positive")

    @property
    def mass(self) -> float:
        return self.density * 4.0 * self.half_w * self.half_h

    @property
    def inertia(self) -> float:
        return self.mass * ((2 * self.half_w) ** 2 + (2 * self.half_h) ** 2) / 12.0

    def corners(self, x: float, y: float, theta: float) -> np.ndarray:
        """World-space corners, counter-clockwise from bottom-left, shape (4, 2)."""
        c, s = math.cos(theta), math.sin(theta)
        local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        local *= (self.half_w, self.half_h)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + (x, y)


@dataclass(frozen=True)
class StaticBox:
    """Immovable box; ``tag`` is one of ``floor``, ``obstacle``, ``bin``."""

    cx: float
    cy: float
    half_w: float
    half_h: float
    theta: float = 0.0
    tag: str = "floor"

    def as_row(self):
        return (self.cx, self.cy, self.theta, self.half_w, self.half_h)

    def corners(self) -> np.ndarray:
        return BodyShape(self.half_w, self.half_h).corners(self.cx, self.cy, self.theta)


FLOOR = StaticBox(0.5, -0.5, 5.0, 0.5, tag="floor")


@dataclass(frozen=True)
class PhysicsParams:
    gravity: float = 9.81
    dt_physics: float = 0.001
    friction_mu: float = 0.7
    restitution: float = 0.0
    solver_iterations: int = 10
    baumgarte_beta: float = 0.2
    slop: float = 5e-5
    contact_margin: float = 2e-3
    accel_limits: tuple = (20.0, 20.0, 50.0)
    control_period: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if self.friction_mu < 0:
            raise ValueError("friction_mu must be non-negative")
        if self.solver_iterations < 1:
            raise ValueError("solver_iterations must be >= 1")

    @property
    def substeps(self) -> int:
        n = round(self.control_period / self.dt_physics)
        if abs(n * self.dt_physics - self.control_period) > 1e-12:
            raise ValueError("control period must be a multiple of dt_physics")
        return n


@dataclass(frozen=True)
class AccelCommand:
    ax: float = 0.0
    ay: float = 0.0
    alpha: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.ax, self.ay, self.alpha])

    def clamped(self, limits) -> "AccelCommand":
        a = np.clip(self.as_array(), -np.asarray(limits), np.asarray(limits))
        return AccelCommand(*(float(v) for v in a))

    @classmethod
    def from_array(cls, a) -> "AccelCommand":
        return cls(*(float(v) for v in a))


class SupportStatus(enum.Enum):
    SUPPORTED = "supported"
    SLIDING = "sliding"
    AIRBORNE = "airborne"
    GROUNDED = "grounded"


@dataclass(frozen=True, eq=False)
class WorldState:
    cart: BodyState
    block: BodyState
    cart_shape: BodyShape
    block_shape: BodyShape
    static_geometry: tuple = (FLOOR,)
    steps: int = 0
    dt: float = 0.001
    contact_cache: np.ndarray = field(default=None, repr=False)
    cart_static_mask: int = 0

    def __post_init__(self):
        if self.contact_cache is None:
            object.__setattr__(self, "contact_cache",
                               np.zeros((8 + 8 * len(self.static_geometry), 2)))

    @property
    def time(self) -> float:
        return self.steps * self.dt

    def statics_array(self) -> np.ndarray:
        if not self.static_geometry:
            return np.zeros((0, 5))
        return np.array([b.as_row() for b in self.static_geometry], dtype=float)

    def state_vector(self) -> np.ndarray:
        """Cart and block states plus the contact cache, for bitwise comparison."""
        return np.concatenate([self.cart.as_array(), self.block.as_array(),
                               self.contact_cache.ravel(), [self.steps]])


def make_world(cart_pose, cart_shape: BodyShape, block_shape: BodyShape,
               block_offset: float = 0.0, static_geometry=(FLOOR,),
               params: PhysicsParams | None = None) -> WorldState:
    """Level cart at ``cart_pose`` with the block standing upright on its top face."""
    params = params or PhysicsParams()
    x, y, th = (float(v) for v in cart_pose)
    c, s = math.cos(th), math.sin(th)
    up = cart_shape.half_h + block_shape.half_h
    bx = x + c * block_offset - s * up
    by = y + s * block_offset + c * up
    return WorldState(
        cart=BodyState(x, y, th),
        block=BodyState(bx, by, th),
        cart_shape=cart_shape,
        block_shape=block_shape,
        static_geometry=tuple(static_geometry),
        dt=params.dt_physics,
    )


def _advance(world: WorldState, cmd: AccelCommand, params: PhysicsParams, n: int) -> WorldState:
    cmd_arr = cmd.clamped(params.accel_limits).as_array()
    if not np.all(np.isfinite(cmd_arr)):
        raise ValueError("acceleration command must be finite")
    cart = world.cart.as_array()
    block = world.block.as_array()
    cache = world.contact_cache.copy()
    bs = world.block_shape
    diverged, mask = _kernels.simulate(
        cart, block,
        np.array([world.cart_shape.half_w, world.cart_shape.half_h]),
        np.array([bs.half_w, bs.half_h]),
        1.0 / bs.mass, 1.0 / bs.inertia,
        world.statics_array(), cache, cmd_arr,
        params.gravity, params.dt_physics, params.friction_mu, params.restitution,
        params.solver_iterations, params.baumgarte_beta, params.slop,
        params.contact_margin, n,
    )
    if diverged >= 0:
        body = "cart" if not np.all(np.isfinite(cart)) else "block"
        raise SimulationDiverged(body, world.steps + diverged)
    return replace(world, cart=BodyState.from_array(cart), block=BodyState.from_array(block),
                   steps=world.steps + n, contact_cache=cache, cart_static_mask=mask)


def step_physics(world: WorldState, cmd: AccelCommand, params: PhysicsParams | None = None) -> WorldState:
    """Advance one physics step of ``params.dt_physics`` seconds."""
    return _advance(world, cmd, params or PhysicsParams(), 1)


def control_step(world: WorldState, cmd: AccelCommand, params: PhysicsParams | None = None) -> WorldState:
    """Hold ``cmd`` for one control period (50 physics steps by default)."""
    params = params or PhysicsParams()
    return _advance(world, cmd, params, params.substeps)


def _summary(world: WorldState, margin: float):
    bs, cs = world.block_shape, world.cart_shape
    return _kernels.contact_summary(
        world.cart.as_array(), world.block.as_array(),
        np.array([cs.half_w, cs.half_h]), np.array([bs.half_w, bs.half_h]),
        world.statics_array(), margin)


def support_status(world: WorldState, margin: float = 1e-3,
                   slip_threshold: float = 0.02) -> SupportStatus:
    n_cart, n_static, slip, _ = _summary(world, margin)
    if n_static > 0:
        return SupportStatus.GROUNDED
    if n_cart == 0:
        return SupportStatus.AIRBORNE
    cart = world.cart
    c, s = math.cos(cart.theta), math.sin(cart.theta)
    lx = c * (world.block.x - cart.x) + s * (world.block.y - cart.y)
    if abs(lx) <= world.cart_shape.half_w and slip <= slip_threshold:
        return SupportStatus.SUPPORTED
    return SupportStatus.SLIDING


def max_penetration(world: WorldState) -> float:
    """Deepest current block penetration (0 when nothing overlaps)."""
    return float(max(_summary(world, 0.0)[3], 0.0))


def block_energy(world: WorldState, gravity: float = 9.81) -> float:
    b, m = world.block, world.block_shape.mass
    return (0.5 * m * (b.vx ** 2 + b.vy ** 2)
            + 0.5 * world.block_shape.inertia * b.omega ** 2
            + m * gravity * b.y)
