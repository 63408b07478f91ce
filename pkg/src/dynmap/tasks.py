"""Task definitions, episode randomization and the observation/action conventions.

Three tasks share one scene: a block standing on a cart inside a 1 m x 1 m
workspace.  Balance-Reaching moves the cart to a goal without dropping the
block, Balance-Reaching-v2 adds an obstacle at the workspace center, and
Bin-Dropping asks for the block to be tipped into a bin on the floor.

Actions are relative cart pose updates per control step.  They accumulate
into an absolute pose command which is turned into an acceleration by second
differencing, so that a command sequence and its accelerations are exact
discrete inverses of each other.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .sim import (FLOOR, AccelCommand, BodyShape, PhysicsParams, StaticBox,
                  SupportStatus, WorldState, control_step, make_world,
                  support_status)

log = logging.getLogger(__name__)

CART_HALF_H = 0.015
BLOCK_HALF_W = 0.02
WORKSPACE = (0.0, 1.0)
GOAL_GREEN = (40, 200, 60)

# color palette for randomization; no green hues so the goal stays distinct
PALETTE = (
    (230, 60, 50), (240, 150, 40), (240, 220, 60), (60, 90, 220),
    (150, 70, 200), (240, 120, 190), (70, 200, 230), (130, 90, 50),
    (128, 128, 128), (245, 245, 245), (25, 25, 25), (30, 40, 110),
    (200, 40, 140), (180, 180, 230),
)


class ConfigurationError(ValueError):
    pass


class TaskId(str, enum.Enum):
    BALANCE_REACHING = "BalanceReaching"
    BALANCE_REACHING_V2 = "BalanceReachingV2"
    BIN_DROPPING = "BinDropping"


@dataclass(frozen=True)
class RandomizationSpec:
    cart_width: tuple = (0.16, 0.26)
    block_height: tuple = (0.08, 0.12)
    cart_start_x: tuple = (0.15, 0.85)
    cart_start_y: tuple = (0.2, 0.6)
    target_x: tuple = (0.15, 0.85)
    target_y: tuple = (0.2, 0.6)
    block_shift: tuple = (-0.02, 0.02)
    # task 2: start and target are drawn on opposite sides of the obstacle
    side_x: tuple = (0.15, 0.32)
    side_y: tuple = (0.32, 0.55)
    # sign of a draw from this range picks the travel direction (negative: right to left)
    direction: tuple = (-1.0, 1.0)
    # task 3: bin center and cart start height
    bin_x: tuple = (0.3, 0.7)
    drop_start_y: tuple = (0.35, 0.6)
    palette: tuple = PALETTE
    rng_seed: int = 0

    def ranges(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("palette", "rng_seed")}

    def reduced(self, fraction: float = 0.2) -> "RandomizationSpec":
        """Every range shrunk to ``fraction`` of its width around the midpoint."""
        out = {}
        for name, (lo, hi) in self.ranges().items():
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * fraction
            out[name] = (mid - half, mid + half)
        return replace(self, **out)

    def validate(self):
        for name, (lo, hi) in self.ranges().items():
            if lo > hi:
                raise ConfigurationError(f"range {name} is inverted: {lo} > {hi}")
        if 2 * BLOCK_HALF_W >= self.cart_width[0]:
            raise ConfigurationError("block is wider than the narrowest cart")
        if max(abs(self.block_shift[0]), abs(self.block_shift[1])) + BLOCK_HALF_W > 0.5 * self.cart_width[0]:
            raise ConfigurationError("block shift can push the block off the cart")
        if len(self.palette) < 3:
            raise ConfigurationError("palette needs at least three colors")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        kw["palette"] = tuple(tuple(c) for c in d.get("palette", PALETTE))
        return cls(**kw)


@dataclass(frozen=True)
class GoalSpec:
    x: float
    y: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def normalized(self) -> np.ndarray:
        return 2.0 * self.xy - 1.0


@dataclass(frozen=True)
class EpisodeConfig:
    task: TaskId
    cart_width: float
    block_height: float
    cart_start: tuple
    target: tuple
    block_shift: float
    cart_color: tuple
    block_color: tuple
    background_color: tuple
    statics: tuple = ()
    max_steps: int = 120
    seed: int = 0

    @property
    def goal(self) -> GoalSpec:
        return GoalSpec(*self.target)

    @property
    def cart_shape(self) -> BodyShape:
        return BodyShape(0.5 * self.cart_width, CART_HALF_H)

    @property
    def block_shape(self) -> BodyShape:
        return BodyShape(BLOCK_HALF_W, 0.5 * self.block_height)

    def static_boxes(self) -> tuple:
        return (FLOOR,) + tuple(StaticBox(*s) for s in self.statics)

    def boxes_tagged(self, tag: str) -> list:
        return [b for b in self.static_boxes() if b.tag == tag]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        kw = dict(d)
        kw["task"] = TaskId(d["task"])
        for k in ("cart_start", "target", "cart_color", "block_color", "background_color"):
            kw[k] = tuple(d[k])
        kw["statics"] = tuple(tuple(s) for s in d.get("statics", ()))
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- sampling

OBSTACLE = (0.5, 0.45, 0.012, 0.15, 0.0, "obstacle")
BIN_INNER_HALF_W = 0.12
BIN_WALL_HALF_T = 0.01
BIN_WALL_H = 0.08


def bin_walls(center_x: float) -> tuple:
    off = BIN_INNER_HALF_W + BIN_WALL_HALF_T
    return tuple((center_x + s * off, 0.5 * BIN_WALL_H, BIN_WALL_HALF_T, 0.5 * BIN_WALL_H, 0.0, "bin")
                 for s in (-1.0, 1.0))


def _u(rng, lo_hi):
    lo, hi = lo_hi
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def sample_episode(task: TaskId, spec: RandomizationSpec, rng=None, seed: int | None = None) -> EpisodeConfig:
    """Draw one episode configuration.

    Pure in ``(spec, seed)``: passing the same seed (or an identically seeded
    generator) yields the same configuration.
    """
    task = TaskId(task)
    spec.validate()
    if seed is None:
        seed = int(rng.integers(2 ** 63)) if rng is not None else spec.rng_seed
    rng = np.random.default_rng(seed)

    cart_width = _u(rng, spec.cart_width)
    block_height = _u(rng, spec.block_height)
    shift = _u(rng, spec.block_shift)
    idx = rng.permutation(len(spec.palette))[:3]
    bg, cart_c, block_c = (tuple(int(v) for v in spec.palette[i]) for i in idx)
    statics = ()

    if task is TaskId.BALANCE_REACHING:
        start = (_u(rng, spec.cart_start_x), _u(rng, spec.cart_start_y))
        target = (_u(rng, spec.target_x), _u(rng, spec.target_y))
    elif task is TaskId.BALANCE_REACHING_V2:
        sx, tx = _u(rng, spec.side_x), 1.0 - _u(rng, spec.side_x)
        if _u(rng, spec.direction) < 0:
            sx, tx = tx, sx
        start = (sx, _u(rng, spec.side_y))
        target = (tx, _u(rng, spec.side_y))
        statics = (OBSTACLE,)
    else:
        bx = _u(rng, spec.bin_x)
        start = (_u(rng, spec.cart_start_x), _u(rng, spec.drop_start_y))
        target = (bx, 0.5 * BIN_WALL_H)
        statics = bin_walls(bx)

    config = EpisodeConfig(task, cart_width, block_height, start, target, shift,
                           cart_c, block_c, bg, statics, seed=int(seed))
    check_feasible(config)
    return config


def nominal_episode(task: TaskId = TaskId.BALANCE_REACHING, distance: float = 0.4,
                    seed: int = 0) -> EpisodeConfig:
    """Fixed mid-range configuration with a straight ``distance`` m goal."""
    task = TaskId(task)
    colors = dict(cart_color=PALETTE[3], block_color=PALETTE[0], background_color=PALETTE[9])
    if task is TaskId.BALANCE_REACHING:
        start, target, statics = (0.5 - distance / 2, 0.4), (0.5 + distance / 2, 0.4), ()
    elif task is TaskId.BALANCE_REACHING_V2:
        start, target, statics = (0.25, 0.45), (0.75, 0.45), (OBSTACLE,)
    else:
        start, target, statics = (0.3, 0.45), (0.6, 0.5 * BIN_WALL_H), bin_walls(0.6)
    config = EpisodeConfig(task, 0.21, 0.10, start, target, 0.0, statics=statics, seed=seed, **colors)
    check_feasible(config)
    return config


def check_feasible(config: EpisodeConfig):
    """Raise ConfigurationError unless the episode geometry is consistent."""
    cw, bh = config.cart_width, config.block_height
    if 2 * BLOCK_HALF_W >= cw:
        raise ConfigurationError("block wider than cart")
    if abs(config.block_shift) + BLOCK_HALF_W > 0.5 * cw:
        raise ConfigurationError("block footprint leaves the cart")
    x, y = config.cart_start
    lo, hi = WORKSPACE
    if not (lo + 0.5 * cw <= x <= hi - 0.5 * cw):
        raise ConfigurationError("cart starts outside the workspace")
    if not (lo + CART_HALF_H < y and y + CART_HALF_H + bh <= hi):
        raise ConfigurationError("cart and block do not fit vertically")
    gx, gy = config.target
    if not (lo <= gx <= hi and lo <= gy <= hi):
        raise ConfigurationError("goal outside the workspace")
    world = initial_world(config)
    if world.cart_static_mask or any(_overlaps_static(world, b) for b in config.static_boxes()):
        raise ConfigurationError("initial bodies intersect static geometry")


def _overlaps_static(world: WorldState, box: StaticBox) -> bool:
    from ._kernels import boxes_overlap
    for body, shape in ((world.cart, world.cart_shape), (world.block, world.block_shape)):
        if boxes_overlap(body.x, body.y, body.theta, shape.half_w, shape.half_h,
                         box.cx, box.cy, box.theta, box.half_w, box.half_h):
            return True
    return False


def initial_world(config: EpisodeConfig, params: PhysicsParams | None = None) -> WorldState:
    x, y = config.cart_start
    return make_world((x, y, 0.0), config.cart_shape, config.block_shape,
                      block_offset=config.block_shift,
                      static_geometry=config.static_boxes(), params=params)


# ---------------------------------------------------------------- dynamics state

@dataclass
class DynamicsState:
    """Cart then block ``x, y, theta`` for position, velocity and acceleration."""

    P: np.ndarray
    V: np.ndarray
    A: np.ndarray
    P_n: np.ndarray | None = None
    V_n: np.ndarray | None = None
    A_n: np.ndarray | None = None

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.P, self.V, self.A])


def extract_dynamics(world: WorldState, prev_V=None, dt: float = 0.05) -> DynamicsState:
    """Read P and V from the bodies and estimate A by differencing velocities.

    ``prev_V=None`` marks the first step of an episode, where A is zero.
    """
    P = np.concatenate([world.cart.pose, world.block.pose])
    V = np.concatenate([world.cart.velocity, world.block.velocity])
    if prev_V is None:
        A = np.zeros(6)
    else:
        A = (V - np.asarray(prev_V, dtype=float)) / dt
    return DynamicsState(P, V, A)


# ---------------------------------------------------------------- actions

@dataclass(frozen=True)
class ActionBounds:
    dx: float = 0.025
    dy: float = 0.025
    dtheta: float = 0.1

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


@dataclass(frozen=True)
class PolicyAction:
    delta: tuple
    normalized: tuple

    @classmethod
    def from_delta(cls, delta, bounds: ActionBounds = ActionBounds()) -> "PolicyAction":
        d = np.asarray(delta, dtype=float)
        return cls(tuple(d), tuple(d / bounds.as_array()))

    @classmethod
    def from_normalized(cls, a, bounds: ActionBounds = ActionBounds()) -> "PolicyAction":
        a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
        return cls(tuple(a * bounds.as_array()), tuple(a))


def absolute_from_relative(action, current_cmd_pose) -> np.ndarray:
    """Accumulate a relative update onto the running pose command."""
    delta = action.delta if isinstance(action, PolicyAction) else action
    return np.asarray(current_cmd_pose, dtype=float) + np.asarray(delta, dtype=float)


def preprocess_action(pos_t, pos_t1, pos_t2, dt: float = 0.05,
                      limits=PhysicsParams().accel_limits) -> AccelCommand:
    """Second difference of three consecutive pose commands over ``dt**2``."""
    a = (np.asarray(pos_t, dtype=float) - 2.0 * np.asarray(pos_t1, dtype=float)
         + np.asarray(pos_t2, dtype=float)) / dt ** 2
    lim = np.asarray(limits, dtype=float)
    return AccelCommand.from_array(np.clip(a, -lim, lim))


def integrate_commands(accels, start_pose, dt: float = 0.05) -> np.ndarray:
    """Double-integrate accelerations back into pose commands.

    Exact inverse of :func:`preprocess_action` for a history seeded with the
    start pose repeated.  Returns an array of shape ``(len(accels), 3)``.
    """
    p = np.asarray(start_pose, dtype=float).copy()
    step = np.zeros(3)
    out = []
    for a in accels:
        step = step + np.asarray(a, dtype=float) * dt ** 2
        p = p + step
        out.append(p.copy())
    return np.array(out).reshape(-1, 3)


# ---------------------------------------------------------------- records and outcomes

SUPPORT_CODES = {SupportStatus.SUPPORTED: 0, SupportStatus.SLIDING: 1,
                 SupportStatus.AIRBORNE: 2, SupportStatus.GROUNDED: 3}
SUPPORT_FROM_CODE = {v: k for k, v in SUPPORT_CODES.items()}


@dataclass
class StepRecord:
    image: np.ndarray
    dynamics: DynamicsState
    proprio: np.ndarray
    action: PolicyAction
    command_pose: np.ndarray
    goal: GoalSpec
    support: SupportStatus
    collided: bool = False


@dataclass(frozen=True)
class Outcome:
    dropped: bool
    position_error: float | None
    success: bool
    drop_step: int | None = None
    short: bool = False


DROP_TILT = math.radians(75.0)
AIRBORNE_LIMIT = 10
SETTLE_SPEED = 0.05


class DropMonitor:
    """Latching drop predicate for tasks 1-2.

    A drop is the block leaving the cart for good: grounded, tilted more than
    75 degrees relative to the cart, airborne for more than 10 consecutive
    control steps, or (task 2) any contact with the obstacle.
    """

    def __init__(self, config: EpisodeConfig):
        self.config = config
        self.airborne = 0
        self.dropped = False
        self.drop_step = None
        self.t = 0

    def update(self, support: SupportStatus, cart_theta: float, block_theta: float,
               collided: bool = False) -> bool:
        if self.config.task is not TaskId.BIN_DROPPING and not self.dropped:
            self.airborne = self.airborne + 1 if support is SupportStatus.AIRBORNE else 0
            if (support is SupportStatus.GROUNDED or collided
                    or abs(block_theta - cart_theta) > DROP_TILT
                    or self.airborne > AIRBORNE_LIMIT):
                self.dropped = True
                self.drop_step = self.t
        self.t += 1
        return self.dropped

    def update_world(self, world: WorldState) -> bool:
        return self.update(support_status(world), world.cart.theta, world.block.theta,
                           cart_collided(world, self.config))


def cart_collided(world: WorldState, config: EpisodeConfig) -> bool:
    """True when the cart touched the task-2 obstacle during the last control step."""
    mask = world.cart_static_mask
    return any(mask >> k & 1 and b.tag == "obstacle"
               for k, b in enumerate(world.static_geometry))


def detect_drop(world: WorldState, config: EpisodeConfig, monitor: DropMonitor | None = None) -> bool:
    """Instantaneous drop check, or a latched one when a monitor is supplied."""
    if monitor is not None:
        return monitor.update_world(world)
    if config.task is TaskId.BIN_DROPPING:
        return False
    return (support_status(world) is SupportStatus.GROUNDED
            or cart_collided(world, config)
            or abs(world.block.theta - world.cart.theta) > DROP_TILT)


def block_in_bin(block_xy, block_speed: float, config: EpisodeConfig) -> bool:
    walls = config.boxes_tagged("bin")
    if len(walls) != 2:
        return False
    left = min(w.cx for w in walls) + BIN_WALL_HALF_T
    right = max(w.cx for w in walls) - BIN_WALL_HALF_T
    x, y = block_xy
    return left < x < right and y < BIN_WALL_H and block_speed < SETTLE_SPEED


def task_reward(world: WorldState, config: EpisodeConfig, dropped: bool = False,
                drop_penalty: float = 1.0) -> float:
    if config.task is TaskId.BIN_DROPPING:
        b = world.block
        if block_in_bin((b.x, b.y), math.hypot(b.vx, b.vy), config):
            return 1.0
        if support_status(world) is SupportStatus.GROUNDED:
            return -1.0
        return 0.0
    dist = math.hypot(world.cart.x - config.target[0], world.cart.y - config.target[1])
    return -dist - (drop_penalty if dropped else 0.0)


SUCCESS_PE_MM = 50.0
PE_WINDOW = 10


def outcome_from_errors(errors_mm, dropped: bool, drop_step=None) -> Outcome:
    errors_mm = np.asarray(errors_mm, dtype=float)
    short = len(errors_mm) < PE_WINDOW
    pe = float(np.mean(errors_mm[-PE_WINDOW:])) if len(errors_mm) else float("nan")
    return Outcome(dropped, pe, (not dropped) and pe < SUCCESS_PE_MM, drop_step, short)


def episode_outcome(records, config: EpisodeConfig) -> Outcome:
    """Drop / position error / success for a finished episode."""
    if not records:
        raise ValueError("no records")
    if config.task is TaskId.BIN_DROPPING:
        last = records[-1].dynamics
        speed = math.hypot(last.V[3], last.V[4])
        ok = block_in_bin((last.P[3], last.P[4]), speed, config)
        return Outcome(False, None, ok, short=len(records) < PE_WINDOW)
    mon = DropMonitor(config)
    for r in records:
        mon.update(r.support, r.dynamics.P[2], r.dynamics.P[5], r.collided)
    g = np.asarray(config.target)
    errs = [1000.0 * float(np.hypot(*(r.dynamics.P[:2] - g))) for r in records]
    out = outcome_from_errors(errs, mon.dropped, mon.drop_step)
    if out.short:
        log.warning("episode has %d records; position error uses all of them", len(records))
    return out


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    """Affine maps to [-1, 1] for dynamics, actions and goals."""

    p_low: tuple = (0.0, 0.0, -math.pi / 2, 0.0, 0.0, -math.pi / 2)
    p_high: tuple = (1.0, 1.0, math.pi / 2, 1.0, 1.0, math.pi / 2)
    v_min: tuple = (-1.0,) * 6
    v_max: tuple = (1.0,) * 6
    a_min: tuple = (-1.0,) * 6
    a_max: tuple = (1.0,) * 6
    action_bound: tuple = tuple(float(v) for v in ActionBounds().as_array())
    clamp: float = 1.05

    @classmethod
    def from_dynamics(cls, dyn: np.ndarray, min_span: float = 1e-3, **kw) -> "NormStats":
        """Per-dimension min/max of V and A from an ``(N, 18)`` array.

        Ranges narrower than ``min_span`` (for example a block that never
        rotates) are widened around their midpoint, so numerical noise in an
        essentially constant channel is not stretched to [-1, 1].  Exactly
        constant channels stay degenerate and normalize to 0.
        """
        dyn = np.asarray(dyn, dtype=float).reshape(-1, 18)
        lo, hi = dyn.min(0), dyn.max(0)
        mid = 0.5 * (lo + hi)
        narrow = (hi - lo < min_span) & (hi > lo)
        lo = np.where(narrow, mid - 0.5 * min_span, lo)
        hi = np.where(narrow, mid + 0.5 * min_span, hi)

        def tup(a):
            return tuple(float(v) for v in a)
        return cls(v_min=tup(lo[6:12]), v_max=tup(hi[6:12]),
                   a_min=tup(lo[12:18]), a_max=tup(hi[12:18]), **kw)

    def _lo_hi(self):
        lo = np.array(self.p_low + self.v_min + self.a_min, dtype=float)
        hi = np.array(self.p_high + self.v_max + self.a_max, dtype=float)
        return lo, hi

    def degenerate(self) -> np.ndarray:
        lo, hi = self._lo_hi()
        return hi - lo <= 0

    def normalize_dynamics(self, dyn, count=False):
        lo, hi = self._lo_hi()
        dyn = np.asarray(dyn, dtype=float)
        span = np.where(hi > lo, hi - lo, 1.0)
        out = np.where(hi > lo, 2.0 * (dyn - lo) / span - 1.0, 0.0)
        over = np.abs(out) > self.clamp
        out = np.clip(out, -self.clamp, self.clamp)
        return (out, int(over.sum())) if count else out

    def denormalize_dynamics(self, dyn_n):
        lo, hi = self._lo_hi()
        dyn_n = np.asarray(dyn_n, dtype=float)
        return np.where(hi > lo, lo + 0.5 * (dyn_n + 1.0) * (hi - lo), lo)

    def normalize_action(self, delta):
        return np.asarray(delta, dtype=float) / np.asarray(self.action_bound)

    def denormalize_action(self, a):
        return np.asarray(a, dtype=float) * np.asarray(self.action_bound)

    @staticmethod
    def normalize_goal(g):
        return 2.0 * np.asarray(g, dtype=float) - 1.0

    @staticmethod
    def denormalize_goal(g_n):
        return 0.5 * (np.asarray(g_n, dtype=float) + 1.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def normalize_record(record: StepRecord, stats: NormStats) -> StepRecord:
    if np.any(stats.degenerate()):
        log.warning("degenerate normalization dims %s mapped to 0",
                    np.flatnonzero(stats.degenerate()).tolist())
    d = record.dynamics
    n = stats.normalize_dynamics(d.as_vector())
    dyn = DynamicsState(d.P, d.V, d.A, n[:6], n[6:12], n[12:])
    act = PolicyAction(record.action.delta, tuple(stats.normalize_action(record.action.delta)))
    return replace(record, dynamics=dyn, action=act)


def denormalize_record(record: StepRecord, stats: NormStats) -> StepRecord:
    d = record.dynamics
    raw = stats.denormalize_dynamics(np.concatenate([d.P_n, d.V_n, d.A_n]))
    dyn = DynamicsState(raw[:6], raw[6:12], raw[12:], d.P_n, d.V_n, d.A_n)
    act = PolicyAction(tuple(stats.denormalize_action(record.action.normalized)),
                       record.action.normalized)
    return replace(record, dynamics=dyn, action=act)


# ---------------------------------------------------------------- episode runner

class Episode:
    """Closed-loop bookkeeping for one episode.

    Holds the world, the running absolute pose command and its two-step
    history, the drop latch, and (optionally) the list of step records.
    Call :meth:`observe` before each action; it renders the pre-action frame.
    """

    def __init__(self, config: EpisodeConfig, params: PhysicsParams | None = None,
                 bounds: ActionBounds = ActionBounds(), render: bool = True):
        self.config = config
        self.params = params or PhysicsParams()
        self.bounds = bounds
        self.render = render
        self.world = initial_world(config, self.params)
        pose = self.world.cart.pose
        self.cmd = pose.copy()
        self.cmd_prev = pose.copy()
        self.prev_V = None
        self.monitor = DropMonitor(config)
        self.collided = False
        self.support = support_status(self.world)
        self.t = 0
        self.errors_mm = []
        self.last_accel = np.zeros(3)
        self.monitor.update(self.support, self.world.cart.theta, self.world.block.theta)

    @property
    def dt(self) -> float:
        return self.params.control_period

    @property
    def dropped(self) -> bool:
        return self.monitor.dropped

    @property
    def done(self) -> bool:
        return self.t >= self.config.max_steps

    def dynamics(self) -> DynamicsState:
        return extract_dynamics(self.world, self.prev_V, self.dt)

    def observe(self):
        """Image and dynamics of the current (pre-action) state."""
        from .render import render_frame
        image = render_frame(self.world, self.config) if self.render else None
        return image, self.dynamics()

    def _advance(self, accel: np.ndarray):
        self.prev_V = np.concatenate([self.world.cart.velocity, self.world.block.velocity])
        self.last_accel = accel
        self.world = control_step(self.world, AccelCommand.from_array(accel), self.params)
        self.support = support_status(self.world)
        hit = cart_collided(self.world, self.config)
        self.collided = self.collided or hit
        self.monitor.update(self.support, self.world.cart.theta, self.world.block.theta, hit)
        self.errors_mm.append(self.cart_error_mm())
        self.t += 1

    def step_relative(self, delta) -> AccelCommand:
        """Apply a relative pose update; returns the acceleration sent to the cart."""
        new = absolute_from_relative(delta, self.cmd)
        cmd = preprocess_action(new, self.cmd, self.cmd_prev, self.dt, self.params.accel_limits)
        self.cmd_prev, self.cmd = self.cmd, new
        self._advance(cmd.as_array())
        return cmd

    def step_accel(self, accel) -> np.ndarray:
        """Apply an acceleration directly; returns the induced relative pose update.

        The pose command is advanced by double integration so the stored
        command sequence reproduces ``accel`` under second differencing.
        """
        a = AccelCommand.from_array(accel).clamped(self.params.accel_limits).as_array()
        delta = (self.cmd - self.cmd_prev) + a * self.dt ** 2
        self.cmd_prev, self.cmd = self.cmd, self.cmd + delta
        self._advance(a)
        return delta

    def outcome(self) -> Outcome:
        """Outcome over the post-action states visited so far."""
        if self.config.task is TaskId.BIN_DROPPING:
            b = self.world.block
            ok = block_in_bin((b.x, b.y), math.hypot(b.vx, b.vy), self.config)
            return Outcome(False, None, ok, short=self.t < PE_WINDOW)
        return outcome_from_errors(self.errors_mm, self.dropped, self.monitor.drop_step)

    def cart_error_mm(self) -> float:
        g = self.config.target
        return 1000.0 * math.hypot(self.world.cart.x - g[0], self.world.cart.y - g[1])
