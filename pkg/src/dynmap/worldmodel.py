"""World model, decoders, policies and their losses.

Layout of the model:

* encoder ``phi1``: four stride-2 convolutions and a dense layer, image -> z
* transition ``phi2``: dense projection of (z, a), two stacked LSTM cells and
  a linear latent head, (z_t, a_t, h_t) -> (z_hat_{t+1}, h_{t+1})
* RGB decoder ``zeta1``: dense to a 4x4 feature map, four stride-2
  transposed convolutions, tanh output
* dynamics decoder: shared two-layer trunk ``zeta_dyn`` and linear heads
  ``zeta2`` (P), ``zeta3`` (V), ``zeta4`` (A), 6 outputs each
* policies ``theta``: a feedforward MLP or a two-LSTM recurrent network

Sequences are batch-major arrays ``(B, T, ...)``.  Training is teacher
forced: every frame is encoded from the ground-truth image.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .nn import Parameter, Tape, Tensor

ACTION_DIM = 3
GOAL_DIM = 2
DYN_DIM = 6


@dataclass(frozen=True)
class WorldModelConfig:
    image_size: int = 64
    channels: tuple = (32, 64, 128, 256)
    z_dim: int = 64
    hidden: int = 256
    trunk: int = 256
    policy_hidden: int = 256
    kernel: int = 4
    activation: str = "elu"

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError("encoder needs exactly four conv layers")
        if self.image_size % 16 or self.image_size < 16:
            raise ValueError("image_size must be a positive multiple of 16")

    @property
    def feat_size(self) -> int:
        return self.image_size // 16

    @classmethod
    def desk(cls, **kw) -> "WorldModelConfig":
        """Small widths that train in minutes on one CPU core."""
        base = dict(channels=(8, 16, 32, 32), z_dim=32, hidden=64, trunk=64, policy_hidden=64)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    beta_z: float = 1.0
    beta_joint: float = 1.0
    w_P: float = 0.0
    w_V: float = 0.0
    w_A: float = 0.0

    def __post_init__(self):
        if min(self.beta_z, self.beta_joint, self.w_P, self.w_V, self.w_A) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def dynamics(self) -> dict:
        return {"P": self.w_P, "V": self.w_V, "A": self.w_A}

    @property
    def any_dynamics(self) -> bool:
        return self.w_P > 0 or self.w_V > 0 or self.w_A > 0

    @classmethod
    def preset(cls, name: str, **kw) -> "LossWeights":
        """``rgb``, ``v``, ``pv``, ``pva`` and so on; equal weights.

        Labels such as ``Only-RGB`` or ``RGB+[P+V]`` are accepted too.
        """
        key = name.lower()
        for junk in ("only", "rgb", "+", "-", "_", "[", "]", " "):
            key = key.replace(junk, "")
        if not key:
            return cls(**kw)
        name = key
        if not set(name) <= set("pva"):
            raise ValueError(f"unknown loss preset {name!r}")
        return cls(w_P=float("p" in name), w_V=float("v" in name), w_A=float("a" in name), **kw)


def _digest_arrays(named) -> str:
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


class _Module:
    """Flat name -> Parameter store with group prefixes."""

    def __init__(self):
        self.params: dict = {}

    def _add(self, group: dict):
        for p in group.values():
            if p.name in self.params:
                raise ValueError(f"duplicate parameter name {p.name}")
            self.params[p.name] = p
        return group

    def parameters(self, prefixes=None) -> list:
        if prefixes is None:
            return list(self.params.values())
        prefixes = tuple(prefixes)
        return [p for n, p in self.params.items() if n.split(".")[0] in prefixes]

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for n, p in self.params.items():
            if state[n].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n}")
            p.data[...] = state[n]

    def digest(self, prefixes=None) -> str:
        return _digest_arrays((p.name, p.data) for p in self.parameters(prefixes))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------- latent state

@dataclass
class LatentState:
    """World-model recurrent state ``(h1, c1, h2, c2)``."""

    h1: object
    c1: object
    h2: object
    c2: object

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LatentState":
        z = np.zeros((batch, hidden), dtype=np.float32)
        return cls(Tensor(z), Tensor(z.copy()), Tensor(z.copy()), Tensor(z.copy()))

    def arrays(self):
        return tuple(np.asarray(getattr(t, "data", t)) for t in (self.h1, self.c1, self.h2, self.c2))


# ---------------------------------------------------------------- world model

class WorldModel(_Module):
    GROUPS = ("phi1", "phi2", "zeta1", "zeta_dyn", "zeta2", "zeta3", "zeta4")
    WM_GROUPS = ("phi1", "phi2")
    DECODER_GROUPS = ("zeta1", "zeta_dyn", "zeta2", "zeta3", "zeta4")

    def __init__(self, config: WorldModelConfig = WorldModelConfig(), seed: int = 0):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        k, ch = cfg.kernel, cfg.channels
        c_in = 3
        self.enc = []
        for i, c in enumerate(ch):
            self.enc.append(self._add(nn.conv_params(rng, k, c_in, c, f"phi1.conv{i + 1}")))
            c_in = c
        flat = cfg.feat_size ** 2 * ch[-1]
        self.enc_out = self._add(nn.dense_params(rng, flat, cfg.z_dim, "phi1.fc"))

        h = cfg.hidden
        self.proj = self._add(nn.dense_params(rng, cfg.z_dim + ACTION_DIM, h, "phi2.proj"))
        self.lstm1 = self._add(nn.lstm_params(rng, h, h, "phi2.lstm1"))
        self.lstm2 = self._add(nn.lstm_params(rng, h, h, "phi2.lstm2"))
        self.z_head = self._add(nn.dense_params(rng, h, cfg.z_dim, "phi2.zhead"))

        dec_in = cfg.z_dim + 2 * h
        self.dec_fc = self._add(nn.dense_params(rng, dec_in, flat, "zeta1.fc"))
        outs = list(ch[-2::-1]) + [3]
        self.dec = []
        c_in = ch[-1]
        for i, c in enumerate(outs):
            self.dec.append(self._add(nn.deconv_params(rng, k, c_in, c, f"zeta1.deconv{i + 1}")))
            c_in = c

        self.trunk = [self._add(nn.dense_params(rng, dec_in, cfg.trunk, "zeta_dyn.fc1")),
                      self._add(nn.dense_params(rng, cfg.trunk, cfg.trunk, "zeta_dyn.fc2"))]
        self.heads = {"P": self._add(nn.dense_params(rng, cfg.trunk, DYN_DIM, "zeta2.P")),
                      "V": self._add(nn.dense_params(rng, cfg.trunk, DYN_DIM, "zeta3.V")),
                      "A": self._add(nn.dense_params(rng, cfg.trunk, DYN_DIM, "zeta4.A"))}

    def _act(self, tape, x):
        return tape.activation(x, self.config.activation)

    def encode(self, tape: Tape, images) -> Tensor:
        """``(N, S, S, 3)`` images in [-1, 1] -> ``(N, z_dim)``."""
        x = nn.as_tensor(images)
        for layer in self.enc:
            x = self._act(tape, tape.conv2d(x, layer["W"], layer["b"], stride=2, pad=1))
        x = tape.reshape(x, (x.shape[0], -1))
        return tape.dense(x, self.enc_out["W"], self.enc_out["b"])

    def initial_state(self, batch: int) -> LatentState:
        return LatentState.zeros(batch, self.config.hidden)

    def transition(self, tape: Tape, z, a, state: LatentState):
        """One step: returns ``(z_hat_next, new_state)``."""
        x = tape.concat([z, a], axis=-1)
        x = self._act(tape, tape.dense(x, self.proj["W"], self.proj["b"]))
        h1, c1 = tape.lstm_cell(x, state.h1, state.c1, **self.lstm1)
        h2, c2 = tape.lstm_cell(h1, state.h2, state.c2, **self.lstm2)
        z_hat = tape.dense(h2, self.z_head["W"], self.z_head["b"])
        return z_hat, LatentState(h1, c1, h2, c2)

    def decode_rgb(self, tape: Tape, z_hat, h1, h2) -> Tensor:
        cfg = self.config
        x = tape.concat([z_hat, h1, h2], axis=-1)
        x = self._act(tape, tape.dense(x, self.dec_fc["W"], self.dec_fc["b"]))
        x = tape.reshape(x, (x.shape[0], cfg.feat_size, cfg.feat_size, cfg.channels[-1]))
        for i, layer in enumerate(self.dec):
            x = tape.deconv2d(x, layer["W"], layer["b"], stride=2, pad=1)
            x = tape.tanh(x) if i == len(self.dec) - 1 else self._act(tape, x)
        return x

    def decode_dynamics(self, tape: Tape, z_hat, h1, h2) -> dict:
        x = tape.concat([z_hat, h1, h2], axis=-1)
        for layer in self.trunk:
            x = self._act(tape, tape.dense(x, layer["W"], layer["b"]))
        return {k: tape.dense(x, head["W"], head["b"]) for k, head in self.heads.items()}

    def describe(self) -> dict:
        return {"kind": "worldmodel", "config": self.config.to_dict(),
                "shapes": {n: list(p.shape) for n, p in self.params.items()}}


# ---------------------------------------------------------------- policies

class FeedforwardPolicy(_Module):
    """``a = tanh(MLP(z, h1, h2, g))``."""

    recurrent = False

    def __init__(self, config: WorldModelConfig = WorldModelConfig(), seed: int = 0):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        n_in = cfg.z_dim + 2 * cfg.hidden + GOAL_DIM
        ph = cfg.policy_hidden
        self.layers = [self._add(nn.dense_params(rng, n_in, ph, "theta.fc1")),
                       self._add(nn.dense_params(rng, ph, ph, "theta.fc2")),
                       self._add(nn.dense_params(rng, ph, ACTION_DIM, "theta.out"))]

    def initial_state(self, batch: int):
        return None

    def act(self, tape: Tape, z, h1, h2, g, state=None):
        x = tape.concat([z, h1, h2, g], axis=-1)
        for layer in self.layers[:-1]:
            x = tape.activation(tape.dense(x, layer["W"], layer["b"]), self.config.activation)
        out = self.layers[-1]
        return tape.tanh(tape.dense(x, out["W"], out["b"])), None

    def describe(self) -> dict:
        return {"kind": "policy_feedforward", "config": self.config.to_dict(),
                "shapes": {n: list(p.shape) for n, p in self.params.items()}}


class RecurrentPolicy(_Module):
    """Projection, two LSTM cells and a tanh head; carries ``(h1, c1, h2, c2)``."""

    recurrent = True

    def __init__(self, config: WorldModelConfig = WorldModelConfig(), seed: int = 0):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        n_in = cfg.z_dim + GOAL_DIM + 2 * cfg.hidden
        ph = cfg.policy_hidden
        self.proj = self._add(nn.dense_params(rng, n_in, ph, "theta.proj"))
        self.lstm1 = self._add(nn.lstm_params(rng, ph, ph, "theta.lstm1"))
        self.lstm2 = self._add(nn.lstm_params(rng, ph, ph, "theta.lstm2"))
        self.out = self._add(nn.dense_params(rng, ph, ACTION_DIM, "theta.out"))

    def initial_state(self, batch: int) -> LatentState:
        return LatentState.zeros(batch, self.config.policy_hidden)

    def act(self, tape: Tape, z, h1, h2, g, state: LatentState):
        x = tape.concat([z, g, h1, h2], axis=-1)
        x = tape.activation(tape.dense(x, self.proj["W"], self.proj["b"]), self.config.activation)
        p1, q1 = tape.lstm_cell(x, state.h1, state.c1, **self.lstm1)
        p2, q2 = tape.lstm_cell(p1, state.h2, state.c2, **self.lstm2)
        a = tape.tanh(tape.dense(p2, self.out["W"], self.out["b"]))
        return a, LatentState(p1, q1, p2, q2)

    def describe(self) -> dict:
        return {"kind": "policy_recurrent", "config": self.config.to_dict(),
                "shapes": {n: list(p.shape) for n, p in self.params.items()}}


def make_policy(kind: str, config: WorldModelConfig, seed: int = 0):
    if kind in ("feedforward", "ff"):
        return FeedforwardPolicy(config, seed)
    if kind in ("recurrent", "rec"):
        return RecurrentPolicy(config, seed)
    raise ValueError(f"unknown policy variant {kind!r}")


def policy_feedforward(tape, policy: FeedforwardPolicy, z, h, g):
    return policy.act(tape, z, h[0], h[1], g)[0]


def policy_recurrent(tape, policy: RecurrentPolicy, z, g, h, h_pi):
    return policy.act(tape, z, h[0], h[1], g, h_pi)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Teacher-forcing window.

    ``images`` ``(B, T, S, S, 3)`` float32 in [-1, 1]; ``actions`` ``(B, T, 3)``
    normalized; ``goals`` ``(B, T, 2)`` normalized; ``P``, ``V``, ``A``
    ``(B, T, 6)`` normalized.  Index ``t`` of every array refers to the same
    simulation step.
    """

    images: np.ndarray
    actions: np.ndarray
    goals: np.ndarray
    P: np.ndarray | None = None
    V: np.ndarray | None = None
    A: np.ndarray | None = None

    @property
    def B(self) -> int:
        return self.actions.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]


@dataclass
class Unrolled:
    z: Tensor                 # (B, T, z)       encoder output for every frame
    z_hat: Tensor             # (B, T-1, z)     transition prediction for steps 1..T-1
    h1: list                  # per step t = 0..T-1, state fed to the policy at t
    h2: list
    h1_next: Tensor | None = None   # (B, T-1, hidden) states paired with z_hat
    h2_next: Tensor | None = None
    image_hat: Tensor | None = None
    dyn_hat: dict = field(default_factory=dict)
    a_hat: Tensor | None = None


def unroll(tape: Tape, wm: WorldModel, batch: Batch, policy=None, decode_rgb=True,
           decode_dynamics=True) -> Unrolled:
    """Teacher-forced pass over a window, optionally with decoders and policy."""
    B, T = batch.B, batch.T
    if T < 2:
        raise ValueError("window must contain at least 2 steps")
    S = batch.images.shape[2]
    flat = batch.images.reshape(B * T, S, S, 3)
    z_all = tape.reshape(wm.encode(tape, flat), (B, T, -1))
    state = wm.initial_state(B)
    acts = batch.actions.astype(np.float32)
    h1s, h2s, zh = [state.h1], [state.h2], []
    for t in range(T - 1):
        zt = tape.take(z_all, t, axis=1)
        z_hat, state = wm.transition(tape, zt, acts[:, t], state)
        zh.append(z_hat)
        h1s.append(state.h1)
        h2s.append(state.h2)
    out = Unrolled(z=z_all, z_hat=tape.stack(zh, axis=1), h1=h1s, h2=h2s)
    if decode_rgb or decode_dynamics:
        out.h1_next = tape.stack(h1s[1:], axis=1)
        out.h2_next = tape.stack(h2s[1:], axis=1)
        n = B * (T - 1)
        zf = tape.reshape(out.z_hat, (n, -1))
        h1f = tape.reshape(out.h1_next, (n, -1))
        h2f = tape.reshape(out.h2_next, (n, -1))
        if decode_rgb:
            img = wm.decode_rgb(tape, zf, h1f, h2f)
            out.image_hat = tape.reshape(img, (B, T - 1) + img.shape[1:])
        if decode_dynamics:
            out.dyn_hat = {k: tape.reshape(v, (B, T - 1, DYN_DIM))
                           for k, v in wm.decode_dynamics(tape, zf, h1f, h2f).items()}
    if policy is not None:
        out.a_hat = run_policy(tape, policy, z_all, h1s, h2s, batch.goals)
    return out


def run_policy(tape: Tape, policy, z_all, h1s, h2s, goals) -> Tensor:
    """Policy actions for every step of a window, ``(B, T, 3)``."""
    B, T = goals.shape[:2]
    goals = goals.astype(np.float32)
    if not policy.recurrent:
        h1 = tape.stack(h1s, axis=1)
        h2 = tape.stack(h2s, axis=1)
        n = B * T
        a, _ = policy.act(tape, tape.reshape(z_all, (n, -1)), tape.reshape(h1, (n, -1)),
                          tape.reshape(h2, (n, -1)), goals.reshape(n, -1))
        return tape.reshape(a, (B, T, ACTION_DIM))
    state = policy.initial_state(B)
    outs = []
    for t in range(T):
        a, state = policy.act(tape, tape.take(z_all, t, axis=1), h1s[t], h2s[t], goals[:, t], state)
        outs.append(a)
    return tape.stack(outs, axis=1)


def policy_unroll_cached(tape: Tape, policy, z, h1, h2, goals) -> Tensor:
    """Policy over precomputed latents ``z``, ``h1``, ``h2`` of shape ``(B, T, .)``."""
    T = z.shape[1]
    zt = Tensor(np.asarray(z, dtype=np.float32))
    h1s = [Tensor(np.ascontiguousarray(h1[:, t], dtype=np.float32)) for t in range(T)]
    h2s = [Tensor(np.ascontiguousarray(h2[:, t], dtype=np.float32)) for t in range(T)]
    return run_policy(tape, policy, zt, h1s, h2s, goals)


# ---------------------------------------------------------------- losses

def loss_policy(tape: Tape, a_true, a_hat) -> Tensor:
    """Mean over batch and time of the per-step L1 distance."""
    a_hat = nn.as_tensor(a_hat)
    return tape.l1_loss(a_hat, np.asarray(a_true, dtype=np.float32), batch_dims=a_hat.data.ndim - 1)


def loss_rgb(tape: Tape, out: Unrolled, batch: Batch, beta_z: float) -> Tensor:
    """Next-frame reconstruction distance plus ``beta_z`` times the latent distance.

    Both terms are per-sample Euclidean norms averaged over batch and time.
    The latent target is the live encoder output, so both branches receive
    gradient.
    """
    target = batch.images[:, 1:].astype(np.float32)
    rec = tape.l2_norm_loss(out.image_hat, target, batch_dims=2)
    if beta_z == 0:
        return rec
    z_next = tape.take(out.z, slice(1, None), axis=1)
    lat = tape.l2_norm_loss(out.z_hat, z_next, batch_dims=2)
    return tape.weighted_sum([(1.0, rec), (beta_z, lat)])


def loss_dynamics(tape: Tape, out: Unrolled, batch: Batch, weights: LossWeights) -> Tensor:
    """Weighted sum of per-sample Euclidean errors of the active heads at t+1."""
    terms = []
    for key, w in weights.dynamics.items():
        if w > 0:
            target = getattr(batch, key)[:, 1:].astype(np.float32)
            terms.append((w, tape.l2_norm_loss(out.dyn_hat[key], target, batch_dims=2)))
    if not terms:
        return Tensor(np.zeros((), dtype=np.float64))
    return tape.weighted_sum(terms)


def loss_world_model(tape: Tape, out: Unrolled, batch: Batch, weights: LossWeights) -> Tensor:
    rgb = loss_rgb(tape, out, batch, weights.beta_z)
    if not weights.any_dynamics:
        return rgb
    return tape.weighted_sum([(1.0, rgb), (1.0, loss_dynamics(tape, out, batch, weights))])


def loss_joint(tape: Tape, out: Unrolled, batch: Batch, weights: LossWeights) -> Tensor:
    """World-model losses plus ``beta_joint`` times the policy loss."""
    wm = loss_world_model(tape, out, batch, weights)
    if weights.beta_joint == 0 or out.a_hat is None:
        return wm
    lp = loss_policy(tape, batch.actions, out.a_hat)
    return tape.weighted_sum([(1.0, wm), (weights.beta_joint, lp)])


def per_head_mse(out: Unrolled, batch: Batch) -> dict:
    """Mean squared error per dynamics head over all next-step predictions."""
    res = {}
    for key, pred in out.dyn_hat.items():
        target = getattr(batch, key)
        if target is None:
            continue
        d = pred.data.astype(np.float64) - target[:, 1:]
        res[key] = float(np.mean(d * d))
    return res


# ---------------------------------------------------------------- inference

def normalize_image(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def rollout_inference(policy, wm: WorldModel, configs, stats, physics=None,
                      steps: int | None = None, return_records: bool = False):
    """Closed-loop execution of a batch of episodes.

    Per step: render, encode, act, denormalize the relative pose update,
    accumulate it onto the pose command, convert to acceleration by second
    differencing, simulate one control period, then advance the transition
    with the executed (clipped, normalized) action.  Returns the list of
    ``Episode`` objects and, optionally, per-episode step records.
    """
    from .tasks import Episode, PolicyAction, StepRecord, ActionBounds

    bounds = ActionBounds(*stats.action_bound)
    episodes = [Episode(c, physics, bounds=bounds) for c in configs]
    n = len(episodes)
    T = steps if steps is not None else max(c.max_steps for c in configs)
    tape = Tape(record=False)
    state = wm.initial_state(n)
    pstate = policy.initial_state(n)
    goals = np.stack([stats.normalize_goal(c.target) for c in configs]).astype(np.float32)
    records = [[] for _ in range(n)]
    for t in range(T):
        obs = [ep.observe() for ep in episodes]
        imgs = np.stack([normalize_image(im) for im, _ in obs])
        z = wm.encode(tape, imgs)
        a_hat, pstate = policy.act(tape, z, state.h1, state.h2, goals, pstate)
        a_n = np.clip(a_hat.data.astype(np.float64), -1.0, 1.0)
        for i, ep in enumerate(episodes):
            act = PolicyAction.from_normalized(a_n[i], bounds)
            if return_records:
                im, dyn = obs[i]
                records[i].append(StepRecord(im, dyn, ep.world.cart.pose, act,
                                             ep.cmd + np.asarray(act.delta), ep.config.goal,
                                             ep.support, ep.collided))
            ep.step_relative(act.delta)
        _, state = wm.transition(tape, z, a_n.astype(np.float32), state)
    return (episodes, records) if return_records else episodes
