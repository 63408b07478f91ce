"""Proximal policy optimization on the state-based environment.

The actor outputs the mean of a diagonal Gaussian over a pre-squash action
``u``; the executed normalized acceleration is ``tanh(u)``, scaled by
``PPOConfig.accel_scale``.  The tanh Jacobian cancels in the probability
ratio, so the surrogate works directly with the Gaussian log-density of
``u``.  Evaluation uses the deterministic action ``tanh(mean)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import nn
from ..nn import Parameter, Tape
from ..sim import PhysicsParams
from ..tasks import (ActionBounds, EpisodeConfig, Episode, RandomizationSpec, TaskId,
                     sample_episode, task_reward)
from .state import OBS_DIM, observe_state

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class PPOError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    hidden: tuple = (64, 64)
    n_envs: int = 8
    horizon: int = 120
    minibatch: int = 240
    epochs: int = 8
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    lr: float = 3e-4
    total_steps: int = 100_000
    checkpoint_every: int = 20_000
    probe_episodes: int = 10
    init_log_std: float = -1.0
    accel_scale: tuple = (3.0, 3.0, 2.0)
    drop_penalty: float = 1.0
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["accel_scale"] = list(self.accel_scale)
        return d


# ---------------------------------------------------------------- environment

class StateEnv:
    """One episode at a time on the state observation, no rendering.

    Accelerations that would push the per-step pose update past 95% of the
    action bound are clipped, so every executed motion stays representable
    as a normalized policy action.
    """

    def __init__(self, task: TaskId, spec: RandomizationSpec, accel_scale=(3.0, 3.0, 2.0),
                 drop_penalty: float = 1.0, params: PhysicsParams | None = None,
                 bounds: ActionBounds = ActionBounds()):
        self.task = TaskId(task)
        self.spec = spec
        self.scale = np.asarray(accel_scale, dtype=float)
        self.drop_penalty = drop_penalty
        self.params = params or PhysicsParams()
        self.bounds = bounds
        self.episode = None

    def reset(self, config: EpisodeConfig) -> np.ndarray:
        self.episode = Episode(config, self.params, self.bounds, render=False)
        return observe_state(self.episode.world, config)

    def limit_accel(self, accel) -> np.ndarray:
        ep = self.episode
        dt2 = ep.dt ** 2
        prev = ep.cmd - ep.cmd_prev
        lim = 0.95 * self.bounds.as_array()
        delta = np.clip(prev + np.asarray(accel, float) * dt2, -lim, lim)
        return (delta - prev) / dt2

    def step(self, action) -> tuple:
        """``action`` is a normalized acceleration in [-1, 1]^3."""
        ep = self.episode
        accel = self.limit_accel(np.clip(action, -1, 1) * self.scale)
        ep.step_accel(accel)
        r = task_reward(ep.world, ep.config, ep.dropped, self.drop_penalty)
        return observe_state(ep.world, ep.config), r, ep.done


# ---------------------------------------------------------------- networks

def _mlp(rng, sizes, prefix):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.dense_params(rng, a, b, f"{prefix}.fc{i + 1}"))
    # small last layer keeps initial outputs near zero
    layers[-1]["W"].data *= 0.01
    return layers


def _mlp_forward(tape, layers, x):
    for layer in layers[:-1]:
        x = tape.tanh(tape.dense(x, layer["W"], layer["b"]))
    return tape.dense(x, layers[-1]["W"], layers[-1]["b"])


class ActorCritic:
    def __init__(self, config: PPOConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.actor = _mlp(rng, (OBS_DIM,) + tuple(config.hidden) + (3,), "actor")
        self.critic = _mlp(rng, (OBS_DIM,) + tuple(config.hidden) + (1,), "critic")
        self.log_std = Parameter(np.full(3, config.init_log_std), "actor.log_std")

    def actor_params(self) -> list:
        return [p for layer in self.actor for p in layer.values()] + [self.log_std]

    def critic_params(self) -> list:
        return [p for layer in self.critic for p in layer.values()]

    def parameters(self) -> list:
        return self.actor_params() + self.critic_params()

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            p.data[...] = state[p.name]

    def mean(self, obs, tape=None):
        tape = Tape(record=False) if tape is None else tape
        return _mlp_forward(tape, self.actor, np.asarray(obs, dtype=np.float32))

    def value(self, obs, tape=None):
        tape = Tape(record=False) if tape is None else tape
        v = _mlp_forward(tape, self.critic, np.asarray(obs, dtype=np.float32))
        return tape.reshape(v, (-1,))

    def act_deterministic(self, obs) -> np.ndarray:
        return np.tanh(self.mean(np.atleast_2d(obs)).data.astype(np.float64))


def gaussian_logp(u, mean, log_std) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(-1) - log_std.sum() - 0.5 * LOG_2PI * u.shape[-1]


# ---------------------------------------------------------------- GAE

def gae_advantages(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalized advantage estimates and returns.

    ``values[t]`` estimates the state before ``rewards[t]``; ``dones[t]``
    marks that the episode ended after step ``t`` so nothing is bootstrapped
    across it.  ``last_value`` bootstraps the final step when not done.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        nxt = last_value if t == n - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


# ---------------------------------------------------------------- losses (pure)

def ppo_losses(model: ActorCritic, batch: dict, clip: float):
    """Surrogate and value losses on a frozen batch; pure in its inputs."""
    mean = model.mean(batch["obs"]).data.astype(np.float64)
    log_std = model.log_std.data.astype(np.float64)
    logp = gaussian_logp(batch["u"], mean, log_std)
    ratio = np.exp(logp - batch["logp"])
    adv = batch["adv"]
    surr = np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)
    v = model.value(batch["obs"]).data.astype(np.float64)
    return float(-surr.mean()), float(0.5 * np.mean((v - batch["ret"]) ** 2))


def _update_minibatch(model: ActorCritic, mb: dict, cfg: PPOConfig, opt: tuple):
    n = len(mb["obs"])
    tape = Tape()
    mean_t = model.mean(mb["obs"], tape)
    mean = mean_t.data.astype(np.float64)
    log_std = model.log_std.data.astype(np.float64)
    std = np.exp(log_std)
    logp = gaussian_logp(mb["u"], mean, log_std)
    ratio = np.exp(logp - mb["logp"])
    adv = mb["adv"]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv
    # gradient flows only where the unclipped branch is the minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -adv * ratio, 0.0) / n
    diff = mb["u"] - mean
    dmean = dlogp[:, None] * diff / std ** 2
    dlog_std = (dlogp[:, None] * (diff ** 2 / std ** 2 - 1.0)).sum(0) - cfg.entropy_coef
    tape.backward(mean_t, dmean.astype(np.float32))
    model.log_std.grad += dlog_std.astype(np.float32)

    tape = Tape()
    v = model.value(mb["obs"], tape)
    vloss = tape.scale(tape.l2_loss(v, mb["ret"].astype(np.float32), batch_dims=1), 0.5 * cfg.value_coef)
    tape.backward(vloss)
    for p in model.parameters():
        if not np.all(np.isfinite(p.grad)):
            raise PPOError(f"non-finite gradient in {p.name}")
    # separate clipping: value gradients scale with the returns and would
    # otherwise dominate the shared norm
    nn.adam_step(model.actor_params(), opt[0], clip_norm=cfg.max_grad_norm)
    nn.adam_step(model.critic_params(), opt[1], clip_norm=cfg.max_grad_norm)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    step: int
    params: dict
    success_rate: float
    mean_return: float
    config: PPOConfig = field(default_factory=PPOConfig)

    def policy(self, task: TaskId, seed: int = 0) -> "PPOExpert":
        model = ActorCritic(self.config, seed)
        model.load_state_dict(self.params)
        return PPOExpert(model, name=f"ppo@{self.step}")


class PPOExpert:
    """Deterministic expert wrapper with the same interface as the scripted ones."""

    def __init__(self, model: ActorCritic, name: str = "ppo"):
        self.model = model
        self.name = name
        self.env = None

    def reset(self, config):
        return self

    def act(self, episode) -> np.ndarray:
        a = self.model.act_deterministic(observe_state(episode.world, episode.config))[0]
        scale = np.asarray(self.model.config.accel_scale)
        env = StateEnv(episode.config.task, RandomizationSpec(), scale)
        env.episode = episode
        return env.limit_accel(a * scale)


def run_policy_episode(model_or_fn, config: EpisodeConfig, cfg: PPOConfig, deterministic=True,
                       rng=None) -> tuple:
    """Roll out one episode; returns ``(return, Outcome)``."""
    env = StateEnv(config.task, RandomizationSpec(), cfg.accel_scale, cfg.drop_penalty)
    obs = env.reset(config)
    total, done = 0.0, False
    while not done:
        if callable(model_or_fn):
            a = model_or_fn(obs)
        else:
            a = model_or_fn.act_deterministic(obs)[0]
        obs, r, done = env.step(a)
        total += r
    return total, env.episode.outcome()


def random_policy(rng):
    """Uniformly random normalized accelerations."""
    return lambda obs: rng.uniform(-1.0, 1.0, 3)


def evaluate_returns(policy, configs, cfg: PPOConfig) -> tuple:
    """Mean return and success rate over a list of configs."""
    rets, succ = [], []
    for c in configs:
        r, out = run_policy_episode(policy, c, cfg)
        rets.append(r)
        succ.append(out.success)
    return float(np.mean(rets)), 100.0 * float(np.mean(succ))


def ppo_train(task, config: PPOConfig = PPOConfig(), spec: RandomizationSpec | None = None,
              seed: int = 0, log_path=None, probe_configs=None) -> list:
    """Train a state-based expert; returns checkpoints with probe metrics.

    The first checkpoint is always the random initialization (step 0).
    """
    task = TaskId(task)
    spec = spec or RandomizationSpec()
    rng = np.random.default_rng(seed)
    model = ActorCritic(config, seed)
    opt = (nn.AdamState(lr=config.lr), nn.AdamState(lr=config.lr))
    if probe_configs is None:
        probe_rng = np.random.default_rng(seed + 10_000)
        probe_configs = [sample_episode(task, spec, rng=probe_rng) for _ in range(config.probe_episodes)]
    env_rng = np.random.default_rng(rng.integers(2 ** 63))
    envs = [StateEnv(task, spec, config.accel_scale, config.drop_penalty) for _ in range(config.n_envs)]
    logf = open(log_path, "w") if log_path else None
    if logf:
        logf.write("step\treturn_mean\treturn_std\tprobe_sr\n")

    def checkpoint(step, ep_returns):
        mean_ret, sr = evaluate_returns(model, probe_configs, config)
        ck = Checkpoint(step, model.state_dict(), sr, mean_ret, config)
        std = float(np.std(ep_returns)) if ep_returns else 0.0
        if logf:
            logf.write(f"{step}\t{mean_ret:.4f}\t{std:.4f}\t{sr:.1f}\n")
            logf.flush()
        log.info("ppo step %d return %.3f probe SR %.1f", step, mean_ret, sr)
        return ck

    checkpoints = [checkpoint(0, [])]
    steps = 0
    next_ck = config.checkpoint_every
    recent = []
    try:
        while steps < config.total_steps:
            obs_b, u_b, logp_b, adv_b, ret_b = [], [], [], [], []
            for env in envs:
                cfg_ep = sample_episode(task, spec, rng=env_rng)
                obs = env.reset(cfg_ep)
                O, U, L, R, D = [], [], [], [], []
                done = False
                log_std = model.log_std.data.astype(np.float64)
                while not done:
                    mean = model.mean(obs[None]).data[0].astype(np.float64)
                    u = mean + np.exp(log_std) * rng.standard_normal(3)
                    O.append(obs)
                    U.append(u)
                    L.append(gaussian_logp(u[None], mean[None], log_std)[0])
                    obs, r, done = env.step(np.tanh(u))
                    R.append(r)
                    D.append(done)
                O = np.asarray(O, dtype=np.float32)
                V = model.value(O).data.astype(np.float64)
                adv, ret = gae_advantages(R, V, D, config.gamma, config.gae_lambda)
                obs_b.append(O), u_b.append(np.asarray(U)), logp_b.append(np.asarray(L))
                adv_b.append(adv), ret_b.append(ret)
                recent.append(float(np.sum(R)))
                steps += len(R)
            batch = {"obs": np.concatenate(obs_b), "u": np.concatenate(u_b),
                     "logp": np.concatenate(logp_b), "ret": np.concatenate(ret_b)}
            adv = np.concatenate(adv_b)
            batch["adv"] = (adv - adv.mean()) / (adv.std() + 1e-8)
            n = len(adv)
            for _ in range(config.epochs):
                perm = rng.permutation(n)
                for s in range(0, n, config.minibatch):
                    idx = perm[s:s + config.minibatch]
                    _update_minibatch(model, {k: v[idx] for k, v in batch.items()}, config, opt)
            if steps >= next_ck or steps >= config.total_steps:
                checkpoints.append(checkpoint(steps, recent))
                recent = []
                next_ck += config.checkpoint_every
    except nn.NonFiniteError as exc:
        raise PPOError(f"non-finite value at env step {steps}: {exc}") from exc
    finally:
        if logf:
            logf.close()
    return checkpoints


def select_checkpoints(checkpoints, n: int = 3, fraction: float = 0.8) -> list:
    """Last ``n`` checkpoints whose probe SR is at least ``fraction`` of the best."""
    best = max(c.success_rate for c in checkpoints)
    good = [c for c in checkpoints if c.success_rate >= fraction * best and c.success_rate > 0]
    return good[-n:]


def save_checkpoint(path, ck: Checkpoint):
    nn.save_tensors(path, ck.params, meta={"kind": "ppo", "step": ck.step,
                                           "success_rate": ck.success_rate,
                                           "mean_return": ck.mean_return,
                                           "config": ck.config.to_dict()})


def load_checkpoint(path) -> Checkpoint:
    params, meta = nn.load_tensors(path)
    c = dict(meta["config"])
    c["hidden"] = tuple(c["hidden"])
    c["accel_scale"] = tuple(c["accel_scale"])
    return Checkpoint(meta["step"], params, meta["success_rate"], meta["mean_return"], PPOConfig(**c))
