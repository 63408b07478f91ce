"""Training regimes: decoupled world model, frozen-latent policy, joint and end-to-end.

Every regime iterates full-episode (or fixed-length) windows in shuffled
minibatches, takes one Adam step per minibatch and appends one CSV row per
epoch to an optional loss log.  Runs are deterministic for a fixed seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import nn
from ..nn import AdamState, NonFiniteError, Tape, adam_step, load_tensors, save_tensors
from ..tasks import ConfigurationError, NormStats
from ..worldmodel import (Batch, FeedforwardPolicy, LossWeights, RecurrentPolicy, WorldModel,
                          WorldModelConfig, loss_joint, loss_policy, loss_rgb, loss_world_model,
                          make_policy, normalize_image, per_head_mse, policy_unroll_cached, unroll)
from .formats import Dataset, sha256_file

log = logging.getLogger(__name__)

REGIMES = ("decoupled_wm", "decoupled_policy", "joint", "e2e")
DEFAULT_EPOCHS = {"decoupled_wm": 200, "decoupled_policy": 100, "joint": 200, "e2e": 200}


class TrainingError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite; carries the step index."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at optimizer step {step}: {detail}")
        self.step = step


class StaleCacheError(RuntimeError):
    pass


class ArchitectureError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    regime: str = "decoupled_wm"
    weights: LossWeights = field(default_factory=LossWeights)
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    policy: str = "feedforward"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    epochs: int | None = None
    batch_size: int = 8
    window: int | None = None      # None: full episodes
    seeds: tuple = (0, 1, 2)
    wm_checkpoint: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.policy not in ("feedforward", "recurrent"):
            raise ConfigurationError(f"policy must be feedforward or recurrent, got {self.policy!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.window is not None and self.window < 2:
            raise ConfigurationError("window must be >= 2 steps")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def n_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.regime] if self.epochs is None else int(self.epochs)

    def validate(self):
        if self.regime == "decoupled_policy" and not self.wm_checkpoint:
            raise ConfigurationError("decoupled_policy requires wm_checkpoint")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        elif isinstance(d.get("weights"), str):
            d["weights"] = LossWeights.preset(d["weights"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = WorldModelConfig.from_dict(d["model"])
        elif d.get("model") == "desk":
            d["model"] = WorldModelConfig.desk()
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- data

@dataclass
class SequenceData:
    """All trajectories of one split stacked along a leading axis.

    Images stay ``uint8`` until a batch is drawn; the rest is normalized.
    """

    images: np.ndarray       # (N, T, 64, 64, 3) uint8
    actions: np.ndarray      # (N, T, 3)
    goals: np.ndarray        # (N, T, 2)
    P: np.ndarray
    V: np.ndarray
    A: np.ndarray
    files: list

    def __len__(self):
        return len(self.actions)

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    def batch(self, idx, start: int = 0, stop: int | None = None) -> Batch:
        sl = slice(start, stop)
        return Batch(normalize_image(self.images[idx, sl]), self.actions[idx, sl],
                     self.goals[idx, sl], self.P[idx, sl], self.V[idx, sl], self.A[idx, sl])


def load_sequences(dataset: Dataset, split: str) -> SequenceData:
    trajs = dataset.trajectories(split)
    if not trajs:
        raise ConfigurationError(f"dataset split {split!r} is empty")
    lengths = {len(t) for t in trajs}
    if len(lengths) != 1:
        raise ConfigurationError(f"trajectories in {split!r} have mixed lengths {sorted(lengths)}")
    stats: NormStats = dataset.stats
    dyn = np.stack([stats.normalize_dynamics(t.dynamics) for t in trajs]).astype(np.float32)
    return SequenceData(
        images=np.stack([t.images for t in trajs]),
        actions=np.stack([t.actions for t in trajs]).astype(np.float32),
        goals=np.stack([stats.normalize_goal(t.goals) for t in trajs]).astype(np.float32),
        P=dyn[..., :6], V=dyn[..., 6:12], A=dyn[..., 12:],
        files=[e["file"] for e in dataset.entries(split)])


def _windows(T: int, window: int | None) -> list:
    if window is None or window >= T:
        return [(0, T)]
    return [(s, s + window) for s in range(0, T - window + 1, window)]


def _minibatches(n: int, T: int, config: TrainConfig, rng) -> list:
    """Shuffled (trajectory indices, start, stop) triples for one epoch."""
    out = []
    for start, stop in _windows(T, config.window):
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            out.append((np.sort(order[i:i + config.batch_size]), start, stop))
    perm = rng.permutation(len(out))
    return [out[i] for i in perm]


# ---------------------------------------------------------------- checkpoints

def save_model(path, wm: WorldModel | None = None, policy=None, meta: dict | None = None) -> str:
    """Write world-model and/or policy parameters with architecture descriptors.

    Returns the SHA-256 of the written file.
    """
    tensors, arch = {}, {}
    if wm is not None:
        tensors.update(wm.state_dict())
        arch["worldmodel"] = wm.describe()
    if policy is not None:
        tensors.update(policy.state_dict())
        arch["policy"] = policy.describe()
    save_tensors(path, tensors, {"architecture": arch, **(meta or {})})
    return sha256_file(path)


def _build(desc: dict, tensors: dict, seed: int = 0):
    cfg = WorldModelConfig.from_dict(desc["config"])
    kind = desc["kind"]
    if kind == "worldmodel":
        m = WorldModel(cfg, seed)
    elif kind == "policy_feedforward":
        m = FeedforwardPolicy(cfg, seed)
    elif kind == "policy_recurrent":
        m = RecurrentPolicy(cfg, seed)
    else:
        raise ArchitectureError(f"unknown module kind {kind!r}")
    for name, p in m.params.items():
        if name not in tensors:
            raise ArchitectureError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != p.shape:
            raise ArchitectureError(f"{name}: checkpoint shape {tensors[name].shape} != {p.shape}")
    m.load_state_dict(tensors)
    return m


def load_model(path, expect: WorldModelConfig | None = None):
    """Returns ``(world_model or None, policy or None, meta)``."""
    tensors, meta = load_tensors(path)
    arch = meta.get("architecture", {})
    wm = _build(arch["worldmodel"], tensors) if "worldmodel" in arch else None
    pi = _build(arch["policy"], tensors) if "policy" in arch else None
    if expect is not None:
        got = (wm or pi).config
        if got != expect:
            raise ArchitectureError(f"{path}: architecture {got} does not match {expect}")
    return wm, pi, meta


def load_agent(path):
    """World model and policy for evaluation.

    A decoupled policy checkpoint references its frozen world model by path
    and hash; combined checkpoints carry both.
    """
    wm, pi, meta = load_model(path)
    if pi is None:
        raise ArchitectureError(f"{path}: no policy in checkpoint")
    if wm is None:
        ref = meta.get("worldmodel_ref")
        if not ref:
            raise ArchitectureError(f"{path}: policy checkpoint has no world-model reference")
        wm_path = Path(ref["path"])
        if not wm_path.is_absolute():
            wm_path = Path(path).parent / wm_path
        if sha256_file(wm_path) != ref["sha256"]:
            raise FrozenModelError(f"{wm_path}: world-model hash differs from the one the policy was trained on")
        wm, _, _ = load_model(wm_path)
    return wm, pi, meta


# ---------------------------------------------------------------- results and logs

@dataclass
class TrainResult:
    checkpoint: Path | None
    sha256: str | None
    history: list                  # one dict per epoch
    wm: WorldModel | None = None
    policy: object = None
    log_path: Path | None = None

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")


class _LossLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.rows = []

    def add(self, row: dict):
        self.rows.append(row)
        if self.path is None:
            return
        new = len(self.rows) == 1
        with open(self.path, "w" if new else "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)


def _check_finite(loss, step: int) -> float:
    v = float(np.asarray(loss.data))
    if not np.isfinite(v):
        raise TrainingError(step, f"loss = {v}")
    return v


def _components(out, batch: Batch, weights: LossWeights) -> dict:
    """Unweighted loss terms for logging, evaluated without recording."""
    t = Tape(record=False)
    comp = {}
    if out.image_hat is not None:
        comp["rgb"] = float(t.l2_norm_loss(out.image_hat.data, batch.images[:, 1:], batch_dims=2).data)
        comp["latent"] = float(t.l2_norm_loss(out.z_hat.data, out.z.data[:, 1:], batch_dims=2).data)
    for k, v in out.dyn_hat.items():
        comp[k] = float(t.l2_norm_loss(v.data, getattr(batch, k)[:, 1:], batch_dims=2).data)
    if out.a_hat is not None:
        comp["policy"] = float(t.l1_loss(out.a_hat.data, batch.actions, batch_dims=2).data)
    return comp


def _run_epochs(config: TrainConfig, data: SequenceData, seed: int, params: list,
                step_fn, loss_log: _LossLog) -> list:
    """Shared loop: ``step_fn(tape, batch) -> (loss, components)``."""
    rng = np.random.default_rng(seed + 7919)
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    history, step = [], 0
    for p in params:
        p.zero_grad()
    for epoch in range(config.n_epochs):
        tot, comps, n = 0.0, {}, 0
        for idx, start, stop in _minibatches(len(data), data.T, config, rng):
            tape = Tape()
            try:
                loss, comp = step_fn(tape, idx, start, stop)
                value = _check_finite(loss, step)
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(step, str(exc)) from None
            for p in params:
                if not np.all(np.isfinite(p.grad)):
                    raise TrainingError(step, f"gradient of {p.name}")
            adam_step(params, opt, config.clip_norm)
            step += 1
            w = len(idx)
            tot += value * w
            for k, v in comp.items():
                comps[k] = comps.get(k, 0.0) + v * w
            n += w
        row = {"epoch": epoch, "step": step, "loss": tot / n, **{k: v / n for k, v in comps.items()}}
        loss_log.add(row)
        history.append(row)
        log.debug("epoch %d loss %.5f", epoch, row["loss"])
    return history


def _weights_for_decoders(weights: LossWeights) -> tuple:
    """Parameter groups that receive a gradient under ``weights``."""
    groups = ["phi1", "phi2", "zeta1"]
    if weights.any_dynamics:
        groups += ["zeta_dyn"]
        groups += [g for g, w in (("zeta2", weights.w_P), ("zeta3", weights.w_V),
                                   ("zeta4", weights.w_A)) if w > 0]
    return tuple(groups)


# ---------------------------------------------------------------- regimes

def train_decoupled_wm(dataset: Dataset, config: TrainConfig, seed: int = 0, out_path=None,
                       log_path=None, data: SequenceData | None = None) -> TrainResult:
    """Fit encoder, transition and decoders on teacher-forced windows."""
    data = data or load_sequences(dataset, "train")
    wm = WorldModel(config.model, seed)
    weights = config.weights
    use_dyn = weights.any_dynamics
    # heads with zero weight are left out of the optimizer entirely
    params = wm.parameters(_weights_for_decoders(weights))

    def step(tape, idx, start, stop):
        batch = data.batch(idx, start, stop)
        out = unroll(tape, wm, batch, decode_rgb=True, decode_dynamics=use_dyn)
        return loss_world_model(tape, out, batch, weights), _components(out, batch, weights)

    history = _run_epochs(config, data, seed, params, step, _LossLog(log_path))
    digest = None
    if out_path is not None:
        digest = save_model(out_path, wm=wm, meta={"regime": "decoupled_wm", "seed": seed,
                                                   "train_config": config.to_dict(),
                                                   "dataset_hash": dataset.content_hash()})
    return TrainResult(Path(out_path) if out_path else None, digest, history, wm=wm,
                       log_path=Path(log_path) if log_path else None)


@dataclass
class LatentCache:
    """Teacher-forced latents ``z_t`` and states ``h_t`` per split.

    Arrays are ``(N, T, .)``; ``h1[:, 0]`` and ``h2[:, 0]`` are the zero state.
    """

    dataset_hash: str
    checkpoint_hash: str
    splits: dict            # split -> {"z", "h1", "h2"}

    def to_tensors(self) -> dict:
        return {f"{s}/{k}": v for s, d in self.splits.items() for k, v in d.items()}


def compute_latents(wm: WorldModel, data: SequenceData, batch_size: int = 8) -> dict:
    tape = Tape(record=False)
    zs, h1s, h2s = [], [], []
    for i in range(0, len(data), batch_size):
        idx = np.arange(i, min(i + batch_size, len(data)))
        out = unroll(tape, wm, data.batch(idx), decode_rgb=False, decode_dynamics=False)
        zs.append(out.z.data)
        h1s.append(np.stack([h.data for h in out.h1], axis=1))
        h2s.append(np.stack([h.data for h in out.h2], axis=1))
    return {"z": np.concatenate(zs).astype(np.float32), "h1": np.concatenate(h1s).astype(np.float32),
            "h2": np.concatenate(h2s).astype(np.float32)}


def cache_path(cache_dir, dataset_hash: str, checkpoint_hash: str) -> Path:
    return Path(cache_dir) / f"latents_{dataset_hash[:16]}_{checkpoint_hash[:16]}.dmnn"


def precompute_latents(dataset: Dataset, wm_checkpoint, cache_dir=None,
                       expect: WorldModelConfig | None = None, splits=("train", "eval")) -> LatentCache:
    """Run the frozen world model over every trajectory and cache the result.

    An existing cache file for the same (dataset, checkpoint) pair is reused.
    """
    ck_hash = sha256_file(wm_checkpoint)
    ds_hash = dataset.content_hash()
    if cache_dir is not None:
        path = cache_path(cache_dir, ds_hash, ck_hash)
        if path.exists():
            return load_latent_cache(path, dataset, wm_checkpoint)
    wm, _, _ = load_model(wm_checkpoint, expect=expect)
    if wm is None:
        raise ArchitectureError(f"{wm_checkpoint}: no world model in checkpoint")
    cache = LatentCache(ds_hash, ck_hash,
                        {s: compute_latents(wm, load_sequences(dataset, s)) for s in splits})
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_tensors(path, cache.to_tensors(), {"kind": "latent_cache", "dataset_hash": ds_hash,
                                               "checkpoint_hash": ck_hash})
    return cache


def load_latent_cache(path, dataset: Dataset | None = None, wm_checkpoint=None) -> LatentCache:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "latent_cache":
        raise StaleCacheError(f"{path}: not a latent cache")
    if dataset is not None and meta["dataset_hash"] != dataset.content_hash():
        raise StaleCacheError(f"{path}: dataset hash changed since the cache was written")
    if wm_checkpoint is not None and meta["checkpoint_hash"] != sha256_file(wm_checkpoint):
        raise StaleCacheError(f"{path}: world-model checkpoint changed since the cache was written")
    splits = {}
    for key, arr in tensors.items():
        s, k = key.split("/")
        splits.setdefault(s, {})[k] = arr
    return LatentCache(meta["dataset_hash"], meta["checkpoint_hash"], splits)


def policy_loss_cached(policy, cache: LatentCache, data: SequenceData, split: str = "eval",
                       batch_size: int = 16) -> float:
    """Mean L1 policy loss over a split of cached latents."""
    lat = cache.splits[split]
    tape = Tape(record=False)
    tot = 0.0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        a = policy_unroll_cached(tape, policy, lat["z"][sl], lat["h1"][sl], lat["h2"][sl],
                                 data.goals[sl])
        tot += float(loss_policy(tape, data.actions[sl], a).data) * len(data.actions[sl])
    return tot / len(data)


def train_policy_frozen(cache: LatentCache, dataset: Dataset, config: TrainConfig, seed: int = 0,
                        out_path=None, log_path=None, data: SequenceData | None = None) -> TrainResult:
    """Fit only the policy on cached latents; the world model is never loaded for writing.

    The world-model checkpoint is re-hashed after training and must match
    both the cache key and the hash taken before training.
    """
    config.validate()
    wm_path = Path(config.wm_checkpoint)
    before = sha256_file(wm_path)
    if before != cache.checkpoint_hash:
        raise StaleCacheError("latent cache was computed from a different world-model checkpoint")
    if cache.dataset_hash != dataset.content_hash():
        raise StaleCacheError("latent cache was computed from a different dataset")
    data = data or load_sequences(dataset, "train")
    lat = cache.splits["train"]
    policy = make_policy(config.policy, config.model, seed)
    weights = config.weights

    def step(tape, idx, start, stop):
        sl = slice(start, stop)
        a = policy_unroll_cached(tape, policy, lat["z"][idx, sl], lat["h1"][idx, sl],
                                 lat["h2"][idx, sl], data.goals[idx, sl])
        loss = loss_policy(tape, data.actions[idx, sl], a)
        return loss, {"policy": float(loss.data)}

    history = _run_epochs(config, data, seed, policy.parameters(), step, _LossLog(log_path))
    after = sha256_file(wm_path)
    if after != before:
        raise FrozenModelError(f"{wm_path} changed during policy training")
    digest = None
    if out_path is not None:
        try:
            ref_path = str(wm_path.resolve().relative_to(Path(out_path).resolve().parent))
        except ValueError:
            ref_path = str(wm_path.resolve())
        digest = save_model(out_path, policy=policy, meta={
            "regime": "decoupled_policy", "seed": seed, "train_config": config.to_dict(),
            "dataset_hash": cache.dataset_hash, "loss_weights": asdict(weights),
            "worldmodel_ref": {"path": ref_path, "sha256": after}})
    return TrainResult(Path(out_path) if out_path else None, digest, history, policy=policy,
                       log_path=Path(log_path) if log_path else None)


def _train_combined(dataset, config: TrainConfig, seed: int, out_path, log_path, data, regime):
    data = data or load_sequences(dataset, "train")
    wm = WorldModel(config.model, seed)
    policy = make_policy(config.policy, config.model, seed + 1)
    weights = config.weights
    if regime == "joint":
        groups = _weights_for_decoders(weights)
        use_dyn = weights.any_dynamics
        params = wm.parameters(groups) + policy.parameters()

        def step(tape, idx, start, stop):
            batch = data.batch(idx, start, stop)
            out = unroll(tape, wm, batch, policy=policy, decode_rgb=True, decode_dynamics=use_dyn)
            return loss_joint(tape, out, batch, weights), _components(out, batch, weights)
    else:
        # end-to-end: only the policy loss, decoders are never touched
        params = wm.parameters(WorldModel.WM_GROUPS) + policy.parameters()

        def step(tape, idx, start, stop):
            batch = data.batch(idx, start, stop)
            out = unroll(tape, wm, batch, policy=policy, decode_rgb=False, decode_dynamics=False)
            loss = loss_policy(tape, batch.actions, out.a_hat)
            return loss, {"policy": float(loss.data)}

    history = _run_epochs(config, data, seed, params, step, _LossLog(log_path))
    digest = None
    if out_path is not None:
        digest = save_model(out_path, wm=wm, policy=policy, meta={
            "regime": regime, "seed": seed, "train_config": config.to_dict(),
            "dataset_hash": dataset.content_hash()})
    return TrainResult(Path(out_path) if out_path else None, digest, history, wm=wm, policy=policy,
                       log_path=Path(log_path) if log_path else None)


def train_joint(dataset: Dataset, config: TrainConfig, seed: int = 0, out_path=None,
                log_path=None, data: SequenceData | None = None) -> TrainResult:
    """One optimizer over encoder, transition, decoders and policy on the joint loss."""
    return _train_combined(dataset, config, seed, out_path, log_path, data, "joint")


def train_e2e(dataset: Dataset, config: TrainConfig, seed: int = 0, out_path=None,
              log_path=None, data: SequenceData | None = None) -> TrainResult:
    """Policy loss only, back-propagated through policy, transition and encoder."""
    return _train_combined(dataset, config, seed, out_path, log_path, data, "e2e")


def heldout_dynamics_mse(wm: WorldModel, data: SequenceData, batch_size: int = 8) -> dict:
    """Per-head next-step MSE in normalized units, averaged over trajectories."""
    tape = Tape(record=False)
    acc, n = {}, 0
    for i in range(0, len(data), batch_size):
        idx = np.arange(i, min(i + batch_size, len(data)))
        batch = data.batch(idx)
        out = unroll(tape, wm, batch, decode_rgb=False, decode_dynamics=True)
        for k, v in per_head_mse(out, batch).items():
            acc[k] = acc.get(k, 0.0) + v * len(idx)
        n += len(idx)
    return {k: v / n for k, v in acc.items()}


__all__ = [
    "REGIMES", "TrainConfig", "TrainResult", "TrainingError", "StaleCacheError", "ArchitectureError",
    "FrozenModelError", "SequenceData", "LatentCache", "load_sequences", "save_model", "load_model",
    "load_agent", "train_decoupled_wm", "precompute_latents", "load_latent_cache", "compute_latents",
    "cache_path", "train_policy_frozen", "train_joint", "train_e2e", "policy_loss_cached",
    "heldout_dynamics_mse",
]
