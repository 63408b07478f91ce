"""Roll out experts and write the successful episodes as a dataset."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..harness.formats import (DatasetManifest, Trajectory, write_manifest, write_trajectory)
from ..sim import PhysicsParams
from ..tasks import (ActionBounds, Episode, EpisodeConfig, NormStats, PolicyAction,
                     RandomizationSpec, StepRecord, TaskId, episode_outcome, sample_episode)

log = logging.getLogger(__name__)


class RecorderError(RuntimeError):
    pass


def record_episode(expert, config: EpisodeConfig, params: PhysicsParams | None = None,
                   bounds: ActionBounds = ActionBounds(), render: bool = True):
    """Run ``expert`` for a full episode.

    Returns ``(records, accels, outcome)``: one record per control step
    holding the pre-action observation and the pose update the step induced,
    the executed accelerations, and the outcome over the records.
    """
    expert.reset(config)
    ep = Episode(config, params, bounds, render=render)
    records, accels = [], []
    while not ep.done:
        image, dyn = ep.observe()
        support, collided = ep.support, ep.collided
        proprio = ep.world.cart.pose
        accel = np.asarray(expert.act(ep), dtype=float)
        delta = ep.step_accel(accel)
        accels.append(ep.last_accel.copy())
        records.append(StepRecord(image, dyn, proprio, PolicyAction.from_delta(delta, bounds),
                                  ep.cmd.copy(), config.goal, support, collided))
    return records, np.asarray(accels), episode_outcome(records, config)


def probe_success_rate(expert, task, spec: RandomizationSpec, n: int = 5, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n):
        cfg = sample_episode(task, spec, rng=rng)
        try:
            _, _, out = record_episode(expert, cfg, render=False)
        except Exception as exc:  # an infeasible plan counts as a failure
            log.debug("probe episode failed: %s", exc)
            continue
        ok += out.success
    return 100.0 * ok / n


def record_dataset(experts, task, n_train: int, n_eval: int, spec: RandomizationSpec,
                   out_dir, seed: int = 0, min_probe_sr: float = 60.0, probe_n: int = 5,
                   probe_window: int = 20, min_yield: float = 0.10,
                   max_attempts: int | None = None) -> DatasetManifest:
    """Record ``n_train + n_eval`` successful episodes round-robin over experts.

    Experts whose probe success rate is below ``min_probe_sr`` are skipped.
    The run aborts when fewer than ``min_yield`` of the first
    ``probe_window`` attempts succeed.
    """
    task = TaskId(task)
    out = Path(out_dir)
    for sub in ("train", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    usable = []
    for e in experts:
        sr = probe_success_rate(e, task, spec, probe_n, seed + 7)
        log.info("expert %s probe SR %.0f%%", getattr(e, "name", e), sr)
        if sr >= min_probe_sr:
            usable.append(e)
    if not usable:
        raise RecorderError(f"no expert reaches the probe success floor of {min_probe_sr}%")

    rng = np.random.default_rng(seed)
    need = n_train + n_eval
    max_attempts = max_attempts or 20 * need + probe_window
    kept, attempts = [], 0
    while len(kept) < need:
        if attempts >= max_attempts:
            raise RecorderError(f"only {len(kept)} successes in {attempts} attempts")
        cfg = sample_episode(task, spec, rng=rng)
        expert = usable[attempts % len(usable)]
        attempts += 1
        try:
            records, _, outcome = record_episode(expert, cfg)
        except Exception as exc:
            log.warning("episode seed %d failed: %s", cfg.seed, exc)
            outcome = None
        if outcome is not None and outcome.success:
            kept.append((cfg, records, getattr(expert, "name", "expert")))
        if attempts == probe_window and len(kept) / attempts < min_yield:
            raise RecorderError(f"success yield {len(kept)}/{attempts} is below {min_yield:.0%}")

    train = kept[:n_train]
    dyn = np.concatenate([[r.dynamics.as_vector() for r in recs] for _, recs, _ in train]) \
        if train else np.zeros((1, 18))
    stats = NormStats.from_dynamics(dyn)
    entries = []
    for i, (cfg, records, name) in enumerate(kept):
        split = "train" if i < n_train else "eval"
        idx = i if split == "train" else i - n_train
        rel = f"{split}/traj_{idx:05d}.dmtj"
        traj = Trajectory.from_records(cfg, records, meta={"expert": name})
        digest = write_trajectory(out / rel, traj)
        entries.append({"split": split, "file": rel, "sha256": digest,
                        "config_digest": cfg.digest(), "seed": cfg.seed, "expert": name})
    steps = len(kept[0][1]) if kept else 0
    manifest = DatasetManifest(task, n_train, n_eval, steps, spec, stats, entries, seed,
                               extra={"attempts": attempts,
                                      "experts": [getattr(e, "name", "expert") for e in usable]})
    write_manifest(out, manifest)
    log.info("recorded %d trajectories in %d attempts", len(kept), attempts)
    return manifest
