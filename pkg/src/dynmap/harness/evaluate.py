"""Evaluation protocol: closed-loop rollouts, DR / PE / SR and their reports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tasks import ActionBounds, Episode, Outcome, TaskId
from ..worldmodel import rollout_inference
from .formats import Dataset

log = logging.getLogger(__name__)

DEFAULT_EPISODES = 50
DEFAULT_SEEDS = (0, 1, 2)


def episode_metrics(outcomes, task=TaskId.BALANCE_REACHING) -> dict:
    """DR and SR in percent, PE in mm over the episodes that did not drop.

    For bin dropping only SR is meaningful; DR and PE are reported as NaN.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes")
    n = len(outcomes)
    sr = 100.0 * sum(o.success for o in outcomes) / n
    if TaskId(task) is TaskId.BIN_DROPPING:
        return {"DR": float("nan"), "PE": float("nan"), "SR": sr, "n": n}
    dr = 100.0 * sum(o.dropped for o in outcomes) / n
    kept = [o.position_error for o in outcomes if not o.dropped]
    pe = float(np.mean(kept)) if kept else float("nan")
    return {"DR": dr, "PE": pe, "SR": sr, "n": n}


@dataclass
class Metrics:
    """Per-seed DR / PE / SR with mean and (population) std over seeds."""

    task: TaskId
    seeds: list
    per_seed: list                      # dicts from episode_metrics
    episodes: list = field(default_factory=list)   # per seed: list of Outcome

    def _col(self, key) -> np.ndarray:
        return np.array([m[key] for m in self.per_seed], dtype=float)

    def mean(self, key: str) -> float:
        v = self._col(key)
        v = v[np.isfinite(v)]
        return float(v.mean()) if len(v) else float("nan")

    def std(self, key: str) -> float:
        v = self._col(key)
        v = v[np.isfinite(v)]
        return float(v.std()) if len(v) else float("nan")

    def median(self, key: str) -> float:
        v = self._col(key)
        v = v[np.isfinite(v)]
        return float(np.median(v)) if len(v) else float("nan")

    @property
    def keys(self) -> tuple:
        return ("SR",) if self.task is TaskId.BIN_DROPPING else ("DR", "PE", "SR")

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in self.keys}

    def __str__(self) -> str:
        return "  ".join(f"{k} {m:.1f} ({s:.1f})" for k, (m, s) in self.summary().items())

    @classmethod
    def from_outcomes(cls, task, per_seed_outcomes: dict) -> "Metrics":
        task = TaskId(task)
        seeds = list(per_seed_outcomes)
        return cls(task, seeds, [episode_metrics(per_seed_outcomes[s], task) for s in seeds],
                   [list(per_seed_outcomes[s]) for s in seeds])

    def write_csv(self, path):
        """One row per (seed, episode); summary rows can be recomputed from it."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "episode", "dropped", "drop_step", "position_error_mm", "success"])
            for seed, outs in zip(self.seeds, self.episodes):
                for i, o in enumerate(outs):
                    pe = "" if o.position_error is None else f"{o.position_error:.6f}"
                    w.writerow([seed, i, int(o.dropped), "" if o.drop_step is None else o.drop_step,
                                pe, int(o.success)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed"] + list(self.keys))
            for seed, m in zip(self.seeds, self.per_seed):
                w.writerow([seed] + [f"{m[k]:.6f}" for k in self.keys])
            w.writerow(["mean"] + [f"{self.mean(k):.6f}" for k in self.keys])
            w.writerow(["std"] + [f"{self.std(k):.6f}" for k in self.keys])


def read_episode_csv(path, task) -> Metrics:
    """Rebuild :class:`Metrics` from a per-episode CSV."""
    per_seed = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            pe = float(row["position_error_mm"]) if row["position_error_mm"] else None
            ds = int(row["drop_step"]) if row["drop_step"] else None
            per_seed.setdefault(int(row["seed"]), []).append(
                Outcome(bool(int(row["dropped"])), pe, bool(int(row["success"])), ds))
    return Metrics.from_outcomes(task, per_seed)


def plot_errors(error_curves: list, path, title: str = ""):
    """Cart-to-goal error over time for a set of episodes, one line each."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for e in error_curves:
        ax.plot(np.arange(1, len(e) + 1), e, lw=0.8, alpha=0.6)
    ax.axhline(50.0, color="k", ls="--", lw=0.8)
    ax.set_xlabel("control step")
    ax.set_ylabel("position error [mm]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def evaluate_agents(agents, configs, task=None, seeds=None, out_dir=None, stats=None,
                    physics=None, label: str = "") -> Metrics:
    """Closed-loop evaluation of one ``(world_model, policy)`` pair per seed.

    Every agent runs on the same ``configs``.  With ``out_dir`` set, writes a
    per-episode CSV, a summary CSV and one error-trajectory plot per seed.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("need at least one evaluation episode")
    task = TaskId(task or configs[0].task)
    seeds = list(seeds) if seeds is not None else list(range(len(agents)))
    if len(seeds) != len(agents):
        raise ValueError("one seed label per agent")
    if stats is None:
        raise ValueError("normalization stats are required")
    per_seed, curves = {}, {}
    for seed, (wm, policy) in zip(seeds, agents):
        episodes = rollout_inference(policy, wm, configs, stats, physics=physics)
        per_seed[seed] = [ep.outcome() for ep in episodes]
        curves[seed] = [ep.errors_mm for ep in episodes]
    metrics = Metrics.from_outcomes(task, per_seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out / "episodes.csv")
        metrics.write_summary_csv(out / "summary.csv")
        for seed in seeds:
            plot_errors(curves[seed], out / f"errors_seed{seed}.png", f"{label} seed {seed}".strip())
    return metrics


def evaluate(checkpoints, dataset: Dataset, n_episodes: int = DEFAULT_EPISODES, seeds=None,
             out_dir=None, label: str = "") -> Metrics:
    """Evaluate one checkpoint per seed on the dataset's pinned eval split."""
    from .training import load_agent

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    configs = dataset.eval_configs()[:n_episodes]
    if len(configs) < n_episodes:
        log.warning("eval split holds %d episodes, %d requested", len(configs), n_episodes)
    agents = [load_agent(c)[:2] for c in checkpoints]
    return evaluate_agents(agents, configs, dataset.task, seeds, out_dir, dataset.stats, label=label)


def replay_trajectory(traj, physics=None, bounds: ActionBounds | None = None) -> Episode:
    """Re-execute a recorded trajectory's actions open loop from its config."""
    bounds = bounds or ActionBounds()
    ep = Episode(traj.config, physics, bounds, render=False)
    for a in traj.actions:
        ep.step_relative(a * bounds.as_array())
    return ep


def replay_dataset(dataset: Dataset, split: str = "eval", physics=None) -> Metrics:
    """Oracle replay of recorded actions; a valid expert dataset scores SR 100."""
    bounds = ActionBounds(*dataset.stats.action_bound)
    outs = [replay_trajectory(t, physics, bounds).outcome() for t in dataset.trajectories(split)]
    return Metrics.from_outcomes(dataset.task, {0: outs})


__all__ = ["DEFAULT_EPISODES", "DEFAULT_SEEDS", "Metrics", "episode_metrics", "evaluate",
           "evaluate_agents", "plot_errors", "read_episode_csv", "replay_dataset",
           "replay_trajectory"]
