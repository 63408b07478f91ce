"""Dataset validation: checksums, byte round-trip, success predicates and the inverse oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tasks import ActionBounds, NormStats, episode_outcome, integrate_commands, preprocess_action
from .formats import CorruptFileError, Dataset, encode_trajectory

INVERSE_TOL = 1e-6      # metres / radians
ACTION_TOL = 1e-6


@dataclass
class ValidationReport:
    n_files: int = 0
    errors: list = field(default_factory=list)
    max_inverse_error: float = 0.0
    max_action_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self):
        head = (f"{self.n_files} files, inverse err {self.max_inverse_error:.2e}, "
                f"action err {self.max_action_error:.2e}")
        return head + ("" if self.ok else "\n" + "\n".join(self.errors))


def inverse_error(commands: np.ndarray, start_pose, dt: float) -> float:
    """Second-difference the pose commands, integrate back, return the max deviation."""
    commands = np.asarray(commands, dtype=float)
    start = np.asarray(start_pose, dtype=float)
    hist = np.vstack([start, start, commands])
    accels = [preprocess_action(hist[t + 2], hist[t + 1], hist[t], dt, limits=(np.inf,) * 3).as_array()
              for t in range(len(commands))]
    back = integrate_commands(accels, start, dt)
    return float(np.max(np.abs(back - commands))) if len(commands) else 0.0


def validate_dataset(directory, dt: float = 0.05) -> ValidationReport:
    rep = ValidationReport()
    try:
        ds = Dataset(directory)
        ds.verify()
    except (CorruptFileError, FileNotFoundError, KeyError, ValueError) as exc:
        rep.errors.append(f"manifest: {exc}")
        return rep
    bounds = ActionBounds(*ds.stats.action_bound)
    train_dyn = []
    for entry in ds.manifest.trajectories:
        rep.n_files += 1
        name = entry["file"]
        traj = ds.load(entry)
        raw = (Path(directory) / name).read_bytes()
        if encode_trajectory(traj) != raw:
            rep.errors.append(f"{name}: re-serialization is not byte-identical")
        out = episode_outcome(traj.to_records(bounds), traj.config)
        if not out.success:
            rep.errors.append(f"{name}: recorded episode does not satisfy the success predicate")
        start = (traj.config.cart_start[0], traj.config.cart_start[1], 0.0)
        err = inverse_error(traj.commands, start, dt)
        rep.max_inverse_error = max(rep.max_inverse_error, err)
        if err > INVERSE_TOL:
            rep.errors.append(f"{name}: inverse oracle error {err:.3g} m exceeds {INVERSE_TOL:g}")
        prev = np.vstack([np.asarray(start)[None], traj.commands[:-1]])
        aerr = float(np.max(np.abs(traj.commands - prev - traj.actions * bounds.as_array())))
        rep.max_action_error = max(rep.max_action_error, aerr)
        if aerr > ACTION_TOL:
            rep.errors.append(f"{name}: actions disagree with pose commands by {aerr:.3g}")
        if entry["split"] == "train":
            train_dyn.append(traj.dynamics)
    if train_dyn:
        ref = NormStats.from_dynamics(np.concatenate(train_dyn))
        got = np.array(ds.stats.v_min + ds.stats.v_max + ds.stats.a_min + ds.stats.a_max)
        want = np.array(ref.v_min + ref.v_max + ref.a_min + ref.a_max)
        if not np.allclose(got, want, rtol=1e-5, atol=1e-6):
            rep.errors.append("manifest: norm stats do not match the training split")
    return rep
