"""A block balanced on an acceleration-driven cart, one scripted episode.

Runs the straight-line expert on the nominal reaching episode, prints the
outcome, writes the 120 rendered frames plus a contact sheet, and plots
the cart-to-goal error over time.

    python demos/01_cart_and_block.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from dynmap.expert.recorder import record_episode
from dynmap.expert.scripted import StraightLineExpert, LPathExpert
from dynmap.harness.evaluate import plot_errors
from dynmap.render import export_frames
from dynmap.tasks import Episode, TaskId, nominal_episode

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

# %% one episode with each of the two reaching experts
cfg = nominal_episode(TaskId.BALANCE_REACHING, distance=0.4)
print(f"cart starts at {cfg.cart_start}, goal at {cfg.target}")
curves = []
for expert in (StraightLineExpert(), LPathExpert()):
    records, accels, outcome = record_episode(expert, cfg)
    print(f"{expert.name:9s} success={outcome.success} dropped={outcome.dropped} "
          f"final error {outcome.position_error:.1f} mm, peak |a| {np.abs(accels[:, :2]).max():.2f} m/s^2")
    # replay the executed accelerations to get the error curve
    ep = Episode(cfg, render=False)
    for a in accels:
        ep.step_accel(a)
    curves.append(ep.errors_mm)

# %% frames of the last episode and the error curves
paths = export_frames(records, out / "frames")
print(f"wrote {len(paths)} images to {out / 'frames'}")
plot_errors(curves, out / "errors.png", "scripted experts")
print(f"error plot -> {out / 'errors.png'}")

# %% the dynamics the world model is asked to predict, mid-move
mid = records[12].dynamics
print("cart+block position  ", np.round(mid.P, 3))
print("cart+block velocity  ", np.round(mid.V, 3))
print("cart+block accel     ", np.round(mid.A, 3))
