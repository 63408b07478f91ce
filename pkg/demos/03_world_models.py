"""Does supervising dynamics help the world model?

Trains two desk-scale world models on the same demonstrations, one with
image reconstruction only and one that also predicts velocities, then fits
a feedforward policy on each frozen latent space and compares held-out
policy loss and closed-loop success.

    python demos/03_world_models.py [out_dir] [epochs]
"""
import sys
from pathlib import Path

from dynmap.expert.recorder import record_dataset
from dynmap.expert.scripted import expert_variants
from dynmap.harness.evaluate import evaluate_agents
from dynmap.harness.formats import Dataset
from dynmap.harness.training import (TrainConfig, heldout_dynamics_mse, load_sequences,
                                     policy_loss_cached, precompute_latents, train_decoupled_wm,
                                     train_policy_frozen)
from dynmap.tasks import RandomizationSpec, TaskId
from dynmap.worldmodel import LossWeights, WorldModelConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 8
model = WorldModelConfig.desk()

# %% data
root = out / "dataset"
if not (root / "manifest.json").exists():
    task = TaskId.BALANCE_REACHING
    record_dataset(expert_variants(task), task, 100, 30, RandomizationSpec().reduced(), root, seed=0)
ds = Dataset(root)
train, held = load_sequences(ds, "train"), load_sequences(ds, "eval")

# %% one world model per loss preset, then a frozen-latent policy on each
for preset in ("rgb", "v"):
    wm_path = out / f"wm_{preset}.dmnn"
    res = train_decoupled_wm(ds, TrainConfig(model=model, weights=LossWeights.preset(preset),
                                             epochs=epochs), out_path=wm_path, data=train)
    cache = precompute_latents(ds, wm_path, cache_dir=out / "cache")
    pc = TrainConfig(regime="decoupled_policy", model=model, epochs=100, wm_checkpoint=str(wm_path))
    pol = train_policy_frozen(cache, ds, pc, seed=0, data=train)
    metrics = evaluate_agents([(res.wm, pol.policy)], ds.eval_configs(), stats=ds.stats)
    print(f"{preset:4s} wm loss {res.final_loss:7.2f}  held-out L_pi "
          f"{policy_loss_cached(pol.policy, cache, held):.4f}  {metrics}")
    if preset != "rgb":
        print("      held-out dynamics MSE", {k: round(v, 4) for k, v in
                                               heldout_dynamics_mse(res.wm, held).items()})
