"""Record a demonstration dataset, validate it and replay it.

Every stored episode is a success, so replaying its actions open loop must
score a success rate of 100%.

    python demos/02_dataset.py [out_dir] [n_train]
"""
import sys
from pathlib import Path

from dynmap.expert.recorder import record_dataset
from dynmap.expert.scripted import expert_variants
from dynmap.harness.evaluate import replay_dataset
from dynmap.harness.formats import Dataset
from dynmap.harness.validate import validate_dataset
from dynmap.tasks import RandomizationSpec, TaskId

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/02")
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 20

# %% record round-robin over the two reaching experts
task = TaskId.BALANCE_REACHING
m = record_dataset(expert_variants(task), task, n_train, 10, RandomizationSpec().reduced(),
                   out / "dataset", seed=0)
print(f"{m.n_train} train + {m.n_eval} eval episodes, {m.extra.get('attempts')} attempts")
ds = Dataset(out / "dataset")
experts = [e["expert"] for e in ds.entries("train")]
print("episodes per expert:", {k: experts.count(k) for k in sorted(set(experts))})

# %% checksums, byte round trip, success predicate and the inverse oracle
print(validate_dataset(out / "dataset"))

# %% open-loop replay of the recorded actions
print("replay of eval split:", replay_dataset(ds, "eval"))

# %% normalization ranges learnt from the training split
s = ds.stats
print("velocity range", [round(v, 3) for v in s.v_min], [round(v, 3) for v in s.v_max])
