"""A state-based PPO expert for the reaching task.

Trains on reduced randomization from the privileged 16-d state, then
compares the mean return against a uniform random policy on a fixed set
of episodes.  Returns are negative distance penalties, so closer to zero
is better.

    python demos/04_ppo_expert.py [total_steps]
"""
import sys

import numpy as np

from dynmap.expert.ppo import PPOConfig, evaluate_returns, ppo_train, random_policy
from dynmap.tasks import RandomizationSpec, TaskId, sample_episode

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
task, spec = TaskId.BALANCE_REACHING, RandomizationSpec().reduced()
rng = np.random.default_rng(123)
configs = [sample_episode(task, spec, rng=rng) for _ in range(20)]
cfg = PPOConfig(total_steps=steps)

# %% baseline
base, base_sr = evaluate_returns(random_policy(np.random.default_rng(0)), configs, cfg)
print(f"random policy   mean return {base:8.2f}  SR {base_sr:.0f}%")

# %% training, one checkpoint every cfg.checkpoint_every steps
for ck in ppo_train(task, cfg, spec, seed=0, probe_configs=configs[:5]):
    print(f"step {ck.step:7d}  mean return {ck.mean_return:8.2f}  probe SR {ck.success_rate:.0f}%")
ret, sr = evaluate_returns(ck.policy(task).model, configs, cfg)
print(f"trained policy  mean return {ret:8.2f}  SR {sr:.0f}%")
