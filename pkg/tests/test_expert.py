from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from dynmap.expert.ppo import (Checkpoint, PPOConfig, ActorCritic, gae_advantages, load_checkpoint,
                               ppo_losses, ppo_train, run_policy_episode, save_checkpoint,
                               select_checkpoints)
from dynmap.expert.recorder import RecorderError, record_dataset, record_episode
from dynmap.expert.scripted import (DEFAULT_A_MAX, StraightLineExpert,
                                    expert_variants, scripted_expert)
from dynmap.expert.state import OBS_DIM, decode_state, observe_state
from dynmap.harness.formats import Dataset
from dynmap.sim import PhysicsParams
from dynmap.tasks import (ConfigurationError, RandomizationSpec, TaskId, initial_world,
                          nominal_episode)

TINY = PPOConfig(hidden=(16, 16), n_envs=2, minibatch=60, epochs=2, total_steps=480,
                 checkpoint_every=240, probe_episodes=2)


# ---------------------------------------------------------------- GAE

def test_gae_lambda_zero_is_td(rng):
    r, v = rng.standard_normal(6), rng.standard_normal(6)
    d = np.zeros(6, bool)
    adv, ret = gae_advantages(r, v, d, 0.9, 0.0, last_value=0.4)
    nxt = np.append(v[1:], 0.4)
    assert np.allclose(adv, r + 0.9 * nxt - v)
    assert np.allclose(ret, adv + v)


def test_gae_reward_to_go(rng):
    r = rng.standard_normal(7)
    d = np.zeros(7, bool)
    d[-1] = True
    adv, _ = gae_advantages(r, np.zeros(7), d, 1.0, 1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1])


def test_gae_brute_force(rng):
    n, g, lam = 10, 0.97, 0.9
    r, v = rng.standard_normal(n), rng.standard_normal(n)
    last = 0.3
    adv, _ = gae_advantages(r, v, np.zeros(n, bool), g, lam, last_value=last)
    nxt = np.append(v[1:], last)
    delta = r + g * nxt - v
    brute = [sum((g * lam) ** k * delta[t + k] for k in range(n - t)) for t in range(n)]
    assert np.allclose(adv, brute, atol=1e-12)


def test_gae_no_bootstrap_across_done():
    adv, _ = gae_advantages([1.0, 1.0], [0.0, 5.0], [True, False], 0.9, 0.9, last_value=0.0)
    assert adv[0] == pytest.approx(1.0)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae_advantages([1, 2], [0], [False, False], 0.9, 0.9)


# ---------------------------------------------------------------- PPO

def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.5)
    with pytest.raises(ValueError):
        PPOConfig(gamma=0.0)


def test_zero_steps_returns_initial_checkpoint():
    cks = ppo_train(TaskId.BALANCE_REACHING, replace(TINY, total_steps=0),
                    RandomizationSpec().reduced(), seed=0)
    assert len(cks) == 1 and cks[0].step == 0


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    log = tmp_path_factory.mktemp("ppo") / "log.tsv"
    cks = ppo_train(TaskId.BALANCE_REACHING, TINY, RandomizationSpec().reduced(), seed=3, log_path=log)
    return cks, log


def test_ppo_deterministic(tiny_run):
    cks, _ = tiny_run
    again = ppo_train(TaskId.BALANCE_REACHING, TINY, RandomizationSpec().reduced(), seed=3)
    assert [c.step for c in cks] == [c.step for c in again] == [0, 240, 480]
    for a, b in zip(cks, again):
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(cks[0].params["actor.fc1.W"], cks[-1].params["actor.fc1.W"])


def test_ppo_log(tiny_run):
    _, log = tiny_run
    lines = log.read_text().splitlines()
    assert lines[0].split("\t") == ["step", "return_mean", "return_std", "probe_sr"]
    assert len(lines) == 4


def test_ppo_losses_pure(rng):
    model = ActorCritic(TINY, seed=0)
    n = 12
    batch = {"obs": rng.standard_normal((n, OBS_DIM)).astype(np.float32),
             "u": rng.standard_normal((n, 3)), "logp": rng.standard_normal(n),
             "adv": rng.standard_normal(n), "ret": rng.standard_normal(n)}
    assert ppo_losses(model, batch, 0.2) == ppo_losses(model, batch, 0.2)


def test_checkpoint_file_round_trip(tmp_path, tiny_run):
    ck = tiny_run[0][-1]
    save_checkpoint(tmp_path / "ck.dmnn", ck)
    back = load_checkpoint(tmp_path / "ck.dmnn")
    assert back.step == ck.step and back.config == ck.config
    assert back.success_rate == ck.success_rate
    cfg = nominal_episode()
    r1, _ = run_policy_episode(ck.policy(TaskId.BALANCE_REACHING).model, cfg, ck.config)
    r2, _ = run_policy_episode(back.policy(TaskId.BALANCE_REACHING).model, cfg, back.config)
    assert r1 == r2


def test_select_checkpoints():
    cks = [Checkpoint(i, {}, sr, 0.0) for i, sr in enumerate([0, 50, 90, 70, 80, 100, 85])]
    assert [c.step for c in select_checkpoints(cks)] == [4, 5, 6]
    assert [c.step for c in select_checkpoints(cks, n=5, fraction=0.9)] == [2, 5]


def test_ppo_expert_records_valid_actions(tiny_run):
    expert = tiny_run[0][-1].policy(TaskId.BALANCE_REACHING)
    recs, accels, _ = record_episode(expert, nominal_episode(), render=False)
    assert all(np.all(np.abs(r.action.normalized) <= 1.0) for r in recs)
    assert len(accels) == 120


# ---------------------------------------------------------------- state observation

def test_state_observation_round_trip():
    cfg = nominal_episode()
    w = initial_world(cfg)
    obs = observe_state(w, cfg)
    assert obs.shape == (OBS_DIM,) and obs.dtype == np.float32
    d = decode_state(obs)
    assert np.allclose(d["cart"], w.cart.as_array(), atol=1e-6)
    assert np.allclose(d["target"], cfg.target, atol=1e-6)
    assert d["cart_width"] == pytest.approx(cfg.cart_width, abs=1e-6)


# ---------------------------------------------------------------- scripted experts

def test_start_equals_goal_is_idle():
    cfg = replace(nominal_episode(), target=nominal_episode().cart_start)
    exp = scripted_expert(TaskId.BALANCE_REACHING).reset(cfg)
    assert all(np.array_equal(exp.act(), np.zeros(3)) for _ in range(120))


def test_nominal_straight_line_succeeds(nominal):
    recs, accels, out = record_episode(StraightLineExpert(), nominal, render=False)
    assert out.success and not out.dropped and out.position_error < 50
    assert np.max(np.abs(accels[:, :2])) <= DEFAULT_A_MAX + 1e-9
    assert DEFAULT_A_MAX == pytest.approx(0.3 * 0.7 * 9.81)


def test_infeasible_distance_reported(nominal):
    slow = StraightLineExpert(a_max=0.01)
    with pytest.raises(ConfigurationError):
        slow.reset(nominal)


@pytest.mark.parametrize("task", [TaskId.BALANCE_REACHING_V2, TaskId.BIN_DROPPING])
def test_other_task_experts_succeed(task):
    for exp in expert_variants(task):
        _, _, out = record_episode(exp, nominal_episode(task), render=False)
        assert out.success, exp.name


def test_scripted_success_rate_small_sample():
    spec = RandomizationSpec().reduced()
    rng = np.random.default_rng(5)
    from dynmap.tasks import sample_episode
    ok = sum(record_episode(StraightLineExpert(), sample_episode(TaskId.BALANCE_REACHING, spec, rng=rng),
                            render=False)[2].success for _ in range(10))
    assert ok >= 9


# ---------------------------------------------------------------- recorder

def test_single_nominal_recording(tmp_path):
    spec = RandomizationSpec().reduced(0.0)
    record_dataset([StraightLineExpert()], TaskId.BALANCE_REACHING, 1, 0, spec, tmp_path, seed=0)
    ds = Dataset(tmp_path)
    (traj,) = ds.trajectories("train")
    assert len(traj.actions) == 120
    cfg = traj.config
    recs, accels, _ = record_episode(StraightLineExpert(), cfg, render=False)
    cmds = np.array([r.command_pose for r in recs])
    assert np.allclose(traj.commands, cmds, atol=1e-6)
    start = np.array([*cfg.cart_start, 0.0])
    hist = np.vstack([start, start, cmds])
    dt = PhysicsParams().control_period
    rebuilt = (hist[2:] - 2 * hist[1:-1] + hist[:-2]) / dt**2
    assert np.max(np.abs(rebuilt - accels)) < 1e-6


def test_recorder_deterministic(tmp_path):
    spec = RandomizationSpec().reduced()
    for d in ("a", "b"):
        record_dataset(expert_variants(TaskId.BALANCE_REACHING), TaskId.BALANCE_REACHING, 2, 1, spec,
                       tmp_path / d, seed=9)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.dmtj"))
    assert len(files) == 3
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class _Reckless:
    name = "reckless"

    def reset(self, config):
        return self

    def act(self, episode):
        return np.array([15.0, 0.0, 0.0])


def test_recorder_aborts_on_low_yield(tmp_path):
    with pytest.raises(RecorderError, match="yield"):
        record_dataset([_Reckless()], TaskId.BALANCE_REACHING, 2, 0, RandomizationSpec().reduced(),
                       tmp_path, min_probe_sr=0.0, probe_window=5)


def test_recorder_rejects_weak_experts(tmp_path):
    with pytest.raises(RecorderError, match="probe"):
        record_dataset([_Reckless()], TaskId.BALANCE_REACHING, 2, 0, RandomizationSpec().reduced(),
                       tmp_path)


def test_dataset_actions_are_bimodal(small_dataset):
    by_expert = {}
    for e in small_dataset.entries("train") + small_dataset.entries("eval"):
        t = small_dataset.load(e)
        a = t.actions[:, :2]
        moving = np.abs(a).max(1) > 1e-6
        frac = np.mean(np.all(np.abs(a[moving]) > 1e-6, axis=1))
        by_expert.setdefault(e["expert"], []).append(frac)
    assert set(by_expert) == {"straight", "lpath"}
    # the L-path expert moves along one axis at a time; the straight one along both
    assert max(by_expert["lpath"]) < 0.1
    assert min(by_expert["straight"]) > 0.8
