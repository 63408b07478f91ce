from __future__ import annotations

import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from dynmap.harness.checks import tiny_config
from dynmap.harness.evaluate import (DEFAULT_EPISODES, DEFAULT_SEEDS, Metrics, episode_metrics,
                                     evaluate, evaluate_agents, read_episode_csv, replay_dataset)
from dynmap.harness.formats import (RECORD_DTYPE, CorruptFileError, Dataset, decode_trajectory,
                                    encode_trajectory, read_trajectory, sha256_file,
                                    trajectory_file_size, write_trajectory)
from dynmap.harness.training import (FrozenModelError, StaleCacheError, TrainConfig,
                                     TrainingError, compute_latents, load_agent,
                                     load_latent_cache, load_model, load_sequences,
                                     policy_loss_cached, precompute_latents, train_decoupled_wm,
                                     train_e2e, train_joint, train_policy_frozen)
from dynmap.harness.validate import inverse_error, validate_dataset
from dynmap.tasks import Outcome, TaskId
from dynmap.worldmodel import LossWeights, WorldModel, WorldModelConfig, make_policy

MODEL = tiny_config(image_size=64)


def _subset(data, n):
    return replace(data, images=data.images[:n], actions=data.actions[:n], goals=data.goals[:n],
                   P=data.P[:n], V=data.V[:n], A=data.A[:n], files=data.files[:n])


@pytest.fixture(scope="module")
def train_data(small_dataset):
    return load_sequences(small_dataset, "train")


@pytest.fixture(scope="module")
def one_traj(train_data):
    return _subset(train_data, 1)


@pytest.fixture(scope="module")
def wm_file(small_dataset, train_data, tmp_path_factory):
    path = tmp_path_factory.mktemp("wm") / "wm.dmnn"
    cfg = TrainConfig(model=MODEL, weights=LossWeights.preset("pva"), epochs=2)
    train_decoupled_wm(small_dataset, cfg, seed=0, out_path=path, data=train_data)
    return path


# ---------------------------------------------------------------- formats

def test_file_round_trip_bytes(small_dataset, tmp_path):
    e = small_dataset.entries("train")[0]
    raw = (small_dataset.directory / e["file"]).read_bytes()
    traj = decode_trajectory(raw)
    write_trajectory(tmp_path / "x.dmtj", traj)
    assert (tmp_path / "x.dmtj").read_bytes() == raw
    assert encode_trajectory(read_trajectory(tmp_path / "x.dmtj")) == raw


def test_file_size_arithmetic(small_dataset):
    e = small_dataset.entries("train")[0]
    raw = (small_dataset.directory / e["file"]).read_bytes()
    hlen = int.from_bytes(raw[12:16], "little")
    payload = RECORD_DTYPE.itemsize - 64 * 64 * 3
    assert payload > 0
    assert len(raw) == trajectory_file_size(120, hlen) == 16 + hlen + 120 * (64 * 64 * 3 + payload) + 4


@pytest.mark.parametrize("damage,field", [
    (lambda b: b[:-100], "length"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-5] + bytes([b[-5] ^ 1]) + b[-4:], "crc"),
    (lambda b: b[:10], "length"),
])
def test_corrupt_file_names_field(small_dataset, damage, field):
    e = small_dataset.entries("train")[0]
    raw = (small_dataset.directory / e["file"]).read_bytes()
    with pytest.raises(CorruptFileError) as info:
        decode_trajectory(damage(raw))
    assert info.value.field == field


def test_dataset_verify_detects_tampering(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset.directory, root)
    Dataset(root, verify=True)
    e = Dataset(root).entries("eval")[0]
    p = root / e["file"]
    traj = read_trajectory(p)
    traj.records["action"][0, 0] += 0.1
    write_trajectory(p, traj)
    with pytest.raises(CorruptFileError):
        Dataset(root, verify=True)
    rep = validate_dataset(root)
    assert not rep.ok


def test_manifest_hash_checked(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset.directory, root)
    m = json.loads((root / "manifest.json").read_text())
    m["trajectories"][0]["sha256"] = "0" * 64
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptFileError):
        Dataset(root)


# ---------------------------------------------------------------- validation

def test_recorded_dataset_validates(small_dataset):
    rep = validate_dataset(small_dataset.directory)
    assert rep.ok, str(rep)
    assert rep.n_files == 8 and rep.max_inverse_error < 1e-6


def test_inverse_error_oracle(rng):
    cmds = np.cumsum(rng.uniform(-0.01, 0.01, (120, 3)), axis=0)
    assert inverse_error(cmds, (0, 0, 0), 0.05) < 1e-9


# ---------------------------------------------------------------- world-model training

def test_wm_overfit_smoke(small_dataset, one_traj):
    cfg = TrainConfig(model=WorldModelConfig.desk(), epochs=10, lr=1e-3)
    res = train_decoupled_wm(small_dataset, cfg, seed=0, data=one_traj)
    losses = [h["loss"] for h in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_wm_masked_heads_untouched(small_dataset, one_traj):
    cfg = TrainConfig(model=MODEL, weights=LossWeights.preset("v"), epochs=1)
    res = train_decoupled_wm(small_dataset, cfg, seed=4, data=one_traj)
    init = WorldModel(MODEL, 4).state_dict()
    after = res.wm.state_dict()
    for name in init:
        group = name.split(".")[0]
        same = np.array_equal(init[name], after[name])
        if group in ("zeta2", "zeta4"):
            assert same, name
        elif group in ("phi1", "zeta3"):
            assert not same, name


def test_wm_seed_determinism(small_dataset, one_traj, tmp_path):
    cfg = TrainConfig(model=MODEL, epochs=1)
    a = train_decoupled_wm(small_dataset, cfg, seed=2, out_path=tmp_path / "a.dmnn", data=one_traj)
    b = train_decoupled_wm(small_dataset, cfg, seed=2, out_path=tmp_path / "b.dmnn", data=one_traj)
    assert a.sha256 == b.sha256
    assert (tmp_path / "a.dmnn").read_bytes() == (tmp_path / "b.dmnn").read_bytes()


def test_loss_log_written(small_dataset, one_traj, tmp_path):
    cfg = TrainConfig(model=MODEL, weights=LossWeights.preset("pv"), epochs=2)
    train_decoupled_wm(small_dataset, cfg, seed=0, log_path=tmp_path / "l.csv", data=one_traj)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert len(lines) == 3 and "loss" in lines[0] and "P" in lines[0].split(",")


def test_nonfinite_loss_aborts(small_dataset, one_traj):
    bad = replace(one_traj, V=np.full_like(one_traj.V, np.inf))
    cfg = TrainConfig(model=MODEL, weights=LossWeights.preset("v"), epochs=1)
    with pytest.raises(TrainingError) as info:
        train_decoupled_wm(small_dataset, cfg, seed=0, data=bad)
    assert info.value.step == 0


# ---------------------------------------------------------------- latent cache and frozen policies

def test_latent_cache(small_dataset, wm_file, train_data, tmp_path):
    cache = precompute_latents(small_dataset, wm_file, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    again = load_latent_cache(files[0], small_dataset, wm_file)
    for s in cache.splits:
        for k in cache.splits[s]:
            assert np.array_equal(cache.splits[s][k], again.splits[s][k])
    wm, _, _ = load_model(wm_file)
    fresh = compute_latents(wm, train_data)
    for k in fresh:
        assert np.array_equal(fresh[k], cache.splits["train"][k])
    assert not cache.splits["train"]["h1"][:, 0].any() and not cache.splits["train"]["h2"][:, 0].any()


def test_stale_cache_rejected(small_dataset, wm_file, tmp_path):
    precompute_latents(small_dataset, wm_file, cache_dir=tmp_path / "c")
    (cached,) = (tmp_path / "c").iterdir()
    other = tmp_path / "other.dmnn"
    cfg = TrainConfig(model=MODEL, epochs=1)
    train_decoupled_wm(small_dataset, cfg, seed=9, out_path=other,
                       data=_subset(load_sequences(small_dataset, "train"), 1))
    with pytest.raises(StaleCacheError):
        load_latent_cache(cached, small_dataset, other)
    cache = load_latent_cache(cached)
    pc = TrainConfig(regime="decoupled_policy", model=MODEL, epochs=1, wm_checkpoint=str(other))
    with pytest.raises(StaleCacheError):
        train_policy_frozen(cache, small_dataset, pc)


def test_frozen_policy_training(small_dataset, wm_file, train_data, tmp_path):
    before = sha256_file(wm_file)
    cache = precompute_latents(small_dataset, wm_file)
    pc = TrainConfig(regime="decoupled_policy", model=MODEL, policy="recurrent", epochs=2,
                     wm_checkpoint=str(wm_file))
    a = train_policy_frozen(cache, small_dataset, pc, seed=1, out_path=tmp_path / "p.dmnn", data=train_data)
    b = train_policy_frozen(cache, small_dataset, pc, seed=1, data=train_data)
    assert sha256_file(wm_file) == before
    assert a.final_loss == b.final_loss
    wm, pi, meta = load_agent(tmp_path / "p.dmnn")
    assert meta["worldmodel_ref"]["sha256"] == before
    assert all(np.array_equal(p.data, q.data) for p, q in zip(pi.parameters(), a.policy.parameters()))


def test_agent_refuses_modified_world_model(small_dataset, wm_file, train_data, tmp_path):
    wm_copy = tmp_path / "wm.dmnn"
    shutil.copy(wm_file, wm_copy)
    cache = precompute_latents(small_dataset, wm_copy)
    pc = TrainConfig(regime="decoupled_policy", model=MODEL, epochs=1, wm_checkpoint=str(wm_copy))
    train_policy_frozen(cache, small_dataset, pc, out_path=tmp_path / "p.dmnn", data=train_data)
    cfg = TrainConfig(model=MODEL, epochs=1)
    train_decoupled_wm(small_dataset, cfg, seed=5, out_path=wm_copy, data=_subset(train_data, 1))
    with pytest.raises(FrozenModelError):
        load_agent(tmp_path / "p.dmnn")


def test_policy_single_trajectory_overfit(small_dataset, one_traj, tmp_path):
    desk = WorldModelConfig.desk()
    train_decoupled_wm(small_dataset, TrainConfig(model=desk, epochs=1), data=one_traj,
                       out_path=tmp_path / "wm.dmnn")
    cache = precompute_latents(small_dataset, tmp_path / "wm.dmnn")
    cache.splits["train"] = {k: v[:1] for k, v in cache.splits["train"].items()}
    pc = TrainConfig(regime="decoupled_policy", model=desk, epochs=3000, lr=1e-4,
                     wm_checkpoint=str(tmp_path / "wm.dmnn"))
    res = train_policy_frozen(cache, small_dataset, pc, seed=0, data=one_traj)
    assert res.final_loss < 0.02


def test_heldout_policy_loss(small_dataset, wm_file):
    cache = precompute_latents(small_dataset, wm_file)
    held = load_sequences(small_dataset, "eval")
    pi = make_policy("feedforward", MODEL, 0)
    v = policy_loss_cached(pi, cache, held)
    assert np.isfinite(v) and v > 0


# ---------------------------------------------------------------- joint and end-to-end

def test_joint_zero_beta_freezes_policy(small_dataset, one_traj):
    cfg = TrainConfig(regime="joint", model=MODEL, epochs=1,
                      weights=LossWeights(beta_joint=0.0, w_V=1.0))
    res = train_joint(small_dataset, cfg, seed=0, data=one_traj)
    init = make_policy("feedforward", MODEL, 1).state_dict()
    after = res.policy.state_dict()
    assert all(np.array_equal(init[k], after[k]) for k in init)
    assert {"rgb", "latent", "V", "policy"} <= set(res.history[0])


def test_joint_deterministic(small_dataset, one_traj):
    cfg = TrainConfig(regime="joint", model=MODEL, epochs=1, weights=LossWeights.preset("pv"))
    a = train_joint(small_dataset, cfg, seed=3, data=one_traj)
    b = train_joint(small_dataset, cfg, seed=3, data=one_traj)
    assert a.history == b.history


def test_e2e_leaves_decoders(small_dataset, one_traj, tmp_path):
    cfg = TrainConfig(regime="e2e", model=MODEL, epochs=2)
    res = train_e2e(small_dataset, cfg, seed=0, out_path=tmp_path / "e.dmnn", data=one_traj)
    init = WorldModel(MODEL, 0).state_dict()
    after = res.wm.state_dict()
    # the latent-prediction head only feeds world-model losses, so it stays put too
    for name in init:
        same = np.array_equal(init[name], after[name])
        untouched = name.split(".")[0] in WorldModel.DECODER_GROUPS or name.startswith("phi2.zhead")
        assert same == untouched, name
    again = train_e2e(small_dataset, cfg, seed=0, out_path=tmp_path / "f.dmnn", data=one_traj)
    assert res.sha256 == again.sha256


# ---------------------------------------------------------------- metrics and evaluation

def _ok(mm):
    return Outcome(False, mm, mm < 50.0)


DROP = Outcome(True, None, False, 30)


def test_metric_arithmetic():
    m = episode_metrics([_ok(40.0)] * 25 + [DROP] * 25)
    assert (m["DR"], m["SR"], m["PE"]) == (50.0, 50.0, 40.0)


def test_threshold_cases():
    m = episode_metrics([_ok(40.0), _ok(60.0)])
    assert (m["DR"], m["SR"], m["PE"]) == (0.0, 50.0, 50.0)
    # a dropped episode never counts as a success, whatever its error
    m = episode_metrics([Outcome(True, 10.0, False, 5)])
    assert (m["DR"], m["SR"]) == (100.0, 0.0) and np.isnan(m["PE"])


def test_bin_dropping_reports_sr_only():
    m = episode_metrics([Outcome(False, None, True), Outcome(True, None, False, 3)], TaskId.BIN_DROPPING)
    assert m["SR"] == 50.0 and np.isnan(m["DR"]) and np.isnan(m["PE"])


def test_seed_aggregation_and_csv(tmp_path):
    per_seed = {0: [_ok(10.0)] * 3 + [DROP], 1: [_ok(70.0)] * 4, 2: [_ok(20.0), DROP, DROP, DROP]}
    m = Metrics.from_outcomes(TaskId.BALANCE_REACHING, per_seed)
    sr = np.array([75.0, 0.0, 25.0])
    assert m.mean("SR") == pytest.approx(sr.mean())
    assert m.std("SR") == pytest.approx(sr.std(ddof=0))
    assert m.median("SR") == 25.0
    assert m.mean("PE") == pytest.approx((10 + 70 + 20) / 3)
    m.write_csv(tmp_path / "ep.csv")
    back = read_episode_csv(tmp_path / "ep.csv", TaskId.BALANCE_REACHING)
    assert back.summary() == pytest.approx(m.summary())


def test_default_protocol():
    assert DEFAULT_EPISODES == 50 and tuple(DEFAULT_SEEDS) == (0, 1, 2)


def test_oracle_replay(small_dataset):
    m = replay_dataset(small_dataset, "eval")
    assert m.mean("SR") == 100.0 and m.mean("DR") == 0.0
    assert replay_dataset(small_dataset, "train").mean("SR") == 100.0


def test_closed_loop_evaluation(small_dataset, wm_file, train_data, tmp_path):
    cache = precompute_latents(small_dataset, wm_file)
    pc = TrainConfig(regime="decoupled_policy", model=MODEL, epochs=1, wm_checkpoint=str(wm_file))
    ck = tmp_path / "p.dmnn"
    train_policy_frozen(cache, small_dataset, pc, out_path=ck, data=train_data)
    m = evaluate([ck], small_dataset, n_episodes=2, out_dir=tmp_path / "rep")
    assert m.per_seed[0]["n"] == 2
    assert {p.name for p in (tmp_path / "rep").iterdir()} == {"episodes.csv", "summary.csv",
                                                             "errors_seed0.png"}
    again = read_episode_csv(tmp_path / "rep" / "episodes.csv", small_dataset.task)
    np.testing.assert_allclose(np.array(list(again.summary().values())),
                               np.array(list(m.summary().values())), equal_nan=True)
    with pytest.raises(ValueError):
        evaluate_agents([load_agent(ck)[:2]], small_dataset.eval_configs(), stats=None)
