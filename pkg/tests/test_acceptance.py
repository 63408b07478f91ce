"""Acceptance criteria 1 to 17, one test each.

Every test records a ``criterion N: PASS|FAIL`` line; the terminal summary
prints them together.  Criteria 14 to 17 train desk-scale models and take
most of the runtime.  Set ``DYNMAP_ACCEPTANCE_CACHE`` to a directory to keep
datasets and checkpoints between runs.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import pytest

from dynmap.expert.ppo import PPOConfig, evaluate_returns, ppo_train, random_policy
from dynmap.expert.recorder import record_dataset, record_episode
from dynmap.expert.scripted import expert_variants
from dynmap.harness.checks import _toy_batch, run_all, tiny_config
from dynmap.harness.evaluate import episode_metrics, evaluate_agents
from dynmap.harness.formats import Dataset, encode_trajectory, read_trajectory, sha256_file
from dynmap.harness.training import (TrainConfig, heldout_dynamics_mse, load_model, load_sequences,
                                     policy_loss_cached, precompute_latents, train_decoupled_wm,
                                     train_policy_frozen)
from dynmap.harness.validate import validate_dataset
from dynmap.nn import Tape
from dynmap.nn import functional as F
from dynmap.render import SCALE, box_polygon, pixel_center, scanline_mask, world_to_pixel
from dynmap.sim import AccelCommand, BodyShape, control_step, make_world, max_penetration
from dynmap.tasks import (Outcome, RandomizationSpec, TaskId, initial_world, integrate_commands,
                          nominal_episode, preprocess_action, sample_episode)
from dynmap.worldmodel import (LossWeights, RecurrentPolicy, WorldModel, WorldModelConfig,
                               loss_joint, unroll)

T1, T2, T3 = TaskId.BALANCE_REACHING, TaskId.BALANCE_REACHING_V2, TaskId.BIN_DROPPING
REDUCED = RandomizationSpec().reduced()
MODEL = WorldModelConfig.desk()
WM_EPOCHS = 20
POLICY_EPOCHS = 100
SEEDS = (0, 1, 2)
N_TRAIN, N_EVAL = 100, 50


def report(record_property, n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    record_property("criterion", line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1-4: physics and actions

def test_criterion_01_physics_determinism(record_property):
    cfg = nominal_episode()
    rng = np.random.default_rng(1)
    same = 0
    for _ in range(10):
        cmds = rng.uniform(-2.0, 2.0, (120, 3))
        finals = []
        for _ in range(2):
            w = initial_world(cfg)
            for c in cmds:
                w = control_step(w, AccelCommand.from_array(c))
            finals.append(w.state_vector())
        same += np.array_equal(finals[0], finals[1])
    report(record_property, 1, same == 10, f"{same}/10 command sequences bit-identical")


def test_criterion_02_static_equilibrium(record_property):
    w = initial_world(nominal_episode())
    start = np.array([w.block.x, w.block.y])
    pen = 0.0
    for _ in range(120):
        w = control_step(w, AccelCommand())
        pen = max(pen, max_penetration(w))
    disp = float(np.hypot(*(np.array([w.block.x, w.block.y]) - start)))
    report(record_property, 2, disp < 1e-3 and pen < 1e-3,
           f"block moved {disp * 1e3:.4f} mm in 6 s, max penetration {pen:.2e} m")


def test_criterion_03_kinematic_closed_form(record_property):
    a = np.array([1.3, -0.7, 2.0])
    w = make_world((0.4, 0.5, 0.0), BodyShape(0.105, 0.015), BodyShape(0.02, 0.05))
    x0 = w.cart.as_array()[:3]
    err = 0.0
    for k in range(1, 21):
        w = control_step(w, AccelCommand.from_array(a))
        t = 0.05 * k
        err = max(err, float(np.max(np.abs(w.cart.as_array()[:3] - (x0 + 0.5 * a * t * t)))))
    report(record_property, 3, err < 1e-6, f"max pose error over 1 s {err:.2e}")


def test_criterion_04_action_round_trip(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        start = rng.uniform(0.2, 0.8, 3) * (1, 1, 0)
        steps = np.cumsum(rng.uniform(-1, 1, (120, 3)) * (0.001, 0.001, 0.004), axis=0)
        cmds = start + np.cumsum(steps, axis=0)
        hist = np.vstack([start, start, cmds])
        acc = [preprocess_action(hist[t + 2], hist[t + 1], hist[t], 0.05, limits=(np.inf,) * 3).as_array()
               for t in range(120)]
        worst = max(worst, float(np.max(np.abs(integrate_commands(acc, start, 0.05) - cmds))))
    report(record_property, 4, worst < 1e-6, f"max round-trip error over 100 sequences {worst:.2e} m")


# ---------------------------------------------------------------- 5-8: networks and losses

def test_criterion_05_gradient_checks(record_property):
    reports = run_all(0)
    bad = [k for k, r in reports.items() if not r.passed]
    layer = max(r.max_error for k, r in reports.items() if k.startswith("layer/"))
    comp = max(r.max_error for k, r in reports.items() if k.startswith("composite/"))
    tol_ok = all(r.tolerance == (1e-3 if k.startswith("layer/") else 5e-3) for k, r in reports.items())
    report(record_property, 5, not bad and tol_ok,
           f"{len(reports)} checks, worst layer {layer:.1e}, worst composite {comp:.1e}"
           + (f", failed {bad}" if bad else ""))


def test_criterion_06_conv_adjoint(record_property):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        k, s, p = int(rng.choice([2, 3, 4])), int(rng.choice([1, 2])), int(rng.choice([0, 1]))
        ho = int(rng.integers(2, 7))
        h = (ho - 1) * s + k - 2 * p
        n, cin, cout = (int(v) for v in rng.integers(1, 4, 3))
        x = rng.standard_normal((n, h, h, cin))
        W = rng.standard_normal((k, k, cin, cout))
        y = F.conv2d_forward(x, W, stride=s, pad=p)
        r = rng.standard_normal(y.shape)
        back = F.deconv2d_forward(r, W, stride=s, pad=p)
        assert back.shape == x.shape
        lhs, rhs = np.sum(y * r), np.sum(x * back)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    report(record_property, 6, worst < 1e-5, f"max relative adjoint gap over 20 shapes {worst:.1e}")


def _mean_norm(pred, target):
    d = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return np.sqrt((d.reshape(d.shape[:2] + (-1,)) ** 2).sum(-1)).mean()


def _numpy_joint_loss(out, batch, w):
    """Every term recomputed from raw arrays, independently of the library losses."""
    z = out.z.data
    total = _mean_norm(out.image_hat.data, batch.images[:, 1:]) + w.beta_z * _mean_norm(out.z_hat.data, z[:, 1:])
    for key, wk in w.dynamics.items():
        total += wk * _mean_norm(out.dyn_hat[key].data, getattr(batch, key)[:, 1:])
    a = out.a_hat.data.astype(np.float64) - batch.actions
    return total + w.beta_joint * np.abs(a).reshape(a.shape[:2] + (-1,)).sum(-1).mean()


def test_criterion_07_loss_bookkeeping(record_property):
    cfg = tiny_config()
    worst, zero_ok = 0.0, True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        wm, pol = WorldModel(cfg, seed), RecurrentPolicy(cfg, seed + 1)
        batch = _toy_batch(rng, cfg, B=2, T=4)
        w = LossWeights(*rng.uniform(0.1, 2.0, 5))
        t = Tape(record=False)
        out = unroll(t, wm, batch, policy=pol)
        parts = _numpy_joint_loss(out, batch, w)
        total = loss_joint(t, out, batch, w).item()
        worst = max(worst, abs(total - parts) / abs(parts))
        # masked heads: zero dynamics weights and no policy term
        t = Tape()
        out = unroll(t, wm, batch, policy=pol)
        for p in wm.parameters() + pol.parameters():
            p.zero_grad()
        t.backward(loss_joint(t, out, batch, LossWeights(beta_z=w.beta_z, beta_joint=0.0)))
        masked = wm.parameters(["zeta_dyn", "zeta2", "zeta3", "zeta4"]) + pol.parameters()
        zero_ok &= all(not p.grad.any() for p in masked)
    report(record_property, 7, worst < 1e-6 and zero_ok,
           f"max relative decomposition gap {worst:.1e}, masked gradients bit-zero: {zero_ok}")


# criterion 8 runs after the decoupled policies below, on the same checkpoint


# ---------------------------------------------------------------- 9-12: metrics, renderer, data

def test_criterion_09_metric_oracles(record_property):
    ok40, ok60 = Outcome(False, 40.0, True), Outcome(False, 60.0, False)
    drop = Outcome(True, 10.0, False, 12)
    checks = [
        episode_metrics([ok40] * 25 + [Outcome(True, None, False, 3)] * 25) == {"DR": 50.0, "PE": 40.0, "SR": 50.0, "n": 50},
        episode_metrics([ok40])["SR"] == 100.0,
        episode_metrics([ok60])["SR"] == 0.0 and episode_metrics([ok60])["PE"] == 60.0,
        episode_metrics([ok40, ok60]) == {"DR": 0.0, "PE": 50.0, "SR": 50.0, "n": 2},
        episode_metrics([drop])["SR"] == 0.0 and episode_metrics([drop])["DR"] == 100.0,
    ]
    report(record_property, 9, all(checks), f"{sum(checks)}/{len(checks)} metric fixtures exact")


def _brute_mask(cx, cy, th, hw, hh):
    rows, cols = np.mgrid[0:64, 0:64]
    x, y = pixel_center(rows, cols)
    c, s = math.cos(th), math.sin(th)
    lx, ly = c * (x - cx) + s * (y - cy), -s * (x - cx) + c * (y - cy)
    return (np.abs(lx) < hw) & (np.abs(ly) < hh)


def test_criterion_10_renderer(record_property):
    rng = np.random.default_rng(10)
    match = 0
    for _ in range(50):
        cx, cy = rng.uniform(-0.1, 1.1, 2)
        th = rng.uniform(-math.pi, math.pi)
        hw, hh = rng.uniform(0.005, 0.3, 2)
        match += np.array_equal(scanline_mask(box_polygon(cx, cy, th, hw, hh)),
                                _brute_mask(cx, cy, th, hw, hh))
    u, v = world_to_pixel(np.array([0.0, 1.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0, 1.0]))
    corners = np.array_equal(u, [0, 64, 0, 64]) and np.array_equal(v, [64, 64, 0, 0])
    scale = SCALE * 1000 == 15.625
    report(record_property, 10, match == 50 and corners and scale,
           f"{match}/50 scenes match brute force, corners {corners}, {SCALE * 1000} mm per pixel")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    env = os.environ.get("DYNMAP_ACCEPTANCE_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


def _dataset(root: Path, task, n_train, n_eval, seed) -> Dataset:
    if not (root / "manifest.json").exists():
        record_dataset(expert_variants(task), task, n_train, n_eval, REDUCED, root, seed=seed)
    return Dataset(root)


@pytest.fixture(scope="module")
def ds1(workdir) -> Dataset:
    return _dataset(workdir / "task1", T1, N_TRAIN, N_EVAL, 0)


def test_criterion_11_dataset_integrity(record_property, ds1):
    rep = validate_dataset(ds1.directory)
    files = [ds1.directory / e["file"] for e in ds1.manifest.trajectories]
    same = sum(encode_trajectory(read_trajectory(f)) == f.read_bytes() for f in files)
    ok = rep.ok and same == len(files) == N_TRAIN + N_EVAL
    report(record_property, 11, ok,
           f"{same}/{len(files)} files byte round-trip, successes and checksums "
           f"{'ok' if rep.ok else rep.errors[:2]}, inverse error {rep.max_inverse_error:.1e} m")


def test_criterion_12_scripted_expert(record_property):
    rng = np.random.default_rng(12)
    configs = [sample_episode(T1, REDUCED, rng=rng) for _ in range(50)]
    rates = {}
    for expert in expert_variants(T1):
        outs = [record_episode(expert, c, render=False)[2] for c in configs]
        rates[expert.name] = episode_metrics(outs)["SR"]
    report(record_property, 12, min(rates.values()) >= 90.0,
           "SR over 50 reduced episodes " + ", ".join(f"{k} {v:.0f}%" for k, v in rates.items()))


# ---------------------------------------------------------------- 13: PPO

def test_criterion_13_ppo_progress(record_property):
    cfg = PPOConfig()
    configs = [sample_episode(T1, REDUCED, seed=1000 + i) for i in range(20)]
    trained, base = [], []
    for seed in SEEDS:
        cks = ppo_train(T1, cfg, REDUCED, seed=seed, probe_configs=configs[:5])
        trained.append(evaluate_returns(cks[-1].policy(T1).model, configs, cfg)[0])
        base.append(evaluate_returns(random_policy(np.random.default_rng(seed)), configs, cfg)[0])
    r, b = float(np.median(trained)), float(np.median(base))
    # returns are negative costs: twice as good means half the magnitude
    report(record_property, 13, r >= b / 2,
           f"median return {r:.2f} after {cfg.total_steps} steps vs random {b:.2f} "
           f"(per seed {[round(x, 1) for x in trained]})")


# ---------------------------------------------------------------- 14-17: desk-scale reproductions

@pytest.fixture(scope="module")
def data1(ds1):
    return load_sequences(ds1, "train"), load_sequences(ds1, "eval")


def _world_model(workdir, ds, data, preset):
    path = workdir / f"wm_{preset}.dmnn"
    if not path.exists():
        cfg = TrainConfig(model=MODEL, weights=LossWeights.preset(preset), epochs=WM_EPOCHS)
        train_decoupled_wm(ds, cfg, seed=0, out_path=path, data=data[0])
    return path


@pytest.fixture(scope="module")
def wm_paths(workdir, ds1, data1) -> dict:
    return {p: _world_model(workdir, ds1, data1, p) for p in ("rgb", "v", "pva")}


class PolicyRuns:
    """Frozen-latent policies per (world model, dataset, policy kind), three seeds each."""

    def __init__(self, workdir):
        self.workdir = workdir
        self.results = {}
        self.hashes = {}

    def run(self, wm_path, ds, kind, tag):
        key = (str(wm_path), tag, kind)
        if key in self.results:
            return self.results[key]
        before = sha256_file(wm_path)
        train, held = load_sequences(ds, "train"), load_sequences(ds, "eval")
        cache = precompute_latents(ds, wm_path, cache_dir=self.workdir / "cache")
        wm, _, _ = load_model(wm_path)
        pc = TrainConfig(regime="decoupled_policy", model=MODEL, policy=kind, epochs=POLICY_EPOCHS,
                         wm_checkpoint=str(wm_path))
        losses, agents = [], []
        for seed in SEEDS:
            ck = self.workdir / f"pi_{Path(wm_path).stem}_{tag}_{kind}_s{seed}.dmnn"
            if ck.exists():
                pi = load_model(ck)[1]
            else:
                pi = train_policy_frozen(cache, ds, pc, seed=seed, out_path=ck, data=train).policy
            losses.append(policy_loss_cached(pi, cache, held))
            agents.append((wm, pi))
        m = evaluate_agents(agents, ds.eval_configs(), task=ds.task, seeds=list(SEEDS), stats=ds.stats)
        self.hashes[key] = (before, sha256_file(wm_path))
        self.results[key] = (losses, m)
        return losses, m


@pytest.fixture(scope="module")
def policies(workdir) -> PolicyRuns:
    return PolicyRuns(workdir)


def _sr(m) -> list:
    return [p["SR"] for p in m.per_seed]


def test_criterion_14_velocity_supervision(record_property, ds1, wm_paths, policies):
    l_rgb, m_rgb = policies.run(wm_paths["rgb"], ds1, "feedforward", "t1")
    l_v, m_v = policies.run(wm_paths["v"], ds1, "feedforward", "t1")
    lr, lv = float(np.median(l_rgb)), float(np.median(l_v))
    sr_rgb, sr_v = m_rgb.median("SR"), m_v.median("SR")
    ok = lv < lr and sr_v >= sr_rgb + 10.0
    report(record_property, 14, ok,
           f"held-out L_pi RGB {lr:.4f} vs RGB+V {lv:.4f}; SR RGB {sr_rgb:.1f} {_sr(m_rgb)} "
           f"vs RGB+V {sr_v:.1f} {_sr(m_v)}")


def test_criterion_08_frozen_world_model(record_property, ds1, wm_paths, policies):
    policies.run(wm_paths["v"], ds1, "feedforward", "t1")
    key = (str(wm_paths["v"]), "t1", "feedforward")
    before, after = policies.hashes[key]
    report(record_property, 8, before == after,
           f"world-model hash {before[:12]} before, {after[:12]} after policy training")


def test_criterion_15_recurrent_policy(record_property, ds1, wm_paths, policies):
    _, m_ff = policies.run(wm_paths["rgb"], ds1, "feedforward", "t1")
    _, m_rec = policies.run(wm_paths["rgb"], ds1, "recurrent", "t1")
    ff, rec = m_ff.median("SR"), m_rec.median("SR")
    report(record_property, 15, rec > ff,
           f"Only-RGB SR recurrent {rec:.1f} {_sr(m_rec)} vs feedforward {ff:.1f} {_sr(m_ff)}")


def test_criterion_16_dynamics_ordering(record_property, data1, wm_paths):
    wm, _, _ = load_model(wm_paths["pva"])
    mse = heldout_dynamics_mse(wm, data1[1])
    ok = mse["P"] < mse["V"] < mse["A"]
    report(record_property, 16, ok,
           "normalized held-out MSE " + ", ".join(f"{k} {mse[k]:.4f}" for k in "PVA"))


def test_criterion_17_transfer(record_property, workdir, ds1, wm_paths, policies):
    _, m1 = policies.run(wm_paths["v"], ds1, "feedforward", "t1")
    ds2 = _dataset(workdir / "task2", T2, N_TRAIN, N_EVAL, 0)
    _, m2 = policies.run(wm_paths["v"], ds2, "feedforward", "t2")
    ds3 = _dataset(workdir / "task3", T3, N_TRAIN, N_EVAL, 0)
    _, m3 = policies.run(wm_paths["v"], ds3, "feedforward", "t3")
    s1, s2, s3 = m1.median("SR"), m2.median("SR"), m3.median("SR")
    report(record_property, 17, s2 >= s1 - 20.0,
           f"frozen task-1 world model: task-1 SR {s1:.1f}, task-2 SR {s2:.1f} {_sr(m2)}, "
           f"task-3 SR {s3:.1f} (no ordering required)")
