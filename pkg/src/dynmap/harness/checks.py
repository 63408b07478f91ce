"""Gradient-check suite over every layer type and the composed networks.

Each check builds a scalar by contracting the module output with a fixed
random tensor, so every output coordinate contributes to the gradient.
"""
from __future__ import annotations

import numpy as np

from ..nn import Parameter, Tape, grad_check
from ..worldmodel import (Batch, LossWeights, RecurrentPolicy, FeedforwardPolicy, WorldModel,
                          WorldModelConfig, loss_joint, unroll)

LAYER_TOL = 1e-3
COMPOSITE_TOL = 5e-3
# checks run in double precision with this central-difference step
STEP = 1e-5


def tiny_config(**kw) -> WorldModelConfig:
    """Smallest valid architecture: 16x16 inputs reduce to a 1x1 feature map."""
    base = dict(image_size=16, channels=(3, 4, 4, 5), z_dim=6, hidden=5, trunk=6, policy_hidden=5)
    base.update(kw)
    return WorldModelConfig(**base)


def _project(tape, out, R):
    return tape.sum(tape.mul(out, R))


def _param(rng, shape, name, scale=1.0):
    return Parameter(rng.uniform(-scale, scale, shape).astype(np.float32), name)


def layer_checks(seed: int = 0, tolerance: float = LAYER_TOL) -> dict:
    """name -> GradCheckReport for every primitive op with parameters or inputs."""
    rng = np.random.default_rng(seed)
    out = {}

    def run(name, fn, params, shape_out):
        R = rng.standard_normal(shape_out).astype(np.float32)
        out[name] = grad_check(lambda t: _project(t, fn(t), R), params, tolerance=tolerance, h=STEP,
                               precision=np.float64, rng=np.random.default_rng(seed + 1))

    x = _param(rng, (3, 5), "x")
    W = _param(rng, (5, 4), "W", 0.5)
    b = _param(rng, (4,), "b", 0.5)
    run("dense", lambda t: t.dense(x, W, b), [x, W, b], (3, 4))

    xi = _param(rng, (2, 6, 6, 3), "x")
    Wc = _param(rng, (4, 4, 3, 2), "W", 0.3)
    bc = _param(rng, (2,), "b", 0.3)
    run("conv2d", lambda t: t.conv2d(xi, Wc, bc, stride=2, pad=1), [xi, Wc, bc], (2, 3, 3, 2))

    xd = _param(rng, (2, 3, 3, 2), "x")
    Wd = _param(rng, (4, 4, 3, 2), "W", 0.3)
    bd = _param(rng, (3,), "b", 0.3)
    run("deconv2d", lambda t: t.deconv2d(xd, Wd, bd, stride=2, pad=1), [xd, Wd, bd], (2, 6, 6, 3))

    n_in, n_h = 3, 4
    xs = _param(rng, (3, 2, n_in), "x")
    Wx = _param(rng, (n_in, 4 * n_h), "Wx", 0.5)
    Wh = _param(rng, (n_h, 4 * n_h), "Wh", 0.5)
    bl = _param(rng, (4 * n_h,), "b", 0.5)

    def lstm(t):
        h = np.zeros((2, n_h), np.float32)
        c = np.zeros((2, n_h), np.float32)
        hs = []
        for i in range(3):
            h, c = t.lstm_cell(t.take(xs, i, axis=0), h, c, Wx, Wh, bl)
            hs.append(t.add(h, c))
        return t.stack(hs, axis=0)
    run("lstm_cell", lstm, [xs, Wx, Wh, bl], (3, 2, n_h))

    for act in ("elu", "tanh", "sigmoid"):
        # keep probes away from the ELU kink at 0
        xa = Parameter((rng.uniform(0.2, 1.5, (4, 5)) * rng.choice([-1, 1], (4, 5))).astype(np.float32), "x")
        run(act, lambda t, xa=xa, act=act: t.activation(xa, act), [xa], (4, 5))

    xa, xb = _param(rng, (3, 4), "a"), _param(rng, (3, 2), "b")
    run("concat_take_stack", lambda t: t.stack([t.concat([xa, xb], -1), t.concat([xa, xb], -1)], 1),
        [xa, xb], (3, 2, 6))

    pred = _param(rng, (4, 3), "pred")
    tgt = rng.uniform(-1, 1, (4, 3)).astype(np.float32)
    # offset the targets so no residual sits at the L1 kink
    tgt = np.where(np.abs(pred.data - tgt) < 0.05, tgt + 0.2, tgt).astype(np.float32)
    for name in ("l1_loss", "l2_loss", "l2_norm_loss"):
        out[name] = grad_check(lambda t, name=name: getattr(t, name)(pred, tgt), [pred],
                               tolerance=tolerance, h=STEP, precision=np.float64)
    return out


def _toy_batch(rng, cfg: WorldModelConfig, B: int = 2, T: int = 3) -> Batch:
    S = cfg.image_size
    return Batch(rng.uniform(-1, 1, (B, T, S, S, 3)).astype(np.float32),
                 rng.uniform(-1, 1, (B, T, 3)).astype(np.float32),
                 rng.uniform(-1, 1, (B, T, 2)).astype(np.float32),
                 *(rng.uniform(-1, 1, (B, T, 6)).astype(np.float32) for _ in range(3)))


def composite_checks(seed: int = 0, tolerance: float = COMPOSITE_TOL,
                     config: WorldModelConfig | None = None) -> dict:
    """name -> GradCheckReport for encoder, transition, decoders, both policies and L_Joint."""
    cfg = config or tiny_config()
    rng = np.random.default_rng(seed)
    wm = WorldModel(cfg, seed)
    batch = _toy_batch(rng, cfg)
    B, T = batch.B, batch.T
    out = {}

    def check(name, fn, params, shape_out):
        R = rng.standard_normal(shape_out).astype(np.float32)
        out[name] = grad_check(lambda t: _project(t, fn(t), R), params, tolerance=tolerance, h=STEP,
                               precision=np.float64, max_entries=12, rng=np.random.default_rng(seed + 1))

    imgs = batch.images[:, 0]
    check("encoder", lambda t: wm.encode(t, imgs), wm.parameters(["phi1"]), (B, cfg.z_dim))

    z = rng.uniform(-1, 1, (B, cfg.z_dim)).astype(np.float32)

    def trans(t):
        state = wm.initial_state(B)
        outs = []
        for i in range(T):
            zh, state = wm.transition(t, z, batch.actions[:, i], state)
            outs.append(t.concat([zh, state.h1, state.h2], -1))
        return t.stack(outs, 1)
    check("transition", trans, wm.parameters(["phi2"]), (B, T, cfg.z_dim + 2 * cfg.hidden))

    h1 = rng.uniform(-0.9, 0.9, (B, cfg.hidden)).astype(np.float32)
    h2 = rng.uniform(-0.9, 0.9, (B, cfg.hidden)).astype(np.float32)
    S = cfg.image_size
    check("rgb_decoder", lambda t: wm.decode_rgb(t, z, h1, h2), wm.parameters(["zeta1"]), (B, S, S, 3))

    def dyn(t):
        d = wm.decode_dynamics(t, z, h1, h2)
        return t.concat([d["P"], d["V"], d["A"]], -1)
    check("dynamics_decoder", dyn, wm.parameters(["zeta_dyn", "zeta2", "zeta3", "zeta4"]), (B, 18))

    g = batch.goals[:, 0]
    ff = FeedforwardPolicy(cfg, seed)
    check("policy_feedforward", lambda t: ff.act(t, z, h1, h2, g)[0], ff.parameters(), (B, 3))

    rec = RecurrentPolicy(cfg, seed)

    def rec_fn(t):
        st = rec.initial_state(B)
        acts = []
        for i in range(T):
            a, st = rec.act(t, z, h1, h2, batch.goals[:, i], st)
            acts.append(a)
        return t.stack(acts, 1)
    check("policy_recurrent", rec_fn, rec.parameters(), (B, T, 3))

    weights = LossWeights(w_P=1.0, w_V=0.5, w_A=0.25)
    pol = FeedforwardPolicy(cfg, seed + 3)

    def joint(t):
        u = unroll(t, wm, batch, policy=pol)
        return loss_joint(t, u, batch, weights)
    out["joint_loss"] = grad_check(joint, wm.parameters() + pol.parameters(), tolerance=tolerance, h=STEP,
                                   precision=np.float64, max_entries=4, rng=np.random.default_rng(seed + 1))
    return out


def run_all(seed: int = 0) -> dict:
    res = {f"layer/{k}": v for k, v in layer_checks(seed).items()}
    res.update({f"composite/{k}": v for k, v in composite_checks(seed).items()})
    return res
