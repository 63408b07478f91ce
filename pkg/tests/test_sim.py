from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynmap.sim import (AccelCommand, BodyShape, BodyState, PhysicsParams, SimulationDiverged,
                        StaticBox, SupportStatus, block_energy, control_step, make_world,
                        max_penetration, step_physics, support_status)

CART = BodyShape(0.105, 0.015)
BLOCK = BodyShape(0.02, 0.05)


def resting_world(**kw):
    return make_world((0.5, 0.4, 0.0), CART, BLOCK, **kw)


def settled(world, n=20):
    for _ in range(n):
        world = control_step(world, AccelCommand())
    return world


def test_free_fall_single_step():
    w = resting_world()
    w = replace(w, block=BodyState(0.5, 0.9, 0.0, 0.0, 0.3, 0.0))
    w2 = step_physics(w, AccelCommand())
    assert w2.block.vy == pytest.approx(0.3 - 9.81 * 0.001, abs=1e-12)
    assert w2.block.vx == 0.0
    assert w2.steps == 1


def test_resting_block_is_unchanged():
    w = settled(resting_world())
    before = w.block.as_array()
    w2 = control_step(w, AccelCommand())
    assert np.max(np.abs(w2.block.as_array()[:3] - before[:3])) < 1e-4
    assert max_penetration(w2) < 1e-4


def _horizontal_push(dt):
    params = PhysicsParams(dt_physics=dt)
    w = settled(resting_world(params=params), 5)
    w = replace(w, steps=0)
    v0 = w.block.vx
    w = control_step(w, AccelCommand(1.0, 0.0, 0.0), params)
    return (w.block.vx - v0) / 0.05, w.cart.vx / 0.05


def test_sticking_friction_matches_reference():
    # 1 m/s^2 is well below mu * g, so the block should ride along
    a_block, a_cart = _horizontal_push(1e-3)
    a_ref, _ = _horizontal_push(1e-5)
    assert a_cart == pytest.approx(1.0, rel=1e-9)
    assert a_block == pytest.approx(a_cart, rel=0.05)
    assert a_block == pytest.approx(a_ref, rel=0.05)


def test_constant_accel_closed_form():
    w = resting_world()
    x0 = w.cart.x
    w = control_step(w, AccelCommand(1.0, 0.0, 0.0))
    assert w.cart.x - x0 == pytest.approx(0.5 * 0.05 ** 2, abs=1e-6)
    assert w.steps == 50


def test_episode_duration():
    w = resting_world()
    for _ in range(120):
        w = control_step(w, AccelCommand())
    assert w.steps == 6000
    assert w.time == 6000 * 0.001
    assert w.time == pytest.approx(6.0, abs=1e-12)


def test_support_states():
    w = settled(resting_world())
    assert support_status(w) is SupportStatus.SUPPORTED
    up = replace(w, block=replace(w.block, y=w.block.y + 0.5))
    assert support_status(up) is SupportStatus.AIRBORNE
    on_floor = replace(w, block=BodyState(0.2, BLOCK.half_h, 0.0))
    assert support_status(on_floor) is SupportStatus.GROUNDED


def test_determinism_bitwise():
    rng = np.random.default_rng(0)
    cmds = rng.uniform(-3, 3, (30, 3))

    def run():
        w = resting_world()
        for c in cmds:
            w = control_step(w, AccelCommand.from_array(c))
        return w.state_vector()
    assert np.array_equal(run(), run())


def test_cart_is_kinematic():
    rng = np.random.default_rng(1)
    cmds = rng.uniform(-5, 5, (20, 3))
    carts = []
    for shape in (BLOCK, BodyShape(0.03, 0.04, density=900.0)):
        w = make_world((0.5, 0.4, 0.0), CART, shape)
        for c in cmds:
            w = control_step(w, AccelCommand.from_array(c))
        carts.append(w.cart.as_array())
    assert np.array_equal(carts[0], carts[1])


def test_energy_non_increasing_at_rest():
    w = resting_world()
    w = replace(w, block=replace(w.block, y=w.block.y + 0.01))
    prev = block_energy(w)
    for _ in range(40):
        w = control_step(w, AccelCommand())
        e = block_energy(w)
        assert e <= prev + 1e-6
        prev = e


def test_penetration_bound_under_motion():
    rng = np.random.default_rng(2)
    w = resting_world()
    for _ in range(60):
        w = control_step(w, AccelCommand.from_array(rng.uniform(-2, 2, 3) * (1, 1, 2)))
        assert max_penetration(w) < 1e-3


def test_accel_is_clamped():
    p = PhysicsParams()
    w = control_step(resting_world(), AccelCommand(1e3, 0.0, 0.0), p)
    assert w.cart.vx == pytest.approx(p.accel_limits[0] * 0.05, rel=1e-9)


def test_non_finite_command_rejected():
    with pytest.raises(ValueError):
        step_physics(resting_world(), AccelCommand(float("nan"), 0.0, 0.0))


def test_divergence_names_body_and_step():
    w = resting_world()
    w = replace(w, block=replace(w.block, vx=float("inf")), steps=7)
    with pytest.raises(SimulationDiverged) as exc:
        control_step(w, AccelCommand())
    assert exc.value.body == "block"
    assert exc.value.step_index >= 7


@pytest.mark.parametrize("kw", [dict(restitution=1.5), dict(friction_mu=-0.1),
                                dict(solver_iterations=0)])
def test_physics_params_validation(kw):
    with pytest.raises(ValueError):
        PhysicsParams(**kw)


def test_bad_control_period():
    with pytest.raises(ValueError):
        PhysicsParams(control_period=0.0505, dt_physics=0.001).substeps


@pytest.mark.parametrize("kw", [dict(half_w=0, half_h=1), dict(half_w=1, half_h=1, density=0),
                                dict(half_w=1, half_h=1, kind="disc")])
def test_body_shape_validation(kw):
    with pytest.raises(ValueError):
        BodyShape(**kw)


def test_static_obstacle_contact():
    wall = StaticBox(0.7, 0.5, 0.01, 0.2, tag="obstacle")
    w = make_world((0.5, 0.4, 0.0), CART, BLOCK, static_geometry=(StaticBox(0.5, -0.5, 5, 0.5), wall))
    hit = False
    for _ in range(30):
        w = control_step(w, AccelCommand(2.0, 0.0, 0.0))
        hit = hit or bool(w.cart_static_mask >> 1 & 1)
    assert hit


@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_cart_pose_is_double_integral(ax, ay):
    w = resting_world()
    w2 = control_step(w, AccelCommand(ax, ay, 0.0))
    assert w2.cart.x - w.cart.x == pytest.approx(0.5 * ax * 0.05 ** 2, abs=1e-6)
    assert w2.cart.y - w.cart.y == pytest.approx(0.5 * ay * 0.05 ** 2, abs=1e-6)
