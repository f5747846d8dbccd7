import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcarl.errors import ConfigError
from mcarl.rewards import (PENALTY_TERMS, TERM_NAMES, RewardInputs, RewardWeights, compute_rewards,
                           compute_terms, tracking_reward)

Q0 = np.tile([0.0, 0.8, -1.5], 4)


def rest_inputs(n=1, **kw):
    """The analytic rest point: perfect tracking, default pose, nominal height, no contacts."""
    base = dict(
        lin_vel=np.zeros((n, 3)), ang_vel=np.zeros((n, 3)),
        projected_gravity=np.tile([0.0, 0.0, -1.0], (n, 1)), height=np.full(n, 0.3),
        q=np.tile(Q0, (n, 1)), qd=np.zeros((n, 12)), qd_prev=np.zeros((n, 12)), tau=np.zeros((n, 12)),
        action=np.zeros((n, 12)), prev_action=np.zeros((n, 12)), command=np.zeros((n, 3)),
        first_contact=np.zeros((n, 4), bool), air_time=np.zeros((n, 4)), foot_force=np.zeros((n, 4, 3)),
        body_contacts=np.zeros(n), reset=np.zeros(n, bool), timeout=np.zeros(n, bool),
        q_default=Q0, q_min=Q0 - 1.0, q_max=Q0 + 1.0, qd_max=30.0, tau_max=np.full((n, 12), 20.0),
        h_target=0.3, dt=0.005, force_max=100.0,
    )
    base.update(kw)
    return RewardInputs(**base)


def test_tracking_closed_forms():
    assert tracking_reward(np.array([0.4, -0.1]), np.array([0.4, -0.1]), 0.25, 3.0) == 3.0
    d = math.sqrt(0.25 / 2)
    assert tracking_reward(np.array([d, d]), np.zeros(2), 0.25, 3.0) == pytest.approx(3 / math.e, abs=1e-12)
    assert tracking_reward(0.5, 0.0, 0.25, 3.0) == pytest.approx(3 / math.e, abs=1e-12)


def test_tracking_is_per_env():
    v = np.array([[0.0], [0.5], [5.0]])
    r = tracking_reward(v, np.zeros((3, 1)), 0.25, 1.0)
    np.testing.assert_allclose(r, np.exp(-np.array([0.0, 0.25, 25.0]) / 0.25))


def test_rest_point_totals_six():
    rb = compute_rewards(rest_inputs(), RewardWeights())
    assert rb.total[0] == pytest.approx(6.0, abs=1e-12)
    assert rb.tracking[0] == pytest.approx(6.0, abs=1e-12)
    assert set(rb.terms) == set(TERM_NAMES) and len(TERM_NAMES) == 22


def test_rest_point_every_other_term_is_zero():
    terms = compute_terms(rest_inputs(), 0.25)
    for name in TERM_NAMES:
        if name in ("tracking_lin_vel", "tracking_ang_vel", "survival"):
            continue
        assert terms[name][0] == 0.0, name


def test_total_matches_independent_resum(rng):
    n = 16
    x = rest_inputs(
        n, lin_vel=rng.normal(size=(n, 3)), ang_vel=rng.normal(size=(n, 3)),
        projected_gravity=rng.normal(size=(n, 3)) * 0.1, height=rng.uniform(0.1, 0.4, n),
        q=Q0 + rng.normal(size=(n, 12)), qd=rng.normal(size=(n, 12)) * 20, qd_prev=rng.normal(size=(n, 12)),
        tau=rng.normal(size=(n, 12)) * 25, action=rng.normal(size=(n, 12)), prev_action=rng.normal(size=(n, 12)),
        command=rng.normal(size=(n, 3)) * 0.5, first_contact=rng.random((n, 4)) < 0.3,
        air_time=rng.uniform(0, 1, (n, 4)), foot_force=rng.normal(size=(n, 4, 3)) * 60,
        body_contacts=rng.integers(0, 3, n).astype(float), reset=rng.random(n) < 0.3,
    )
    w = RewardWeights()
    rb = compute_rewards(x, w)
    for i in range(n):
        s = 0.0
        for name in TERM_NAMES:
            s += getattr(w, name) * float(rb.terms[name][i])
        assert rb.total[i] == pytest.approx(s, rel=1e-12, abs=1e-12)

    # a few terms against scalar formulas
    i = 3
    assert rb.terms["lin_vel_z"][i] == pytest.approx(x.lin_vel[i, 2] ** 2)
    assert rb.terms["action_rate"][i] == pytest.approx(sum((x.action[i] - x.prev_action[i]) ** 2))
    power = sum(x.tau[i, j] * x.qd[i, j] for j in range(12))
    assert rb.terms["energy"][i] == pytest.approx(power)
    speed = math.hypot(x.lin_vel[i, 0], x.lin_vel[i, 1])
    assert rb.terms["energy_efficiency"][i] == pytest.approx(-abs(power / (speed * 0.005 + 1e-6)))


def test_action_rate_zero_for_repeated_action(rng):
    a = rng.normal(size=(1, 12))
    assert compute_terms(rest_inputs(action=a, prev_action=a.copy()), 0.25)["action_rate"][0] == 0.0


def test_base_height_zero_at_target():
    assert compute_terms(rest_inputs(height=np.array([0.3])), 0.25)["base_height"][0] == 0.0
    assert compute_terms(rest_inputs(height=np.array([0.2])), 0.25)["base_height"][0] == pytest.approx(0.02)


def test_penalties_non_negative_and_tracking_bounded(rng):
    n = 64
    x = rest_inputs(
        n, lin_vel=rng.normal(size=(n, 3)) * 3, ang_vel=rng.normal(size=(n, 3)) * 3,
        q=Q0 + rng.normal(size=(n, 12)) * 2, qd=rng.normal(size=(n, 12)) * 40,
        tau=rng.normal(size=(n, 12)) * 40, command=rng.normal(size=(n, 3)),
        foot_force=rng.normal(size=(n, 4, 3)) * 200, reset=rng.random(n) < 0.5,
        timeout=rng.random(n) < 0.2, body_contacts=rng.integers(0, 4, n).astype(float),
    )
    terms = compute_terms(x, 0.25)
    for name in PENALTY_TERMS:
        assert np.all(terms[name] >= 0), name
    rb = compute_rewards(x, RewardWeights())
    w = rb.weighted
    assert np.all((w["tracking_lin_vel"] > 0) & (w["tracking_lin_vel"] <= 3.0))
    assert np.all((w["tracking_ang_vel"] > 0) & (w["tracking_ang_vel"] <= 3.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.01, 2.0))
def test_lin_tracking_strictly_decreasing(err, step):
    a = rest_inputs(lin_vel=np.array([[err, 0.0, 0.0]]))
    b = rest_inputs(lin_vel=np.array([[err + step, 0.0, 0.0]]))
    ra = compute_terms(a, 0.25)["tracking_lin_vel"][0]
    rb_ = compute_terms(b, 0.25)["tracking_lin_vel"][0]
    assert rb_ < ra or ra == 0.0


def test_feet_air_time_indicator():
    air = np.array([[0.7, 0.2, 0.9, 0.6]])
    touch = np.array([[True, True, False, False]])
    t = compute_terms(rest_inputs(air_time=air, first_contact=touch), 0.25)["feet_air_time"][0]
    assert t == pytest.approx((0.7 - 0.5) + (0.2 - 0.5))
    none = compute_terms(rest_inputs(air_time=air), 0.25)["feet_air_time"][0]
    assert none == 0.0


def test_stand_still_gated_by_command():
    q = np.tile(Q0 + 0.1, (1, 1))
    still = compute_terms(rest_inputs(q=q), 0.25)["stand_still"][0]
    moving = compute_terms(rest_inputs(q=q, command=np.array([[0.5, 0.0, 0.0]])), 0.25)["stand_still"][0]
    assert still == pytest.approx(1.2) and moving == 0.0


def test_stumble_and_termination_indicators():
    ff = np.zeros((2, 4, 3))
    ff[0, 1] = [30.0, 0.0, 5.0]
    x = rest_inputs(2, foot_force=ff, reset=np.array([True, True]), timeout=np.array([False, True]))
    t = compute_terms(x, 0.25)
    np.testing.assert_array_equal(t["stumble"], [1.0, 0.0])
    np.testing.assert_array_equal(t["termination"], [1.0, 0.0])
    np.testing.assert_array_equal(t["survival"], [0.0, 1.0])


def test_weights_validation():
    with pytest.raises(ConfigError):
        RewardWeights(tracking_sigma=0.0)
    with pytest.raises(ConfigError):
        RewardWeights.from_dict({"bogus": 1.0})
    w = RewardWeights.from_dict({"lin_vel_z": -1})
    assert w.lin_vel_z == -1.0 and replace(w, survival=0.1).survival == 0.1
