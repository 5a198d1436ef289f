import json

import numpy as np
import pytest

from layoutgen import diffusion
from layoutgen.schedule import (
    EPSILON_REPLACE,
    ScheduleError,
    build_schedule,
    load_schedule,
    schedule_from_cumulative,
)


def brute_cumulative(s, t):
    q = np.eye(s.num_regular_plus_pad + 1)
    for i in range(1, t + 1):
        q = diffusion.transition_matrix(s, i) @ q
    return q


def test_epsilon_flat_replace_mass_pinned():
    s = build_schedule(T=100, K=36)
    mass = s.total_replace_mass()
    assert mass[0] == 0.0
    # reconstruction through 1 - alpha_bar - gamma_bar costs a few ulp at 1.0
    assert np.abs(mass[1:] - 1e-6).max() < 1e-12
    assert s.profile == "epsilon-flat"


def test_t0_boundary_is_identity():
    s = build_schedule(T=50, K=10)
    assert s.alpha_bar[0] == 1.0
    assert s.gamma_bar[0] == 0.0
    assert s.beta_bar[0] == 0.0


@pytest.mark.parametrize(
    "profile,param",
    [("epsilon-flat", 1e-6), ("linear-up", 0.1), ("linear-up", 0.2), ("linear-down", 0.05)],
)
def test_closed_form_matches_matrix_product(profile, param):
    s = build_schedule(T=10, K=6, beta_profile=profile, profile_param=param)
    for t in range(s.T + 1):
        qbar = brute_cumulative(s, t)
        for z0 in range(s.num_regular_plus_pad):
            closed = diffusion.cumulative_marginal(s, t, z0)
            assert np.abs(qbar[:, z0] - closed).max() < 1e-10


def test_invariants_hold_for_all_profiles():
    for profile, param in [("epsilon-flat", 1e-6), ("linear-up", 0.15), ("linear-down", 0.1)]:
        s = build_schedule(T=40, K=12, beta_profile=profile, profile_param=param)
        s.validate()
        kp1 = s.num_regular_plus_pad
        assert np.abs(s.alpha + kp1 * s.beta + s.gamma - 1.0).max() < 1e-12
        assert s.gamma_bar[-1] > 0.999
        assert (np.diff(s.alpha_bar) <= 1e-15).all()
        assert (np.diff(s.gamma_bar) >= -1e-15).all()


def test_infeasible_profile_rejected():
    # a decreasing conditional replace share needs negative per-step mass
    T, K = 10, 6
    t = np.arange(T + 1, dtype=float)
    gamma_bar = (t / T) * (1 - 1e-4)
    share = np.zeros(T + 1)
    share[1:] = np.linspace(0.1, 0.01, T)
    alpha_bar = 1 - gamma_bar - share * (1 - gamma_bar)
    with pytest.raises(ScheduleError, match="infeasible"):
        schedule_from_cumulative(T, K, alpha_bar, gamma_bar)


def test_profile_param_range_checked():
    with pytest.raises(ScheduleError):
        build_schedule(T=10, K=6, beta_profile="linear-up", profile_param=0.5)
    with pytest.raises(ScheduleError):
        build_schedule(T=0, K=6)
    with pytest.raises(ScheduleError):
        build_schedule(T=10, K=6, beta_profile="nope")


def test_serialization_round_trip(tmp_path):
    s = build_schedule(T=25, K=8, beta_profile="linear-up", profile_param=0.05)
    path = tmp_path / "schedule.json"
    s.save(path)
    payload = json.loads(path.read_text())
    assert payload["T"] == 25 and payload["K"] == 8
    s2 = load_schedule(path)
    for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
        assert np.allclose(getattr(s, name), getattr(s2, name), rtol=0, atol=1e-15)
    assert s2.profile == "linear-up"


def test_t_equals_one_schedule():
    s = build_schedule(T=1, K=4)
    assert s.gamma_bar[1] == pytest.approx(1 - 1e-4)
    assert s.total_replace_mass()[1] == pytest.approx(EPSILON_REPLACE)
