"""Corruption schedules for the absorbing-state discrete diffusion.

Per step t the transition kernel keeps a token with probability ``alpha[t]``,
replaces it with a uniformly chosen regular-or-PAD class with probability
``(K+1) * beta[t]`` (``beta`` is the per-class value), and absorbs it into
MASK with probability ``gamma[t]``; MASK never leaves.  Products of such
kernels stay in the same family, so the t-step kernel is available in closed
form from three cumulative curves:

    alpha_bar[t] = prod_{i<=t} alpha[i]
    gamma_bar[t] = 1 - prod_{i<=t} (1 - gamma[i])
    (K+1) * beta_bar[t] = 1 - alpha_bar[t] - gamma_bar[t]

Schedules are built backwards from target cumulative curves: the absorbing
curve ``gamma_bar`` rises linearly to ``1 - gamma_headroom`` and the
replace-mass curve ``(K+1)*beta_bar`` follows one of three profiles
(``epsilon-flat``, ``linear-up``, ``linear-down``).  Per-step probabilities
are recovered from ratios of consecutive cumulants; a profile whose recovery
would need a negative per-step probability is rejected as infeasible.

Feasibility note: within this kernel family the share of surviving (non-
absorbed) probability that sits on wrong regular tokens,
``(K+1)*beta_bar[t] / (1 - gamma_bar[t])``, can never decrease (replacement
only pushes surviving mass toward uniform).  Because the absorbing curve
ends near 1, an absolute replace-mass target at t=T above the headroom is
unreachable.  The linear profiles therefore interpolate that conditional
share: ``linear-up`` ramps it from the epsilon level to the profile
parameter, concentrating replacements late, and ``linear-down`` injects the
full share at t=1, concentrating them early while the absolute mass decays
with survival.  ``epsilon-flat`` keeps the absolute mass pinned at epsilon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPSILON_REPLACE = 1e-6   # flat/endpoint value for the total replace mass
GAMMA_HEADROOM = 1e-4    # final absorbing mass is 1 - this sliver
_FEAS_TOL = 1e-12

PROFILES = ("epsilon-flat", "linear-up", "linear-down")


class ScheduleError(ValueError):
    """Raised for infeasible or malformed schedule requests."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step and cumulative corruption probabilities, indexed by t in [0, T].

    Index 0 holds the no-corruption identity (alpha=1, beta=gamma=0); per-step
    arrays at index t describe the kernel from t-1 to t.  ``beta`` and
    ``beta_bar`` are per-class values over the K+1 regular+PAD classes.
    """

    T: int
    num_regular_plus_pad: int  # K + 1
    profile: str
    profile_param: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray

    def validate(self, atol: float = 1e-12) -> None:
        T = self.T
        for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
            arr = getattr(self, name)
            if arr.shape != (T + 1,):
                raise ScheduleError(f"{name} must have shape ({T + 1},)")
        kp1 = self.num_regular_plus_pad
        step_sum = self.alpha + kp1 * self.beta + self.gamma
        if np.max(np.abs(step_sum - 1.0)) > atol:
            raise ScheduleError("per-step probabilities do not sum to 1")
        cum_sum = self.alpha_bar + kp1 * self.beta_bar + self.gamma_bar
        if np.max(np.abs(cum_sum - 1.0)) > 1e-9:
            raise ScheduleError("cumulative probabilities do not sum to 1")
        if np.any(np.diff(self.alpha_bar) > atol):
            raise ScheduleError("alpha_bar must be non-increasing")
        if np.any(np.diff(self.gamma_bar) < -atol):
            raise ScheduleError("gamma_bar must be non-decreasing")
        if self.gamma_bar[T] < 0.99:
            raise ScheduleError("gamma_bar must approach 1 at t=T")

    def total_replace_mass(self) -> np.ndarray:
        """Cumulative replace mass (K+1)*beta_bar over all t."""
        return self.num_regular_plus_pad * self.beta_bar

    def to_json(self) -> str:
        payload = {
            "T": self.T,
            "K": self.num_regular_plus_pad - 1,
            "profile": self.profile,
            "profile_param": self.profile_param,
            "alpha_bar": self.alpha_bar.tolist(),
            "beta_bar": self.beta_bar.tolist(),
            "gamma_bar": self.gamma_bar.tolist(),
        }
        return json.dumps(payload)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def schedule_from_cumulative(
    T: int,
    K: int,
    alpha_bar: np.ndarray,
    gamma_bar: np.ndarray,
    profile: str = "custom",
    profile_param: float = 0.0,
) -> DiffusionSchedule:
    """Recover per-step probabilities from cumulative keep/absorb curves.

    ``beta_bar`` is implied by normalization.  Raises ``ScheduleError`` when
    the curves require a negative per-step replace probability.
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    gamma_bar = np.asarray(gamma_bar, dtype=np.float64)
    kp1 = K + 1
    if alpha_bar[0] != 1.0 or gamma_bar[0] != 0.0:
        raise ScheduleError("cumulative curves must start at alpha_bar=1, gamma_bar=0")
    if np.any(alpha_bar <= 0.0) or np.any(gamma_bar >= 1.0):
        raise ScheduleError("need alpha_bar > 0 and gamma_bar < 1 at every t")

    beta_bar = (1.0 - alpha_bar - gamma_bar) / kp1
    if np.any(beta_bar < -_FEAS_TOL):
        raise ScheduleError("cumulative replace mass is negative")
    beta_bar = np.maximum(beta_bar, 0.0)

    alpha = np.ones(T + 1)
    gamma = np.zeros(T + 1)
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    gamma[1:] = 1.0 - (1.0 - gamma_bar[1:]) / (1.0 - gamma_bar[:-1])
    beta = (1.0 - alpha - gamma) / kp1
    beta[0] = 0.0
    if np.any(beta < -_FEAS_TOL):
        t_bad = int(np.argmax(beta < -_FEAS_TOL))
        raise ScheduleError(
            f"infeasible profile: step {t_bad} needs replace probability {beta[t_bad]:.3e}"
        )
    beta = np.maximum(beta, 0.0)

    sched = DiffusionSchedule(
        T=T,
        num_regular_plus_pad=kp1,
        profile=profile,
        profile_param=profile_param,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
        gamma_bar=gamma_bar,
    )
    sched.validate()
    return sched


def build_schedule(
    T: int,
    K: int,
    beta_profile: str = "epsilon-flat",
    profile_param: float = EPSILON_REPLACE,
    epsilon: float = EPSILON_REPLACE,
    gamma_headroom: float = GAMMA_HEADROOM,
) -> DiffusionSchedule:
    """Build a schedule with linear absorbing mass and the given replace profile.

    For ``epsilon-flat`` the total replace mass (K+1)*beta_bar is pinned to
    ``epsilon`` at every t >= 1.  For the linear profiles ``profile_param``
    is the endpoint of the conditional replace share (see module docstring):
    the share ramps from ``epsilon`` up to the parameter for ``linear-up``
    and holds the parameter from t=1 for ``linear-down``.
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if beta_profile not in PROFILES:
        raise ScheduleError(f"unknown profile {beta_profile!r}, expected one of {PROFILES}")
    if beta_profile != "epsilon-flat" and not epsilon <= profile_param <= 0.2:
        raise ScheduleError(f"profile parameter {profile_param} outside [{epsilon}, 0.2]")

    t_axis = np.arange(T + 1, dtype=np.float64)
    gamma_bar = (t_axis / T) * (1.0 - gamma_headroom)
    surviving = 1.0 - gamma_bar

    replace_mass = np.zeros(T + 1)
    if beta_profile == "epsilon-flat":
        replace_mass[1:] = epsilon
        profile_param = epsilon
    elif beta_profile == "linear-down":
        replace_mass[1:] = profile_param * surviving[1:]
    else:  # linear-up
        if T == 1:
            share = np.array([profile_param])
        else:
            share = epsilon + (profile_param - epsilon) * (t_axis[1:] - 1.0) / (T - 1.0)
        replace_mass[1:] = share * surviving[1:]

    alpha_bar = 1.0 - gamma_bar - replace_mass
    if np.any(alpha_bar <= 0.0):
        raise ScheduleError("infeasible profile: cumulative keep probability hits zero")
    return schedule_from_cumulative(
        T, K, alpha_bar, gamma_bar, profile=beta_profile, profile_param=profile_param
    )


def load_schedule(path: str | Path) -> DiffusionSchedule:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    T = int(payload["T"])
    K = int(payload["K"])
    alpha_bar = np.asarray(payload["alpha_bar"], dtype=np.float64)
    gamma_bar = np.asarray(payload["gamma_bar"], dtype=np.float64)
    return schedule_from_cumulative(
        T,
        K,
        alpha_bar,
        gamma_bar,
        profile=payload.get("profile", "custom"),
        profile_param=float(payload.get("profile_param", 0.0)),
    )
