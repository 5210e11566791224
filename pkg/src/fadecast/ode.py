"""Explicit Runge-Kutta integration that records onto the autodiff tape.

The adaptive path is the Dormand-Prince 5(4) embedded pair with proportional
step control and dense output from the pair's quartic interpolant. All state
updates are tape operations, so differentiating the decoded trajectory
backpropagates through exactly the step sequence taken in the forward pass
(discretize-then-optimize). Step-size selection itself reads detached values
and carries no gradient. A recorded plan of accepted steps can be replayed,
which keeps the discrete map fixed under small parameter perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, ValidationError
from .validation import as_float_array, require_positive

# Dormand-Prince 5(4) tableau (same coefficients as the classic DOPRI5).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# Error weights: difference between the 5th- and embedded 4th-order solutions.
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
               -17253 / 339200, 22 / 525, -1 / 40])
# Dense-output polynomial coefficients (Shampine's interpolant for the pair):
# b_s(theta) = sum_j P[s, j] * theta^(j+1).
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


@dataclass
class OdeSolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    max_steps: int = 10_000
    initial_step: float | None = None

    def __post_init__(self):
        require_positive(self.rtol, "rtol")
        require_positive(self.atol, "atol")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.initial_step is not None:
            require_positive(self.initial_step, "initial_step")


def _stages(f, h, dt: float, k1):
    """Evaluate the seven DOPRI5 stages from state ``h`` with FSAL ``k1``."""
    ks = [k1]
    for i in range(1, 6):
        y = h
        for j, a in enumerate(_A[i]):
            if a != 0.0:
                y = ad.add_scaled(y, ks[j], dt * a)
        ks.append(f(y))
    y5 = h
    for j in range(6):
        if _B[j] != 0.0:
            y5 = ad.add_scaled(y5, ks[j], dt * _B[j])
    ks.append(f(y5))
    return ks, y5


def _emit(h, ks, dt: float, thetas: np.ndarray):
    """Dense output rows at relative positions ``thetas`` within one step."""
    powers = np.vander(thetas, 5, increasing=True)[:, 1:]  # theta^1..theta^4
    weights = dt * (powers @ _P.T)  # (n_req, 7)
    block = ad.matmul(ad.constant(weights), ad.stack(ks))
    return ad.add(block, h)


def integrate_dopri5(f, h0: ad.Tensor, times, config: OdeSolverConfig | None = None,
                     plan: list[float] | None = None, return_plan: bool = False):
    """Integrate dh/dt = f(h) from t=0, emitting states at ``times``.

    Returns a (len(times), dim) Tensor, or (Tensor, plan) when
    ``return_plan`` is set. Passing a previously returned ``plan`` replays
    that exact accepted-step sequence without error control.
    """
    config = config or OdeSolverConfig()
    times = as_float_array(times, "times", ndim=1)
    if times.size == 0:
        raise ValidationError("times must be nonempty")
    if np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly increasing")
    if times[0] < 0:
        raise ValidationError("times must start at or after 0")
    t_end = float(times[-1])
    dim = h0.data.shape[0]

    blocks = []
    idx = 0
    if times[0] == 0.0:
        blocks.append(ad.reshape(h0, (1, dim)))
        idx = 1

    recorded: list[float] = []
    h = h0
    t = 0.0
    k1 = f(h0)
    if plan is not None:
        for dt in plan:
            ks, y5 = _stages(f, h, dt, k1)
            hi = idx
            while hi < times.size and times[hi] <= t + dt + 1e-12 * max(1.0, abs(t + dt)):
                hi += 1
            if hi > idx:
                thetas = np.clip((times[idx:hi] - t) / dt, 0.0, 1.0)
                blocks.append(_emit(h, ks, dt, thetas))
                idx = hi
            h, k1 = y5, ks[6]
            t += dt
        if idx != times.size:
            raise NumericalError("step plan does not cover all requested times")
        out = ad.concat(blocks, axis=0)
        return (out, list(plan)) if return_plan else out

    dt = config.initial_step if config.initial_step is not None else t_end / 100.0
    dt = min(dt, t_end)
    n_steps = 0
    err_norm = 0.0
    while t < t_end * (1.0 - 1e-14):
        if n_steps >= config.max_steps:
            raise NumericalError(
                f"ODE solver exceeded max_steps={config.max_steps} "
                f"(reached t={t:.6g} of {t_end:.6g}, dt={dt:.3e}, last err_norm={err_norm:.3e}); "
                "the dynamics may be stiff for this tolerance")
        dt = min(dt, t_end - t)
        ks, y5 = _stages(f, h, dt, k1)
        err = dt * sum(e * k.data for e, k in zip(_E, ks) if e != 0.0)
        scale = config.atol + config.rtol * np.maximum(np.abs(h.data), np.abs(y5.data))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        n_steps += 1
        if err_norm <= 1.0:
            hi = idx
            while hi < times.size and times[hi] <= t + dt + 1e-12 * max(1.0, abs(t + dt)):
                hi += 1
            if hi > idx:
                thetas = np.clip((times[idx:hi] - t) / dt, 0.0, 1.0)
                blocks.append(_emit(h, ks, dt, thetas))
                idx = hi
            recorded.append(dt)
            h, k1 = y5, ks[6]
            t += dt
            factor = _MAX_FACTOR if err_norm == 0.0 else min(
                _MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2))
            dt *= factor
        else:
            dt *= max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)

    if idx < times.size:
        # Remaining requested times sit at t_end within float slack.
        ks, y5 = _stages(f, h, max(t_end - t, np.finfo(float).tiny), k1)
        blocks.append(_emit(h, ks, t_end - t, np.ones(times.size - idx)))
        recorded.append(t_end - t)

    out = ad.concat(blocks, axis=0)
    return (out, recorded) if return_plan else out


def integrate_rk4(f, h0: ad.Tensor, t_end: float, n_steps: int) -> ad.Tensor:
    """Classic fixed-step RK4; returns states at the n_steps+1 grid nodes."""
    require_positive(t_end, "t_end")
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    dt = t_end / n_steps
    states = [h0]
    h = h0
    for _ in range(n_steps):
        k1 = f(h)
        k2 = f(ad.add_scaled(h, k1, dt / 2))
        k3 = f(ad.add_scaled(h, k2, dt / 2))
        k4 = f(ad.add_scaled(h, k3, dt))
        h = ad.add_scaled(h, k1, dt / 6)
        h = ad.add_scaled(h, k2, dt / 3)
        h = ad.add_scaled(h, k3, dt / 3)
        h = ad.add_scaled(h, k4, dt / 6)
        states.append(h)
    return ad.stack(states)
