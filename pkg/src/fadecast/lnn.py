"""Static and dynamic liquid networks for capacity-fade trajectories.

The hidden state follows the continuous-time dynamics

    dh/dt = -alpha (.) h + tanh(W_h h + u_bar),

with a strictly positive per-channel decay (softplus parameterization), a
64-dim hidden state initialized by an affine encoder from 100 SoH values,
and a mean-input proxy u_bar broadcast over the hidden channels. States are
integrated with the adaptive Dormand-Prince pair recorded on the autodiff
tape, decoded per requested time by an affine output map, and trained
against a value plus slope-matching loss. The static variant maps the first
100 cycles onto the reference battery's full lifespan; the dynamic variant
maps a 100-cycle window onto the next window and is rolled forward for
long-horizon refinement.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .errors import NumericalError, ValidationError
from .ode import OdeSolverConfig, integrate_dopri5, integrate_rk4
from .validation import as_float_array, require_positive

HIDDEN_DIM = 64
INPUT_LEN = 100

_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))  # decay_raw giving alpha = 1


@dataclass
class AdaptationConfig:
    """Knobs of the online plain-gradient refinement."""

    eta: float = 1e-4
    gamma: float = 0.5
    max_updates: int = 50

    def __post_init__(self):
        # eta == 0 is allowed as an explicit no-op adaptation.
        if self.eta < 0:
            raise ValidationError(f"eta must be >= 0, got {self.eta}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if self.max_updates < 0:
            raise ValidationError(f"max_updates must be >= 0, got {self.max_updates}")


@dataclass
class TrajectoryWindow:
    """100 consecutive SoH values starting at start_cycle."""

    start_cycle: int
    soh_values: np.ndarray

    def __post_init__(self):
        self.soh_values = as_float_array(self.soh_values, "soh_values", ndim=1,
                                         length=INPUT_LEN)
        if np.any(self.soh_values <= 0) or np.any(self.soh_values > 1.2):
            raise ValidationError("window SoH values must lie in (0, 1.2]")


def mean_input(x_in) -> float:
    """Arithmetic mean of the 100-value input, the static proxy drive."""
    x = as_float_array(x_in, "x_in", ndim=1, length=INPUT_LEN)
    return float(np.mean(x))


def total_loss(pred, target, gamma: float) -> tuple[float, np.ndarray]:
    """Value + slope loss and its exact gradient with respect to pred.

    L = mean((pred - target)^2) + gamma * mean((diff(pred) - diff(target))^2)
    """
    pred = as_float_array(pred, "pred", ndim=1)
    target = as_float_array(target, "target", ndim=1)
    if pred.shape != target.shape:
        raise ValidationError(
            f"pred length {pred.shape[0]} != target length {target.shape[0]}")
    n = pred.shape[0]
    if n < 2:
        raise ValidationError("trajectories need at least 2 points")
    d = pred - target
    slope_d = np.diff(pred) - np.diff(target)
    loss = float(np.mean(d * d) + gamma * np.mean(slope_d * slope_d))
    grad = 2.0 * d / n
    g = np.zeros(n)
    g[:-1] -= slope_d
    g[1:] += slope_d
    grad += gamma * 2.0 * g / (n - 1)
    return loss, grad


def total_loss_tensor(pred: ad.Tensor, target, gamma: float) -> ad.Tensor:
    """Tape version of total_loss used inside training loops."""
    target = as_float_array(target, "target", ndim=1)
    if pred.data.shape != target.shape:
        raise ValidationError(
            f"pred length {pred.data.shape[0]} != target length {target.shape[0]}")
    diff = ad.sub(pred, ad.constant(target))
    loss = ad.tmean(ad.mul(diff, diff))
    if gamma != 0.0:
        slope = ad.sub(ad.sub(pred[1:], pred[:-1]), ad.constant(np.diff(target)))
        loss = ad.add(loss, ad.mul(ad.tmean(ad.mul(slope, slope)), gamma))
    return loss


class LnnNetwork:
    """Parameters and tape-level forward passes of one liquid network."""

    def __init__(self, kind: str = "static", rng: np.random.Generator | None = None):
        if kind not in ("static", "dynamic"):
            raise ValidationError(f"kind must be 'static' or 'dynamic', got '{kind}'")
        self.kind = kind
        rng = rng if rng is not None else np.random.default_rng(0)

        def uniform(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return ad.Parameter(rng.uniform(-bound, bound, size=shape), name)

        self.w_enc = uniform((HIDDEN_DIM, INPUT_LEN), INPUT_LEN, "w_enc")
        self.b_enc = ad.Parameter(np.zeros(HIDDEN_DIM), "b_enc")
        self.decay_raw = ad.Parameter(np.full(HIDDEN_DIM, _SOFTPLUS_INV_ONE), "decay_raw")
        self.w_h = uniform((HIDDEN_DIM, HIDDEN_DIM), HIDDEN_DIM, "w_h")
        self.w_out = uniform(HIDDEN_DIM, HIDDEN_DIM, "w_out")
        self.b_out = ad.Parameter(np.zeros(1), "b_out")
        self.mean_input_proxy = 0.0

    def parameters(self) -> list[ad.Parameter]:
        return [self.w_enc, self.b_enc, self.decay_raw, self.w_h, self.w_out, self.b_out]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def encode(self, x_in) -> ad.Tensor:
        x = as_float_array(x_in, "x_in", ndim=1, length=INPUT_LEN)
        return ad.dense(ad.constant(x), self.w_enc, self.b_enc)

    def alpha(self) -> ad.Tensor:
        return ad.softplus(self.decay_raw)

    def make_dynamics(self, u_bar: float):
        """Closure evaluating dh/dt; alpha is shared across stage evaluations."""
        drive_bias = ad.constant(np.full(HIDDEN_DIM, u_bar))
        alpha = self.alpha()

        def dynamics(h: ad.Tensor) -> ad.Tensor:
            drive = ad.tanh(ad.add(ad.matmul(self.w_h, h), drive_bias))
            return ad.sub(drive, ad.mul(alpha, h))

        return dynamics

    def dynamics(self, h, u_bar: float) -> np.ndarray:
        """Plain-array dh/dt for inspection and finite-difference tests."""
        h = as_float_array(h, "h", ndim=1, length=HIDDEN_DIM)
        with ad.no_grad():
            return self.make_dynamics(u_bar)(ad.constant(h)).data

    def decode(self, states: ad.Tensor) -> ad.Tensor:
        """Affine per-time output map over (T, 64) hidden states."""
        return ad.add(ad.matmul(states, self.w_out), self.b_out)

    def trajectory(self, x_in, times, config: OdeSolverConfig,
                   plan: list[float] | None = None, return_plan: bool = False):
        """encode -> integrate -> decode at the requested times."""
        h0 = self.encode(x_in)
        dynamics = self.make_dynamics(mean_input(x_in))
        if return_plan:
            states, rec = integrate_dopri5(dynamics, h0, times, config,
                                           plan=plan, return_plan=True)
            return self.decode(states), rec
        states = integrate_dopri5(dynamics, h0, times, config, plan=plan)
        return self.decode(states)

    def trajectory_rk4(self, x_in, t_end: float, n_steps: int) -> ad.Tensor:
        """Fixed-step fallback path (grid states, not dense output)."""
        h0 = self.encode(x_in)
        dynamics = self.make_dynamics(mean_input(x_in))
        return self.decode(integrate_rk4(dynamics, h0, t_end, n_steps))

    def trajectory_batch(self, x_batch: np.ndarray, times,
                         config: OdeSolverConfig) -> ad.Tensor:
        """Trajectories of B inputs sharing one time grid, shape (T, B).

        The B hidden states are flattened into one ODE system so the batch
        shares a step sequence; gradients remain exact for the computed
        discrete map. Used by the training loops for throughput.
        """
        n_batch = x_batch.shape[0]
        h0 = ad.add(ad.matmul(ad.constant(x_batch), ad.transpose(self.w_enc)),
                    self.b_enc)
        u_bars = x_batch.mean(axis=1)
        drive_bias = ad.constant(np.repeat(u_bars[:, None], HIDDEN_DIM, axis=1))
        alpha = self.alpha()
        w_h_t = ad.transpose(self.w_h)

        def dynamics(h_flat: ad.Tensor) -> ad.Tensor:
            h = ad.reshape(h_flat, (n_batch, HIDDEN_DIM))
            drive = ad.tanh(ad.add(ad.matmul(h, w_h_t), drive_bias))
            return ad.reshape(ad.sub(drive, ad.mul(alpha, h)), (n_batch * HIDDEN_DIM,))

        states = integrate_dopri5(dynamics, ad.reshape(h0, (n_batch * HIDDEN_DIM,)),
                                  times, config)
        n_times = states.data.shape[0]
        flat = ad.reshape(states, (n_times * n_batch, HIDDEN_DIM))
        return ad.reshape(ad.add(ad.matmul(flat, self.w_out), self.b_out),
                          (n_times, n_batch))


def _batched_loss(pred: ad.Tensor, targets_tb: np.ndarray, gamma: float) -> ad.Tensor:
    """Value + slope loss over a (T, B) prediction block."""
    diff = ad.sub(pred, ad.constant(targets_tb))
    loss = ad.tmean(ad.mul(diff, diff))
    if gamma != 0.0:
        slope = ad.sub(ad.sub(pred[1:, :], pred[:-1, :]),
                       ad.constant(np.diff(targets_tb, axis=0)))
        loss = ad.add(loss, ad.mul(ad.tmean(ad.mul(slope, slope)), gamma))
    return loss


def _fit_network(net: LnnNetwork, x_inputs: np.ndarray, times: np.ndarray,
                 targets: np.ndarray, epochs: int, learning_rate: float,
                 gamma: float, config: OdeSolverConfig, batch_size: int | None,
                 rng: np.random.Generator) -> np.ndarray:
    """Adam loop over (x_in -> target trajectory) pairs sharing one time grid.

    The learning rate follows cosine annealing down to 1% of its initial
    value, which settles the oscillation Adam shows on these losses.
    """
    optimizer = ad.Adam(net.parameters(), learning_rate)
    n = x_inputs.shape[0]
    batch = n if batch_size is None else min(batch_size, n)
    history = []
    for epoch in range(epochs):
        anneal = 0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * epoch / max(1, epochs - 1)))
        optimizer.learning_rate = learning_rate * anneal
        order = rng.permutation(n) if batch < n else np.arange(n)
        epoch_losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            pred = net.trajectory_batch(x_inputs[idx], times, config)
            loss = _batched_loss(pred, targets[idx].T, gamma)
            if not np.isfinite(loss.data):
                raise NumericalError(f"LNN training diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
    return np.array(history)


class StaticLnnRegressor(BaseEstimator):
    """Reference-battery liquid network: first 100 cycles -> whole lifespan.

    fit() trains on the reference trajectory over times normalized by the
    reference lifespan; adapt() clones the model and refines it with plain
    gradient steps on an observed early-cycle prefix.
    """

    def __init__(self, epochs: int = 2500, learning_rate: float = 1e-3,
                 gamma: float = 0.5, rtol: float = 1e-6, atol: float = 1e-6,
                 max_steps: int = 10_000, seed: int = 0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.rtol = rtol
        self.atol = atol
        self.max_steps = max_steps
        self.seed = seed

    def _solver_config(self) -> OdeSolverConfig:
        return OdeSolverConfig(rtol=self.rtol, atol=self.atol, max_steps=self.max_steps)

    def fit(self, soh_trajectory, y=None):
        traj = as_float_array(soh_trajectory, "soh_trajectory", ndim=1)
        if traj.shape[0] < 2 * INPUT_LEN:
            raise ValidationError(
                f"reference trajectory needs >= {2 * INPUT_LEN} cycles, got {traj.shape[0]}")
        self.lifespan_ = int(traj.shape[0])
        self.x_in_ = traj[:INPUT_LEN].copy()
        self.u_bar_ = mean_input(self.x_in_)
        times = np.arange(1, self.lifespan_ + 1) / self.lifespan_
        rng = np.random.default_rng(self.seed)
        net = LnnNetwork("static", rng)
        net.b_out.data[:] = traj.mean()
        net.mean_input_proxy = self.u_bar_
        self.loss_history_ = _fit_network(
            net, self.x_in_[None, :], times, traj[None, :], self.epochs,
            self.learning_rate, self.gamma, self._solver_config(), None, rng)
        self.network_ = net
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("StaticLnnRegressor is not fitted")

    def predict(self, cycles=None, x_in=None) -> np.ndarray:
        """Decoded SoH at the given cycle indices (default: full lifespan)."""
        self._check_fitted()
        if cycles is None:
            cycles = np.arange(1, self.lifespan_ + 1)
        cycles = as_float_array(cycles, "cycles", ndim=1)
        x = self.x_in_ if x_in is None else as_float_array(x_in, "x_in", ndim=1,
                                                           length=INPUT_LEN)
        with ad.no_grad():
            pred = self.network_.trajectory(x, cycles / self.lifespan_,
                                            self._solver_config())
        return pred.data.copy()

    def adapt(self, observed, config: AdaptationConfig | None = None) -> "StaticLnnRegressor":
        """Online refinement on an observed prefix; returns a new regressor.

        Plain gradient steps theta <- theta - eta * grad(L_total) on the
        prefix loss, keeping the best parameters seen (including the
        starting point), so the post-adaptation prefix loss never exceeds
        the pre-adaptation one.
        """
        self._check_fitted()
        config = config or AdaptationConfig()
        observed = as_float_array(observed, "observed", ndim=1)
        if observed.shape[0] < INPUT_LEN:
            raise ValidationError(
                f"observed prefix must cover >= {INPUT_LEN} cycles, got {observed.shape[0]}")
        adapted = copy.deepcopy(self)
        adapted.x_in_ = observed[:INPUT_LEN].copy()
        adapted.u_bar_ = mean_input(adapted.x_in_)
        adapted.network_.mean_input_proxy = adapted.u_bar_
        net = adapted.network_
        times = np.arange(1, observed.shape[0] + 1) / self.lifespan_
        solver = self._solver_config()
        optimizer = ad.Sgd(net.parameters(), config.eta)

        def prefix_loss() -> ad.Tensor:
            pred = net.trajectory(adapted.x_in_, times, solver)
            return total_loss_tensor(pred, observed, config.gamma)

        best = [p.data.copy() for p in net.parameters()]
        best_loss = np.inf
        start_loss = None
        for step in range(config.max_updates + 1):
            loss = prefix_loss()
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"online adaptation diverged at update {step}; "
                    f"retry with eta={config.eta / 10:g}")
            if start_loss is None:
                start_loss = value
            if value < best_loss:
                best_loss = value
                best = [p.data.copy() for p in net.parameters()]
            if step == config.max_updates:
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        for p, data in zip(net.parameters(), best):
            p.data = data
        adapted.adaptation_loss_ = (start_loss, best_loss)
        return adapted


class DynamicLnnRegressor(BaseEstimator):
    """Sliding-window liquid network: 100 SoH values -> the next 100."""

    def __init__(self, epochs: int = 60, learning_rate: float = 3e-3,
                 batch_size: int | None = 16, gamma: float = 0.5, stride: int = 50,
                 rtol: float = 1e-6, atol: float = 1e-6, max_steps: int = 10_000,
                 seed: int = 0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.gamma = gamma
        self.stride = stride
        self.rtol = rtol
        self.atol = atol
        self.max_steps = max_steps
        self.seed = seed

    def _solver_config(self) -> OdeSolverConfig:
        return OdeSolverConfig(rtol=self.rtol, atol=self.atol, max_steps=self.max_steps)

    @staticmethod
    def window_pairs(trajectory: np.ndarray, stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """All (window, next-window) pairs available at the given stride."""
        pairs = []
        for start in range(0, trajectory.shape[0] - 2 * INPUT_LEN + 1, stride):
            pairs.append((trajectory[start:start + INPUT_LEN],
                          trajectory[start + INPUT_LEN:start + 2 * INPUT_LEN]))
        return pairs

    def fit(self, trajectories, y=None):
        trajectories = [as_float_array(t, "trajectory", ndim=1) for t in trajectories]
        if len(trajectories) < 2:
            raise ValidationError(
                f"dynamic training needs >= 2 batteries, got {len(trajectories)}")
        times = np.arange(1, INPUT_LEN + 1) / INPUT_LEN
        windows, targets = [], []
        for i, traj in enumerate(trajectories):
            if traj.shape[0] < 2 * INPUT_LEN:
                warnings.warn(
                    f"trajectory {i} has {traj.shape[0]} cycles (< {2 * INPUT_LEN}); skipped")
                continue
            for window, target in self.window_pairs(traj, self.stride):
                windows.append(window)
                targets.append(target)
        if not windows:
            raise ValidationError("no usable window pairs in the training corpus")
        windows = np.asarray(windows)
        targets = np.asarray(targets)
        rng = np.random.default_rng(self.seed)
        net = LnnNetwork("dynamic", rng)
        net.b_out.data[:] = targets.mean()
        self.loss_history_ = _fit_network(
            net, windows, times, targets, self.epochs, self.learning_rate,
            self.gamma, self._solver_config(), self.batch_size, rng)
        self.network_ = net
        self.n_pairs_ = windows.shape[0]
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("DynamicLnnRegressor is not fitted")

    def predict_window(self, window) -> np.ndarray:
        """SoH values of the next 100 cycles after the given window."""
        self._check_fitted()
        if isinstance(window, TrajectoryWindow):
            window = window.soh_values
        window = as_float_array(window, "window", ndim=1, length=INPUT_LEN)
        times = np.arange(1, INPUT_LEN + 1) / INPUT_LEN
        with ad.no_grad():
            pred = self.network_.trajectory(window, times, self._solver_config())
        return pred.data.copy()
