"""Pointwise state-of-health estimation from the dS/dV signature.

A two-layer 1D CNN (16 then 32 channels, kernel 5, pool 2) embeds the
500-point dS/dV curve into a 16-dimensional latent; the four scalar
indicators are projected through relu-dense branches into the same space;
a softmax attention over the five branches produces the fused embedding
that a small MLP maps to the SoH estimate. Scalar indicators are affinely
standardized with training-set statistics because they span orders of
magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import entropy as entropy_mod
from . import thermal
from .entropy import DsDvCurve, IndicatorSet, N_CURVE_POINTS
from .errors import NumericalError, ValidationError
from .validation import as_float_array

LATENT_DIM = 16
CONV1_CHANNELS = 16
CONV2_CHANNELS = 32
KERNEL_SIZE = 5
# 500 -> conv5 -> 496 -> pool2 -> 248 -> conv5 -> 244 -> pool2 -> 122
FLATTENED_LEN = CONV2_CHANNELS * (((N_CURVE_POINTS - KERNEL_SIZE + 1) // 2
                                   - KERNEL_SIZE + 1) // 2)

FEATURE_MODES = ("full", "dtmax")
_SCALAR_NAMES = ("area", "peak_gap", "euclid_dist", "dt_max")


@dataclass
class SohSample:
    """One training/evaluation sample: features plus the capacity-ratio label."""

    curve: DsDvCurve
    indicators: IndicatorSet
    label: float

    def __post_init__(self):
        if not np.isfinite(self.label) or not 0.0 < self.label <= 1.2:
            raise ValidationError(f"label must lie in (0, 1.2], got {self.label}")


class SohNetwork:
    """Raw parameterized network; all weights live on the autodiff tape."""

    def __init__(self, feature_mode: str = "full", hidden_width: int = 32,
                 rng: np.random.Generator | None = None):
        if feature_mode not in FEATURE_MODES:
            raise ValidationError(f"feature_mode must be one of {FEATURE_MODES}")
        self.feature_mode = feature_mode
        self.hidden_width = hidden_width
        rng = rng if rng is not None else np.random.default_rng(0)

        def uniform(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return ad.Parameter(rng.uniform(-bound, bound, size=shape), name)

        def zeros(shape, name):
            return ad.Parameter(np.zeros(shape), name)

        self.scalar_names = _SCALAR_NAMES if feature_mode == "full" else ("dt_max",)
        if feature_mode == "full":
            self.conv1_w = uniform((CONV1_CHANNELS, 1, KERNEL_SIZE), KERNEL_SIZE, "conv1_w")
            self.conv1_b = zeros(CONV1_CHANNELS, "conv1_b")
            self.conv2_w = uniform((CONV2_CHANNELS, CONV1_CHANNELS, KERNEL_SIZE),
                                   CONV1_CHANNELS * KERNEL_SIZE, "conv2_w")
            self.conv2_b = zeros(CONV2_CHANNELS, "conv2_b")
            self.flat_w = uniform((LATENT_DIM, FLATTENED_LEN), FLATTENED_LEN, "flat_w")
            self.flat_b = zeros(LATENT_DIM, "flat_b")
        self.scalar_w = [uniform(LATENT_DIM, 1, f"scalar_w_{n}") for n in self.scalar_names]
        self.scalar_b = [zeros(LATENT_DIM, f"scalar_b_{n}") for n in self.scalar_names]
        self.n_branches = 1 + len(self.scalar_names) if feature_mode == "full" else 1
        self.att_w = uniform((self.n_branches, self.n_branches * LATENT_DIM),
                             self.n_branches * LATENT_DIM, "att_w")
        self.att_b = zeros(self.n_branches, "att_b")
        self.mlp1_w = uniform((hidden_width, LATENT_DIM), LATENT_DIM, "mlp1_w")
        self.mlp1_b = zeros(hidden_width, "mlp1_b")
        self.mlp2_w = uniform((1, hidden_width), hidden_width, "mlp2_w")
        self.mlp2_b = zeros(1, "mlp2_b")

    def parameters(self) -> list[ad.Parameter]:
        params = []
        if self.feature_mode == "full":
            params += [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                       self.flat_w, self.flat_b]
        params += self.scalar_w + self.scalar_b
        params += [self.att_w, self.att_b, self.mlp1_w, self.mlp1_b,
                   self.mlp2_w, self.mlp2_b]
        return params

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def embed(self, curve_values) -> ad.Tensor:
        """CNN embedding of the 500-point curve into the 16-dim latent."""
        values = as_float_array(curve_values, "curve", ndim=1, length=N_CURVE_POINTS)
        x = ad.constant(values.reshape(1, -1))
        h = ad.maxpool1d(ad.relu(ad.conv1d(x, self.conv1_w, self.conv1_b)))
        h = ad.maxpool1d(ad.relu(ad.conv1d(h, self.conv2_w, self.conv2_b)))
        return ad.dense(ad.reshape(h, (FLATTENED_LEN,)), self.flat_w, self.flat_b)

    def fuse(self, latent: ad.Tensor | None, scalars) -> tuple[ad.Tensor, ad.Tensor]:
        """Attention fusion of the branch embeddings; returns (soh, weights)."""
        branches = [] if latent is None else [latent]
        for w, b, s in zip(self.scalar_w, self.scalar_b, scalars):
            branches.append(ad.relu(ad.add(ad.mul(w, float(s)), b)))
        if len(branches) != self.n_branches:
            raise ValidationError(
                f"expected {self.n_branches} branches, got {len(branches)}")
        z = ad.concat(branches)
        weights = ad.softmax(ad.dense(z, self.att_w, self.att_b))
        fused = ad.matmul(weights, ad.stack(branches))
        hidden = ad.relu(ad.dense(fused, self.mlp1_w, self.mlp1_b))
        out = ad.dense(hidden, self.mlp2_w, self.mlp2_b)
        return out, weights

    def forward(self, curve_values, scalars) -> tuple[ad.Tensor, ad.Tensor]:
        latent = self.embed(curve_values) if self.feature_mode == "full" else None
        return self.fuse(latent, scalars)


class SohEstimator(BaseEstimator, RegressorMixin):
    """Supervised SoH regressor over (curve, indicators) samples.

    feature_mode "full" fuses the CNN curve embedding with the four scalar
    indicators; "dtmax" is the temperature-increment-only ablation variant.
    """

    def __init__(self, feature_mode: str = "full", hidden_width: int = 32,
                 epochs: int = 200, batch_size: int | None = 32,
                 learning_rate: float = 1e-3, seed: int = 0):
        self.feature_mode = feature_mode
        self.hidden_width = hidden_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _scalars(self, indicators: IndicatorSet) -> np.ndarray:
        raw = indicators.as_array()
        if self.feature_mode == "dtmax":
            raw = raw[3:4]
        return (raw - self.scaler_mean_) / self.scaler_std_

    def fit(self, X, y=None):
        samples = list(X)
        if len(samples) < 2:
            raise ValidationError(f"need at least 2 samples, got {len(samples)}")
        labels = np.array([s.label for s in samples]) if y is None \
            else as_float_array(y, "y", ndim=1, length=len(samples))
        raw = np.array([s.indicators.as_array() for s in samples])
        if self.feature_mode == "dtmax":
            raw = raw[:, 3:4]
        self.scaler_mean_ = raw.mean(axis=0)
        std = raw.std(axis=0)
        self.scaler_std_ = np.where(std < 1e-12, 1.0, std)

        rng = np.random.default_rng(self.seed)
        net = SohNetwork(self.feature_mode, self.hidden_width, rng)
        net.mlp2_b.data[:] = labels.mean()
        optimizer = ad.Adam(net.parameters(), self.learning_rate)
        scalars = [self._scalars(s.indicators) for s in samples]
        curves = [s.curve.values for s in samples]

        n = len(samples)
        batch = n if self.batch_size is None else min(self.batch_size, n)
        history = []
        for epoch in range(self.epochs):
            order = rng.permutation(n) if batch < n else np.arange(n)
            epoch_losses = []
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                losses = []
                for i in idx:
                    out, _ = net.forward(curves[i], scalars[i])
                    diff = ad.sub(out, labels[i])
                    losses.append(ad.mul(diff, diff))
                loss = ad.tmean(ad.concat(losses))
                if not np.isfinite(loss.data):
                    raise NumericalError(f"SoH training diverged at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.data))
            history.append(float(np.mean(epoch_losses)))
        self.network_ = net
        self.loss_history_raw_ = np.array(history)
        self.loss_history_ = np.minimum.accumulate(self.loss_history_raw_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("SohEstimator is not fitted")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        out = np.empty(len(X))
        with ad.no_grad():
            for i, sample in enumerate(X):
                pred, _ = self.network_.forward(sample.curve.values,
                                                self._scalars(sample.indicators))
                out[i] = pred.data[0]
        return out

    def predict_with_attention(self, sample: SohSample) -> tuple[float, np.ndarray]:
        self._check_fitted()
        with ad.no_grad():
            pred, weights = self.network_.forward(sample.curve.values,
                                                  self._scalars(sample.indicators))
        return float(pred.data[0]), weights.data.copy()


def estimate_cycle_soh(model: SohEstimator, battery, cycle_index: int,
                       reference: DsDvCurve, params: thermal.ThermalParams | None = None,
                       eta_star: float = 0.01) -> float:
    """Chain thermal calibration, entropy features, and the regressor for one cycle."""
    params = params or thermal.ThermalParams()
    for i in range(1, cycle_index + 1):
        params, _ = thermal.calibrate_cycle(params, battery.cycle(i).telemetry, eta_star)
    telemetry = battery.cycle(cycle_index).telemetry
    curve = entropy_mod.cycle_curve(telemetry, params)
    indicators = entropy_mod.curve_indicators(curve, reference, telemetry)
    sample = SohSample(curve, indicators, label=1.0)
    return float(model.predict([sample])[0])
