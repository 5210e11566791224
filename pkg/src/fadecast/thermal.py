"""Lumped and spatial battery temperature models with online calibration.

The lumped model is the zero-dimensional heat balance

    C_p * m * dT/dt = k * Q(t),        Q(t) = I(t)^2 * R_int,

with convection neglected. Because T is affine in the heat coefficient k,
its sensitivity dT/dk is the running integral of Q/(C_p m) and the online
calibration reduces to the streaming rule k <- k - eta_star * (T_sim - T_meas),
clamped to a sane range. The spatial model distributes the lumped result over
a fixed 8x8 radial-axial grid via an explicit conduction step with uniform
volumetric heating and boundary exchange to ambient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ValidationError
from .validation import as_float_array, require_finite, require_increasing, require_positive

# Clamp range for the calibrated heat coefficient; prevents sign flips and
# runaway under noisy temperature residuals.
K_MIN = 0.1
K_MAX = 10.0

FIELD_SHAPE = (8, 8)

# Default 18650 geometry: 18 mm diameter / 65 mm height over 8 nodes each.
DEFAULT_RADIAL_SPACING = 2.25e-3
DEFAULT_AXIAL_SPACING = 8.1e-3

# Effective in-cell thermal diffusivity (m^2/s) and the depth assigned to a
# boundary face when converting surface conductance into a per-node loss.
DEFAULT_DIFFUSIVITY = 4e-7
FACE_DEPTH = 0.018

_MAX_FOURIER = 0.25


@dataclass(frozen=True)
class ThermalParams:
    """Lumped-model parameters; frozen so calibration returns new instances."""

    specific_heat: float = 1000.0   # J/(kg K)
    mass: float = 0.045             # kg
    heat_coeff_k: float = 1.0       # dimensionless calibration coefficient
    internal_resistance: float = 0.05  # ohm
    ambient_temp: float = 25.0      # degC
    surface_conductance: float = 10.0  # W/(m^2 K), field model only

    def __post_init__(self):
        require_positive(self.specific_heat, "specific_heat")
        require_positive(self.mass, "mass")
        require_positive(self.heat_coeff_k, "heat_coeff_k")
        if self.internal_resistance < 0:
            raise ValidationError(f"internal_resistance must be >= 0, got {self.internal_resistance}")
        if self.surface_conductance < 0:
            raise ValidationError(f"surface_conductance must be >= 0, got {self.surface_conductance}")

    @property
    def heat_capacity(self) -> float:
        return self.specific_heat * self.mass


@dataclass
class CycleTelemetry:
    """One cycle's synchronized telemetry series."""

    time: np.ndarray          # s, strictly increasing
    current: np.ndarray       # A
    voltage: np.ndarray       # V
    surface_temp: np.ndarray  # degC
    ambient_temp: np.ndarray  # degC

    def __post_init__(self):
        self.time = as_float_array(self.time, "time", ndim=1)
        n = self.time.shape[0]
        if n < 2:
            raise ValidationError(f"telemetry needs at least 2 samples, got {n}")
        for name in ("current", "voltage", "surface_temp", "ambient_temp"):
            arr = as_float_array(getattr(self, name), name, ndim=1)
            if arr.shape[0] != n:
                raise ValidationError(f"{name} length {arr.shape[0]} != time length {n}")
            require_finite(arr, name)
            setattr(self, name, arr)
        require_finite(self.time, "time")
        require_increasing(self.time, "time")

    def __len__(self) -> int:
        return self.time.shape[0]


@dataclass
class TemperatureField:
    """8x8 grid of node temperatures at one instant. Rows run along the
    cell axis, columns along the radius."""

    nodes: np.ndarray
    radial_spacing: float = DEFAULT_RADIAL_SPACING
    axial_spacing: float = DEFAULT_AXIAL_SPACING
    timestamp: float = 0.0

    def __post_init__(self):
        self.nodes = as_float_array(self.nodes, "nodes", ndim=2)
        if self.nodes.shape != FIELD_SHAPE:
            raise ValidationError(f"field grid must be {FIELD_SHAPE}, got {self.nodes.shape}")
        require_finite(self.nodes, "nodes")
        require_positive(self.radial_spacing, "radial_spacing")
        require_positive(self.axial_spacing, "axial_spacing")


def _heat_rate(params: ThermalParams, current: np.ndarray) -> np.ndarray:
    """Volumetric heat source Q(t) = I^2 R_int in W (before the k factor)."""
    return current ** 2 * params.internal_resistance


def simulate_lumped(params: ThermalParams, time, current, t0: float) -> np.ndarray:
    """Integrate the lumped model over arbitrary timestamps (trapezoidal)."""
    time = require_increasing(require_finite(as_float_array(time, "time", ndim=1), "time"), "time")
    current = require_finite(as_float_array(current, "current", ndim=1), "current")
    if current.shape != time.shape:
        raise ValidationError(f"current length {current.shape[0]} != time length {time.shape[0]}")
    rate = params.heat_coeff_k * _heat_rate(params, current) / params.heat_capacity
    return t0 + cumulative_trapezoid(rate, time, initial=0.0)


def simulate_lumped_temperature(params: ThermalParams, current, dt: float, t0: float) -> np.ndarray:
    """Lumped simulation on a uniform grid with spacing dt, starting at t0."""
    require_positive(dt, "dt")
    current = require_finite(as_float_array(current, "current", ndim=1), "current")
    time = np.arange(current.shape[0]) * dt
    return simulate_lumped(params, time, current, t0)


def temperature_sensitivity_dk(params: ThermalParams, current, dt: float) -> np.ndarray:
    """dT/dk at each sample: the running integral of Q/(C_p m).

    Independent of the current value of heat_coeff_k.
    """
    require_positive(dt, "dt")
    current = require_finite(as_float_array(current, "current", ndim=1), "current")
    time = np.arange(current.shape[0]) * dt
    rate = _heat_rate(params, current) / params.heat_capacity
    return cumulative_trapezoid(rate, time, initial=0.0)


def adapt_heat_coefficient(k: float, delta_t: float, eta_star: float) -> float:
    """One streaming update k <- k - eta_star * delta_t, clamped to [K_MIN, K_MAX]."""
    require_positive(eta_star, "eta_star")
    return float(min(K_MAX, max(K_MIN, k - eta_star * delta_t)))


def calibrate_cycle(params: ThermalParams, telemetry: CycleTelemetry,
                    eta_star: float = 0.01) -> tuple[ThermalParams, float]:
    """Stream one cycle through the simulator, updating k at every sample.

    The cycle is assumed to start thermally relaxed, so the simulation is
    anchored at the cycle's ambient temperature (dataset loading normalizes
    initial sensor offsets to match). Because T is affine in k
    (T_sim = T0 + k * dT/dk), the simulated temperature is re-evaluated at
    the live k estimate for every sample in O(1); each residual
    delta_T = T_sim - T_meas feeds one update. Returns the updated
    parameters and the mean absolute temperature error of a re-simulation
    with the final k.
    """
    require_positive(eta_star, "eta_star")
    rate = _heat_rate(params, telemetry.current) / params.heat_capacity
    sensitivity = cumulative_trapezoid(rate, telemetry.time, initial=0.0)
    t0 = telemetry.ambient_temp[0]
    k = params.heat_coeff_k
    for i in range(1, len(telemetry)):
        delta = t0 + k * sensitivity[i] - telemetry.surface_temp[i]
        k = adapt_heat_coefficient(k, delta, eta_star)
    calibrated = replace(params, heat_coeff_k=k)
    resim = simulate_lumped(calibrated, telemetry.time, telemetry.current, t0=t0)
    mae = float(np.mean(np.abs(resim - telemetry.surface_temp)))
    return calibrated, mae


def max_stable_step(params: ThermalParams, field: TemperatureField,
                    diffusivity: float = DEFAULT_DIFFUSIVITY) -> float:
    """Largest dt keeping the explicit conduction step within the Fourier bound."""
    geom = 1.0 / field.radial_spacing ** 2 + 1.0 / field.axial_spacing ** 2
    return _MAX_FOURIER / (diffusivity * geom)


def reconstruct_field(params: ThermalParams, lumped_t: float | None, heating_power: float,
                      prior: TemperatureField, dt: float = 1.0,
                      diffusivity: float = DEFAULT_DIFFUSIVITY) -> TemperatureField:
    """One explicit conduction step on the 8x8 grid.

    Uniform volumetric heating deposits heating_power*dt/(C_p m) in every
    node; interior conduction uses a conservative flux form; nodes on the
    grid boundary exchange heat with ambient through surface_conductance
    (one face per missing neighbor). When ``lumped_t`` is given, a uniform
    shift anchors the grid mean to it, so the lumped trajectory stays the
    authority on the mean while the grid supplies the spatial pattern.
    """
    require_positive(dt, "dt")
    require_positive(diffusivity, "diffusivity")
    dr, dz = prior.radial_spacing, prior.axial_spacing
    fourier = diffusivity * dt * (1.0 / dr ** 2 + 1.0 / dz ** 2)
    if fourier > _MAX_FOURIER:
        raise ValidationError(
            f"explicit step unstable: Fourier number {fourier:.4g} > {_MAX_FOURIER}; "
            f"maximum stable dt = {max_stable_step(params, prior, diffusivity):.6g} s")

    t = prior.nodes
    fo_r = diffusivity * dt / dr ** 2
    fo_z = diffusivity * dt / dz ** 2
    new = t.copy()
    # Conservative flux form: each internal face moves heat symmetrically.
    flux_r = fo_r * (t[:, 1:] - t[:, :-1])
    new[:, :-1] += flux_r
    new[:, 1:] -= flux_r
    flux_z = fo_z * (t[1:, :] - t[:-1, :])
    new[:-1, :] += flux_z
    new[1:, :] -= flux_z

    # Boundary exchange: one face of area (perpendicular spacing x depth)
    # per missing neighbor, lumped node heat capacity C_p m / 64.
    c_node = params.heat_capacity / t.size
    lam_r = params.surface_conductance * dz * FACE_DEPTH * dt / c_node
    lam_z = params.surface_conductance * dr * FACE_DEPTH * dt / c_node
    new[:, 0] -= lam_r * (t[:, 0] - params.ambient_temp)
    new[:, -1] -= lam_r * (t[:, -1] - params.ambient_temp)
    new[0, :] -= lam_z * (t[0, :] - params.ambient_temp)
    new[-1, :] -= lam_z * (t[-1, :] - params.ambient_temp)

    new += heating_power * dt / params.heat_capacity
    if lumped_t is not None:
        new += lumped_t - new.mean()
    return TemperatureField(new, dr, dz, prior.timestamp + dt)


def simulate_field_series(params: ThermalParams, telemetry: CycleTelemetry,
                          radial_spacing: float = DEFAULT_RADIAL_SPACING,
                          axial_spacing: float = DEFAULT_AXIAL_SPACING,
                          diffusivity: float = DEFAULT_DIFFUSIVITY) -> list[TemperatureField]:
    """Evolve the 8x8 field along one cycle's telemetry.

    The field starts uniform at the cycle's ambient temperature, is
    sub-stepped within each telemetry interval to respect the stability
    bound, and is anchored to the lumped simulation at every telemetry
    instant.
    """
    t0 = telemetry.ambient_temp[0]
    lumped = simulate_lumped(params, telemetry.time, telemetry.current, t0=t0)
    heating = params.heat_coeff_k * _heat_rate(params, telemetry.current)
    field = TemperatureField(np.full(FIELD_SHAPE, t0),
                             radial_spacing, axial_spacing, telemetry.time[0])
    dt_max = 0.8 * max_stable_step(params, field, diffusivity)
    fields = [field]
    for i in range(1, len(telemetry)):
        span = telemetry.time[i] - telemetry.time[i - 1]
        n_sub = max(1, int(np.ceil(span / dt_max)))
        dt_sub = span / n_sub
        power = 0.5 * (heating[i - 1] + heating[i])
        for j in range(n_sub):
            anchor = lumped[i] if j == n_sub - 1 else None
            field = reconstruct_field(params, anchor, power, field, dt_sub, diffusivity)
        fields.append(field)
    return fields
