"""Spatial entropy features of temperature fields and the dS/dV signature.

The entropy functional sums w*ln(w) over adjacent lattice edges of the
temperature grid, with w = |delta_T| * delta_s (spacing taken along the
edge) and the 0*ln(0) -> 0 convention. It depends only on temperature
differences, so it is invariant to uniform offsets, and it is not
normalized: magnitude differences across operating conditions are part of
the signal. The per-cycle signature is the derivative of entropy with
respect to terminal voltage, resampled to a fixed 500-point grid.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks
from scipy.special import xlogy
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import thermal
from .errors import ValidationError
from .thermal import CycleTelemetry, TemperatureField, ThermalParams
from .validation import as_float_array, require_finite, require_increasing

N_CURVE_POINTS = 500
_PEAK_MIN_SEPARATION = 5


@dataclass
class EntropySeries:
    """Entropy values paired with synchronized time and voltage samples."""

    times: np.ndarray
    voltages: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = as_float_array(self.times, "times", ndim=1)
        self.voltages = as_float_array(self.voltages, "voltages", ndim=1,
                                       length=self.times.shape[0])
        self.values = as_float_array(self.values, "values", ndim=1,
                                     length=self.times.shape[0])
        require_increasing(self.times, "times")
        require_finite(self.values, "entropy values")

    def entries(self):
        return zip(self.times, self.voltages, self.values)

    def __len__(self):
        return self.times.shape[0]


@dataclass
class DsDvCurve:
    """dS/dV sampled on a uniform 500-point voltage grid."""

    voltage_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.voltage_grid = as_float_array(self.voltage_grid, "voltage_grid", ndim=1,
                                           length=N_CURVE_POINTS)
        self.values = as_float_array(self.values, "values", ndim=1, length=N_CURVE_POINTS)
        diffs = np.diff(self.voltage_grid)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValidationError("voltage_grid must be strictly monotone")
        require_finite(self.values, "values")


@dataclass
class IndicatorSet:
    """Scalar physics-informed indicators derived from one cycle."""

    area_under_curve: float
    peak_gap: float
    euclid_dist_to_reference: float
    dt_max: float
    peak_gap_valid: bool = True

    def __post_init__(self):
        if self.euclid_dist_to_reference < 0:
            raise ValidationError("euclid_dist_to_reference must be >= 0")
        if self.dt_max < 0:
            raise ValidationError("dt_max must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.area_under_curve, self.peak_gap,
                         self.euclid_dist_to_reference, self.dt_max])


def grid_entropy(nodes, radial_spacing: float, axial_spacing: float) -> float:
    """Entropy of an arbitrary m x n grid (rows axial, columns radial)."""
    nodes = require_finite(as_float_array(nodes, "nodes", ndim=2), "nodes")
    w_radial = np.abs(np.diff(nodes, axis=1)) * radial_spacing
    w_axial = np.abs(np.diff(nodes, axis=0)) * axial_spacing
    return float(xlogy(w_radial, w_radial).sum() + xlogy(w_axial, w_axial).sum())


def field_entropy(field: TemperatureField) -> float:
    return grid_entropy(field.nodes, field.radial_spacing, field.axial_spacing)


def entropy_series(fields, voltage) -> EntropySeries:
    """Pair each field's entropy with the synchronized voltage sample."""
    fields = list(fields)
    voltage = as_float_array(voltage, "voltage", ndim=1)
    if len(fields) != voltage.shape[0]:
        raise ValidationError(
            f"{len(fields)} fields but {voltage.shape[0]} voltage samples")
    if not fields:
        raise ValidationError("at least one field is required")
    times = np.array([f.timestamp for f in fields])
    values = np.array([field_entropy(f) for f in fields])
    return EntropySeries(times, voltage, values)


def ds_dv(series: EntropySeries, n_points: int = N_CURVE_POINTS) -> DsDvCurve:
    """Differentiate entropy against voltage on a uniform grid.

    Voltage is made monotone by retaining its running-minimum envelope over
    the discharge, entropy is linearly interpolated onto the uniform grid,
    and the derivative uses central differences with second-order one-sided
    stencils at the endpoints.
    """
    v, s = series.voltages, series.values
    run_min = np.minimum.accumulate(v)
    keep = np.empty(v.shape[0], dtype=bool)
    keep[0] = True
    keep[1:] = v[1:] < run_min[:-1]
    v_env, s_env = v[keep], s[keep]
    if np.unique(v_env).shape[0] < 4:
        raise ValidationError(
            f"need at least 4 distinct monotone voltage samples, got {np.unique(v_env).shape[0]}")
    v_asc, s_asc = v_env[::-1], s_env[::-1]
    span = v_asc[-1] - v_asc[0]
    if span <= 0:
        raise ValidationError("voltage span must be positive after monotone extraction")
    grid = np.linspace(v_asc[0], v_asc[-1], n_points)
    s_grid = np.interp(grid, v_asc, s_asc)
    deriv = np.gradient(s_grid, grid[1] - grid[0], edge_order=2)
    return DsDvCurve(grid, deriv)


def curve_indicators(curve: DsDvCurve, reference: DsDvCurve,
                     telemetry: CycleTelemetry) -> IndicatorSet:
    """Scalar indicators: |curve| area, dominant-peak gap, distance to the
    reference curve, and the cycle's maximum temperature increment."""
    if curve.values.shape != reference.values.shape:
        raise ValidationError("curve and reference must share the 500-point convention")
    area = float(np.trapezoid(np.abs(curve.values), curve.voltage_grid))
    peaks, props = find_peaks(curve.values, distance=_PEAK_MIN_SEPARATION, prominence=0.0)
    if peaks.shape[0] >= 2:
        # Highest prominence first; equal prominence resolves toward lower voltage.
        order = np.lexsort((peaks, -props["prominences"]))
        top = peaks[order[:2]]
        peak_gap = float(abs(curve.voltage_grid[top[0]] - curve.voltage_grid[top[1]]))
        valid = True
    else:
        peak_gap = 0.0
        valid = False
    euclid = float(np.linalg.norm(curve.values - reference.values))
    dt_max = float(telemetry.surface_temp.max() - telemetry.surface_temp[0])
    return IndicatorSet(area, peak_gap, euclid, dt_max, peak_gap_valid=valid)


def cycle_curve(telemetry: CycleTelemetry, params: ThermalParams,
                radial_spacing: float = thermal.DEFAULT_RADIAL_SPACING,
                axial_spacing: float = thermal.DEFAULT_AXIAL_SPACING,
                diffusivity: float = thermal.DEFAULT_DIFFUSIVITY) -> DsDvCurve:
    """Full chain for one cycle: field evolution -> entropy series -> dS/dV."""
    fields = thermal.simulate_field_series(params, telemetry, radial_spacing,
                                           axial_spacing, diffusivity)
    series = entropy_series(fields, telemetry.voltage)
    return ds_dv(series)


def reference_curve(battery, cycle_index: int, params: ThermalParams | None = None,
                    eta_star: float = 0.01) -> DsDvCurve:
    """dS/dV curve of one cycle of the reference battery.

    Thermal calibration is threaded through all preceding cycles so the
    simulated field matches the operando deployment path. Deterministic;
    callers that need reuse should go through CycleFeatureExtractor, whose
    cache is write-once.
    """
    params = params or ThermalParams()
    cycle = battery.cycle(cycle_index)
    for i in range(1, cycle_index + 1):
        params, _ = thermal.calibrate_cycle(params, battery.cycle(i).telemetry, eta_star)
    return cycle_curve(cycle.telemetry, params)


class CycleFeatureExtractor(BaseEstimator, TransformerMixin):
    """Turns per-cycle telemetry into (dS/dV curve, indicator) features.

    fit() pins the reference battery: it computes and caches the reference
    dS/dV profile that the distance indicator compares against. transform()
    walks a battery's cycles in order, calibrating the heat coefficient on
    each cycle before extracting its features, exactly as an operando
    deployment would.
    """

    def __init__(self, params: ThermalParams | None = None, reference_cycle: int = 1,
                 eta_star: float = 0.01, calibration_passes: int = 1):
        self.params = params
        self.reference_cycle = reference_cycle
        self.eta_star = eta_star
        self.calibration_passes = calibration_passes
        self._lock = threading.Lock()

    def _base_params(self) -> ThermalParams:
        return self.params if self.params is not None else ThermalParams()

    def fit(self, battery, y=None):
        with self._lock:
            if not hasattr(self, "reference_curve_"):
                self.reference_curve_ = reference_curve(
                    battery, self.reference_cycle, self._base_params(), self.eta_star)
                self.reference_id_ = battery.id
        return self

    def _check_fitted(self):
        if not hasattr(self, "reference_curve_"):
            raise NotFittedError("CycleFeatureExtractor must be fit on a reference battery first")

    def transform(self, battery, cycles=None):
        """Features for the requested cycle indices (default: all cycles).

        Returns a list of (cycle_index, DsDvCurve, IndicatorSet) triples.
        Calibration always threads through every cycle up to the last
        requested one, regardless of which cycles are extracted.
        """
        self._check_fitted()
        wanted = set(cycles) if cycles is not None else set(range(1, len(battery.cycles) + 1))
        if not wanted:
            return []
        last = max(wanted)
        if last > len(battery.cycles):
            raise ValidationError(
                f"battery {battery.id} has {len(battery.cycles)} cycles, requested {last}")
        params = self._base_params()
        out = []
        for index in range(1, last + 1):
            cycle = battery.cycle(index)
            for _ in range(self.calibration_passes):
                params, _ = thermal.calibrate_cycle(params, cycle.telemetry, self.eta_star)
            if index in wanted:
                curve = cycle_curve(cycle.telemetry, params)
                indicators = curve_indicators(curve, self.reference_curve_, cycle.telemetry)
                out.append((index, curve, indicators))
        return out
