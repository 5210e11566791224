"""Dataset ingestion, synthetic battery generation, and archive primitives.

The on-disk interchange layout is a JSON manifest naming per-battery cycle
CSVs plus a capacity CSV. The synthetic generator stands in for lab data at
desk scale: capacity fade follows an early linear slope with a power-law
knee pinned to end exactly at 80% of nominal, while telemetry is produced
by the lumped thermal simulator under a fixed discharge current, a
documented monotone pseudo-OCV curve, and seeded Gaussian measurement
noise.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import thermal
from .errors import (ArchiveCorruptError, ArchiveShapeError, ArchiveVersionError,
                     ValidationError)
from .thermal import CycleTelemetry, ThermalParams
from .validation import as_float_array, require_positive

CYCLE_CSV_HEADER = "time_s,current_a,voltage_v,surface_temp_c,ambient_temp_c"
CAPACITY_CSV_HEADER = "cycle,discharge_capacity_ah"
ARCHIVE_FORMAT_VERSION = 1

# Pseudo open-circuit voltage of an LFP-like cell: plateau around 3.3 V with
# a steep tail, piecewise linear in state of charge (ascending).
PSEUDO_OCV_SOC = np.array([0.00, 0.02, 0.05, 0.10, 0.20, 0.50, 0.90, 0.97, 1.00])
PSEUDO_OCV_VOLTS = np.array([2.50, 2.90, 3.05, 3.18, 3.22, 3.28, 3.33, 3.35, 3.45])

_SOH_MAX = 1.2
_EOL_SOH = 0.80


@dataclass
class Cycle:
    telemetry: CycleTelemetry
    discharge_capacity: float


@dataclass
class BatteryRecord:
    """One battery's cycles; list position i holds cycle index i+1."""

    id: str
    nominal_capacity: float
    cycles: list[Cycle]

    def __post_init__(self):
        require_positive(self.nominal_capacity, "nominal_capacity")
        if not self.cycles:
            raise ValidationError(f"battery {self.id} has no cycles")
        soh = self.soh
        if np.any(soh <= 0) or np.any(soh > _SOH_MAX):
            bad = int(np.argmax((soh <= 0) | (soh > _SOH_MAX)))
            raise ValidationError(
                f"battery {self.id}: SoH {soh[bad]:.4g} at cycle {bad + 1} outside (0, {_SOH_MAX}]")

    @property
    def soh(self) -> np.ndarray:
        return np.array([c.discharge_capacity for c in self.cycles]) / self.nominal_capacity

    def cycle(self, index: int) -> Cycle:
        if not 1 <= index <= len(self.cycles):
            raise ValidationError(
                f"battery {self.id}: cycle {index} out of range 1..{len(self.cycles)}")
        return self.cycles[index - 1]


@dataclass
class SyntheticConfig:
    """Knobs of the synthetic degradation family."""

    lifespan: int = 1000
    knee_fraction: float = 0.7
    early_slope: float = 2e-5       # SoH lost per cycle before the knee
    knee_power: float = 2.0
    noise_sigma_t: float = 0.0      # K, surface-temperature measurement noise
    noise_sigma_soh: float = 0.0    # fraction, capacity label noise
    seed: int = 0
    battery_id: str = "synth"
    nominal_capacity_ah: float = 1.1
    discharge_current_a: float = 2.2
    sample_dt_s: float = 15.0
    thermal_params: ThermalParams = field(default_factory=ThermalParams)

    def __post_init__(self):
        if self.lifespan < 200:
            raise ValidationError(f"lifespan must be >= 200, got {self.lifespan}")
        if not 0.3 < self.knee_fraction < 0.95:
            raise ValidationError(
                f"knee_fraction must lie in (0.3, 0.95), got {self.knee_fraction}")
        if self.knee_power < 1:
            raise ValidationError(f"knee_power must be >= 1, got {self.knee_power}")
        require_positive(self.early_slope, "early_slope")


def synthetic_soh_profile(config: SyntheticConfig) -> np.ndarray:
    """Noise-free SoH labels for cycles 1..lifespan, ending exactly at 0.80."""
    n = np.arange(1, config.lifespan + 1, dtype=np.float64)
    life = float(config.lifespan)
    knee = config.knee_fraction * life
    span = 1.0 - config.early_slope * life - _EOL_SOH
    if span < 0:
        raise ValidationError(
            "infeasible knee coefficient: early_slope consumes more than the "
            f"fade budget ({config.early_slope:.3g} * {config.lifespan} > {1.0 - _EOL_SOH})")
    c = span / (life - knee) ** config.knee_power
    knee_term = np.maximum(0.0, n - knee) ** config.knee_power
    # Written to be exactly 0.80 at n == lifespan regardless of rounding.
    return (_EOL_SOH + config.early_slope * (life - n)
            + c * ((life - knee) ** config.knee_power - knee_term))


def synthesize_battery(config: SyntheticConfig) -> BatteryRecord:
    """Generate one battery record with seeded measurement noise.

    The per-cycle heat coefficient drifts upward with degradation
    (k = 1 + 0.25 * (1 - SoH)), which is what the online calibration is
    expected to track.
    """
    rng = np.random.default_rng(config.seed)
    soh = synthetic_soh_profile(config)
    params = config.thermal_params
    ambient = params.ambient_temp
    current = config.discharge_current_a
    cycles = []
    for i, soh_n in enumerate(soh):
        capacity = soh_n * config.nominal_capacity_ah
        duration = 0.995 * capacity * 3600.0 / current
        n_samples = max(24, int(duration / config.sample_dt_s) + 1)
        time = np.linspace(0.0, duration, n_samples)
        amps = np.full(n_samples, current)
        k_true = 1.0 + 0.25 * (1.0 - soh_n)
        cycle_params = replace(params, heat_coeff_k=k_true)
        t_clean = thermal.simulate_lumped(cycle_params, time, amps, t0=ambient)
        surface = t_clean + config.noise_sigma_t * rng.standard_normal(n_samples)
        soc = 1.0 - current * time / (3600.0 * capacity)
        sag = current * 0.02 * (1.0 + 0.5 * (1.0 - soh_n))
        voltage = np.interp(soc, PSEUDO_OCV_SOC, PSEUDO_OCV_VOLTS) - sag
        telemetry = CycleTelemetry(time, amps, voltage,
                                   surface, np.full(n_samples, ambient))
        label = soh_n + config.noise_sigma_soh * rng.standard_normal()
        label = min(max(label, 1e-3), _SOH_MAX)
        cycles.append(Cycle(telemetry, label * config.nominal_capacity_ah))
    return BatteryRecord(config.battery_id, config.nominal_capacity_ah, cycles)


def resample_uniform(x, y, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation of (x, y) onto n uniform points spanning x."""
    x = as_float_array(x, "x", ndim=1)
    y = as_float_array(y, "y", ndim=1, length=x.shape[0])
    if x.shape[0] < 2:
        raise ValidationError("resample_uniform needs at least 2 samples")
    if n < 2:
        raise ValidationError(f"n must be >= 2, got {n}")
    diffs = np.diff(x)
    if np.all(diffs > 0):
        x_asc, y_asc = x, y
    elif np.all(diffs < 0):
        x_asc, y_asc = x[::-1], y[::-1]
    else:
        raise ValidationError("x must be strictly monotone")
    grid = np.linspace(x_asc[0], x_asc[-1], n)
    return grid, np.interp(grid, x_asc, y_asc)


# -- CSV + manifest layout ---------------------------------------------------

def _read_csv(path: Path, header: str) -> np.ndarray:
    if not path.is_file():
        raise ValidationError(f"missing data file: {path}")
    with path.open() as fh:
        first = fh.readline().strip()
        if first != header:
            raise ValidationError(
                f"{path}: expected header '{header}', got '{first}'")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"{path}: unparseable row ({exc})") from exc
    if data.shape[1] != len(header.split(",")):
        raise ValidationError(
            f"{path}: expected {len(header.split(','))} columns, got {data.shape[1]}")
    return data


def _load_cycle_csv(path: Path) -> CycleTelemetry:
    data = _read_csv(path, CYCLE_CSV_HEADER)
    time = data[:, 0]
    bad = np.nonzero(np.diff(time) <= 0)[0]
    if bad.size:
        raise ValidationError(
            f"{path}: time not strictly increasing at row {int(bad[0]) + 3}")
    surface = data[:, 3].copy()
    # Initial-temperature offset normalization: sensors start at ambient.
    surface -= surface[0] - data[0, 4]
    try:
        return CycleTelemetry(time, data[:, 1], data[:, 2], surface, data[:, 4])
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def load_dataset(manifest_path) -> list[BatteryRecord]:
    """Read a manifest and its per-cycle/capacity CSVs into records."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ValidationError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if "batteries" not in manifest:
        raise ValidationError(f"{manifest_path}: missing 'batteries' key")
    root = manifest_path.parent
    records = []
    for entry in manifest["batteries"]:
        for key in ("id", "nominal_capacity_ah", "cycle_files", "capacity_file"):
            if key not in entry:
                raise ValidationError(f"{manifest_path}: battery entry missing '{key}'")
        cap = _read_csv(root / entry["capacity_file"], CAPACITY_CSV_HEADER)
        n_cycles = len(entry["cycle_files"])
        if cap.shape[0] != n_cycles or not np.array_equal(cap[:, 0], np.arange(1, n_cycles + 1)):
            raise ValidationError(
                f"{root / entry['capacity_file']}: cycle column must run 1..{n_cycles}")
        cycles = [Cycle(_load_cycle_csv(root / rel), float(cap[i, 1]))
                  for i, rel in enumerate(entry["cycle_files"])]
        records.append(BatteryRecord(entry["id"], float(entry["nominal_capacity_ah"]), cycles))
    return records


def save_dataset(records: list[BatteryRecord], out_dir) -> Path:
    """Write records into the manifest layout; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for record in records:
        bat_dir = out_dir / record.id
        bat_dir.mkdir(exist_ok=True)
        cycle_files = []
        for i, cycle in enumerate(record.cycles, start=1):
            rel = f"{record.id}/cycle_{i:05d}.csv"
            tele = cycle.telemetry
            table = np.column_stack([tele.time, tele.current, tele.voltage,
                                     tele.surface_temp, tele.ambient_temp])
            np.savetxt(out_dir / rel, table, delimiter=",", fmt="%.17g",
                       header=CYCLE_CSV_HEADER, comments="")
            cycle_files.append(rel)
        cap_rel = f"{record.id}/capacity.csv"
        caps = np.column_stack([np.arange(1, len(record.cycles) + 1),
                                [c.discharge_capacity for c in record.cycles]])
        np.savetxt(out_dir / cap_rel, caps, delimiter=",", fmt=["%d", "%.17g"],
                   header=CAPACITY_CSV_HEADER, comments="")
        entries.append({"id": record.id,
                        "nominal_capacity_ah": record.nominal_capacity,
                        "cycle_files": cycle_files,
                        "capacity_file": cap_rel})
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"batteries": entries}, indent=1, sort_keys=True))
    return manifest_path


# -- versioned model archives --------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape),
            "data_b64": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")}


def _decode_array(entry: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data_b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveCorruptError(f"parameter '{name}' is undecodable: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ArchiveCorruptError(
            f"parameter '{name}': {len(raw)} payload bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_archive(path, model_kind: str, params: dict[str, np.ndarray],
                  metadata: dict) -> None:
    """Atomically write a versioned archive (write temp, then rename)."""
    path = Path(path)
    payload = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "model_kind": model_kind,
        "params": {name: _encode_array(arr) for name, arr in params.items()},
        "metadata": metadata,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    os.replace(tmp, path)


def read_archive(path, expected_kind: str | None = None):
    """Read an archive; returns (model_kind, params, metadata)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"archive not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveCorruptError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ArchiveCorruptError(f"{path}: missing format_version")
    if payload["format_version"] != ARCHIVE_FORMAT_VERSION:
        raise ArchiveVersionError(
            f"{path}: format_version {payload['format_version']} unsupported "
            f"(expected {ARCHIVE_FORMAT_VERSION})")
    kind = payload.get("model_kind")
    if expected_kind is not None and kind != expected_kind:
        raise ArchiveShapeError(f"{path}: model_kind '{kind}', expected '{expected_kind}'")
    try:
        raw_params = payload["params"]
        metadata = payload["metadata"]
    except KeyError as exc:
        raise ArchiveCorruptError(f"{path}: missing section {exc}") from exc
    params = {name: _decode_array(entry, name) for name, entry in raw_params.items()}
    return kind, params, metadata


def check_shapes(params: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]],
                 context: str) -> None:
    """Validate archive parameters against a declared architecture."""
    for name, shape in expected.items():
        if name not in params:
            raise ArchiveShapeError(f"{context}: missing parameter '{name}'")
        if params[name].shape != shape:
            raise ArchiveShapeError(
                f"{context}: parameter '{name}' has shape {params[name].shape}, "
                f"expected {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ArchiveShapeError(f"{context}: unexpected parameters {sorted(extra)}")
