"""Single-file JSON run configuration with a digest for provenance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .thermal import ThermalParams
from .validation import require_positive


@dataclass
class PipelineConfig:
    """Every tunable of a run; serializes to/from one JSON file.

    The sha256 digest of the canonical JSON is recorded into every model
    archive so results can be traced back to the exact configuration.
    """

    thermal: ThermalParams = field(default_factory=ThermalParams)
    # feature extraction
    reference_cycle: int = 1
    eta_star: float = 0.01
    calibration_passes: int = 1
    # ODE solver
    rtol: float = 1e-6
    atol: float = 1e-6
    max_steps: int = 10_000
    # SoH estimator training
    soh_epochs: int = 200
    soh_batch_size: int = 32
    soh_learning_rate: float = 1e-3
    soh_hidden_width: int = 32
    soh_cycle_stride: int = 10
    # static liquid network
    static_epochs: int = 2500
    static_learning_rate: float = 1e-3
    # dynamic liquid network
    dynamic_epochs: int = 150
    dynamic_learning_rate: float = 3e-3
    dynamic_batch_size: int = 16
    window_stride: int = 50
    # losses and online adaptation
    gamma: float = 0.5
    online_eta: float = 1e-4
    max_updates: int = 50
    # deployment thresholds
    switch_threshold: float = 0.98
    eol_threshold: float = 0.80
    max_horizon: int = 4000
    seed: int = 0

    def __post_init__(self):
        require_positive(self.switch_threshold, "switch_threshold")
        require_positive(self.eol_threshold, "eol_threshold")
        require_positive(self.max_horizon, "max_horizon")
        require_positive(self.rtol, "rtol")
        require_positive(self.atol, "atol")

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "thermal" in kwargs:
            thermal_keys = {f.name for f in dataclasses.fields(ThermalParams)}
            bad = set(kwargs["thermal"]) - thermal_keys
            if bad:
                raise ValidationError(f"unknown thermal keys: {sorted(bad)}")
            kwargs["thermal"] = ThermalParams(**kwargs["thermal"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            return cls.from_json_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True))

    def digest(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()
