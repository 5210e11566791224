"""Two-stage trajectory refinement, end-of-life prediction, and metrics.

Deployment runs the stages in sequence: pointwise SoH estimates for the
first 100 cycles feed the online adaptation of the static liquid network,
whose trajectory is kept until it first drops to the switch threshold
(98% SoH by default); from there the dynamic network extends the refined
trajectory window by window until the end-of-life threshold is crossed or
the rollout horizon runs out.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .entropy import CycleFeatureExtractor
from .errors import FadecastError, ValidationError
from .lnn import INPUT_LEN, AdaptationConfig, DynamicLnnRegressor, StaticLnnRegressor
from .soh import SohEstimator, SohSample
from .validation import as_float_array, require_finite

STAGE_EARLY_STATIC = "early_static"
STAGE_LATE_DYNAMIC = "late_dynamic"


@dataclass
class RefinementState:
    """Live context of one battery's two-stage refinement."""

    stage: str
    refined_trajectory: np.ndarray
    switch_cycle: int | None
    eol_estimate: int | None
    pointwise_estimates: np.ndarray | None = None

    def __post_init__(self):
        if self.stage not in (STAGE_EARLY_STATIC, STAGE_LATE_DYNAMIC):
            raise ValidationError(f"unknown stage '{self.stage}'")
        if (self.stage == STAGE_LATE_DYNAMIC) != (self.switch_cycle is not None):
            raise ValidationError("stage is late_dynamic iff switch_cycle is set")
        self.refined_trajectory = require_finite(
            as_float_array(self.refined_trajectory, "refined_trajectory", ndim=1),
            "refined_trajectory")


@dataclass
class Metrics:
    """Trajectory-level evaluation metrics; mape is in percent."""

    mae: float
    mape: float
    eol_abs_error: float | None = None
    mape_excluded: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.mape < 0:
            raise ValidationError("metrics must be >= 0")
        if self.eol_abs_error is not None and self.eol_abs_error < 0:
            raise ValidationError("eol_abs_error must be >= 0")


@dataclass
class PipelineModels:
    """The fitted bundle a deployment needs."""

    extractor: CycleFeatureExtractor
    soh: SohEstimator
    static: StaticLnnRegressor
    dynamic: DynamicLnnRegressor


def predict_eol(trajectory, threshold: float = 0.80, first_cycle: int = 1) -> int | None:
    """First cycle at which SoH <= threshold; None if never crossed."""
    trajectory = as_float_array(trajectory, "trajectory", ndim=1)
    if trajectory.size == 0:
        raise ValidationError("trajectory must be nonempty")
    below = trajectory <= threshold
    if not below.any():
        return None
    return first_cycle + int(np.argmax(below))


def evaluate(pred, truth, pred_eol: int | None = None,
             truth_eol: int | None = None) -> Metrics:
    """MAE/MAPE over the overlapping cycle range plus the EoL error."""
    pred = as_float_array(pred, "pred", ndim=1)
    truth = as_float_array(truth, "truth", ndim=1)
    overlap = min(pred.shape[0], truth.shape[0])
    if overlap == 0:
        raise ValidationError("overlapping cycle range is empty")
    diff = np.abs(pred[:overlap] - truth[:overlap])
    mae = float(np.mean(diff))
    nonzero = truth[:overlap] != 0
    excluded = int(overlap - np.count_nonzero(nonzero))
    if not nonzero.any():
        raise ValidationError("all truth values are zero; MAPE undefined")
    mape = float(np.mean(diff[nonzero] / np.abs(truth[:overlap][nonzero])) * 100.0)
    eol_err = None
    if pred_eol is not None and truth_eol is not None:
        eol_err = float(abs(pred_eol - truth_eol))
    return Metrics(mae, mape, eol_err, excluded)


def refine_cft(battery, models: PipelineModels, config: PipelineConfig | None = None) -> RefinementState:
    """Refine one battery's capacity-fade trajectory to end of life.

    Stage one estimates pointwise SoH for cycles 1..100 and adapts the
    static network online; its trajectory is kept until the switch
    threshold. Stage two rolls the dynamic network forward from the last
    100 refined values. The first dynamic input window is exactly the
    static trajectory's tail, which keeps the refined trajectory continuous
    at the stage boundary.
    """
    config = config or PipelineConfig()
    if len(battery.cycles) < INPUT_LEN:
        raise ValidationError(
            f"battery {battery.id} has {len(battery.cycles)} cycles; "
            f"refinement needs >= {INPUT_LEN}")
    features = models.extractor.transform(battery, cycles=range(1, INPUT_LEN + 1))
    samples = [SohSample(curve, ind, label=1.0) for _, curve, ind in features]
    estimates = models.soh.predict(samples)
    adapted = models.static.adapt(estimates, AdaptationConfig(
        eta=config.online_eta, gamma=config.gamma, max_updates=config.max_updates))
    horizon = int(min(models.static.lifespan_, config.max_horizon))
    static_traj = adapted.predict(np.arange(1, horizon + 1))

    below = static_traj <= config.switch_threshold
    if not below.any():
        return RefinementState(STAGE_EARLY_STATIC, static_traj, None, None, estimates)
    switch = int(np.argmax(below)) + 1
    # The dynamic stage needs a full input window; a crossing inside the
    # first 100 cycles just delays the handoff to cycle 100.
    start = max(switch, INPUT_LEN)
    refined = list(static_traj[:start])
    while len(refined) < config.max_horizon:
        window = np.asarray(refined[-INPUT_LEN:])
        nxt = models.dynamic.predict_window(window)
        refined.extend(nxt.tolist())
        if np.any(nxt <= config.eol_threshold):
            break
    trajectory = np.asarray(refined[:config.max_horizon])
    eol = predict_eol(trajectory, config.eol_threshold)
    return RefinementState(STAGE_LATE_DYNAMIC, trajectory, switch, eol, estimates)


@dataclass
class BatteryResult:
    battery_id: str
    metrics: Metrics | None
    state: RefinementState | None
    truth_eol: int | None
    error: str | None = None


@dataclass
class CorpusAggregate:
    mean_mae: float
    max_mae: float
    mean_mape: float
    mean_eol_abs_error: float | None
    n_batteries: int
    n_failed: int


@dataclass
class CorpusReport:
    results: list[BatteryResult] = field(default_factory=list)
    aggregate: CorpusAggregate | None = None


def run_corpus(batteries, models: PipelineModels, config: PipelineConfig | None = None,
               jobs: int = 1) -> CorpusReport:
    """Refine and evaluate every battery; failures are isolated per battery.

    The report is ordered by battery id and the aggregate is the unweighted
    mean over per-battery metrics, so results are identical regardless of
    the number of worker threads.
    """
    config = config or PipelineConfig()
    batteries = list(batteries)
    if not batteries:
        raise ValidationError("corpus must contain at least one battery")

    def one(battery) -> BatteryResult:
        try:
            state = refine_cft(battery, models, config)
            truth = battery.soh
            truth_eol = predict_eol(truth, config.eol_threshold)
            metrics = evaluate(state.refined_trajectory, truth,
                               state.eol_estimate, truth_eol)
            return BatteryResult(battery.id, metrics, state, truth_eol)
        except FadecastError as exc:
            return BatteryResult(battery.id, None, None, None, error=str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, batteries))
    else:
        results = [one(b) for b in batteries]
    results.sort(key=lambda r: r.battery_id)

    ok = [r for r in results if r.metrics is not None]
    aggregate = None
    if ok:
        eol_errors = [r.metrics.eol_abs_error for r in ok
                      if r.metrics.eol_abs_error is not None]
        aggregate = CorpusAggregate(
            mean_mae=float(np.mean([r.metrics.mae for r in ok])),
            max_mae=float(np.max([r.metrics.mae for r in ok])),
            mean_mape=float(np.mean([r.metrics.mape for r in ok])),
            mean_eol_abs_error=float(np.mean(eol_errors)) if eol_errors else None,
            n_batteries=len(results),
            n_failed=len(results) - len(ok))
    return CorpusReport(results, aggregate)
