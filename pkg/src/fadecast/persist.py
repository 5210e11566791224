"""Model (de)serialization on top of the versioned archive format.

Each estimator kind maps its named parameter tensors plus the fitted state
it needs for inference into one archive; loading validates every shape
against the declared architecture before any parameter is accepted.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import dataio
from .entropy import CycleFeatureExtractor, DsDvCurve, N_CURVE_POINTS
from .errors import ArchiveShapeError, ValidationError
from .lnn import INPUT_LEN, DynamicLnnRegressor, LnnNetwork, StaticLnnRegressor
from .pipeline import PipelineModels
from .soh import SohEstimator, SohNetwork
from .thermal import ThermalParams

KIND_SOH = "soh_estimator"
KIND_STATIC = "lnn_static"
KIND_DYNAMIC = "lnn_dynamic"
KIND_FEATURES = "feature_extractor"
KIND_PIPELINE = "pipeline_bundle"


def _net_params(net) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in net.parameters()}


def _inject(net, params: dict[str, np.ndarray], context: str) -> None:
    expected = {p.name: p.data.shape for p in net.parameters()}
    dataio.check_shapes(params, expected, context)
    for p in net.parameters():
        p.data = params[p.name].copy()


def _soh_payload(model: SohEstimator):
    params = dict(_net_params(model.network_))
    n_scalars = model.scaler_mean_.shape[0]
    params["scaler_mean"] = model.scaler_mean_
    params["scaler_std"] = model.scaler_std_
    meta = {"init": model.get_params(), "n_scalars": n_scalars}
    return params, meta


def _soh_restore(params, meta) -> SohEstimator:
    model = SohEstimator(**meta["init"])
    net = SohNetwork(model.feature_mode, model.hidden_width)
    scalers = {"scaler_mean": params.pop("scaler_mean", None),
               "scaler_std": params.pop("scaler_std", None)}
    for name, arr in scalers.items():
        if arr is None:
            raise ArchiveShapeError(f"soh archive missing '{name}'")
        if arr.shape != (meta["n_scalars"],):
            raise ArchiveShapeError(f"'{name}' has shape {arr.shape}, "
                                    f"expected ({meta['n_scalars']},)")
    _inject(net, params, KIND_SOH)
    model.network_ = net
    model.scaler_mean_ = scalers["scaler_mean"]
    model.scaler_std_ = scalers["scaler_std"]
    model.loss_history_ = np.array([])
    model.loss_history_raw_ = np.array([])
    return model


def _static_payload(model: StaticLnnRegressor):
    params = dict(_net_params(model.network_))
    params["x_in"] = model.x_in_
    meta = {"init": model.get_params(), "lifespan": model.lifespan_,
            "u_bar": model.u_bar_}
    return params, meta


def _static_restore(params, meta) -> StaticLnnRegressor:
    model = StaticLnnRegressor(**meta["init"])
    net = LnnNetwork("static")
    x_in = params.pop("x_in", None)
    if x_in is None or x_in.shape != (INPUT_LEN,):
        raise ArchiveShapeError("static archive must carry a 100-value 'x_in'")
    _inject(net, params, KIND_STATIC)
    net.mean_input_proxy = float(meta["u_bar"])
    model.network_ = net
    model.x_in_ = x_in
    model.lifespan_ = int(meta["lifespan"])
    model.u_bar_ = float(meta["u_bar"])
    model.loss_history_ = np.array([])
    return model


def _dynamic_payload(model: DynamicLnnRegressor):
    return dict(_net_params(model.network_)), {"init": model.get_params()}


def _dynamic_restore(params, meta) -> DynamicLnnRegressor:
    model = DynamicLnnRegressor(**meta["init"])
    net = LnnNetwork("dynamic")
    _inject(net, params, KIND_DYNAMIC)
    model.network_ = net
    model.loss_history_ = np.array([])
    model.n_pairs_ = 0
    return model


def _features_payload(extractor: CycleFeatureExtractor):
    params = {"reference_grid": extractor.reference_curve_.voltage_grid,
              "reference_values": extractor.reference_curve_.values}
    init = extractor.get_params()
    thermal_params = init.pop("params")
    meta = {"init": init,
            "thermal": dataclasses.asdict(thermal_params) if thermal_params else None,
            "reference_id": extractor.reference_id_}
    return params, meta


def _features_restore(params, meta) -> CycleFeatureExtractor:
    for name in ("reference_grid", "reference_values"):
        if name not in params or params[name].shape != (N_CURVE_POINTS,):
            raise ArchiveShapeError(f"feature archive needs a {N_CURVE_POINTS}-point '{name}'")
    thermal_params = ThermalParams(**meta["thermal"]) if meta["thermal"] else None
    extractor = CycleFeatureExtractor(params=thermal_params, **meta["init"])
    extractor.reference_curve_ = DsDvCurve(params["reference_grid"],
                                           params["reference_values"])
    extractor.reference_id_ = meta["reference_id"]
    return extractor


_PAYLOAD = {
    SohEstimator: (KIND_SOH, _soh_payload),
    StaticLnnRegressor: (KIND_STATIC, _static_payload),
    DynamicLnnRegressor: (KIND_DYNAMIC, _dynamic_payload),
    CycleFeatureExtractor: (KIND_FEATURES, _features_payload),
}
_RESTORE = {
    KIND_SOH: _soh_restore,
    KIND_STATIC: _static_restore,
    KIND_DYNAMIC: _dynamic_restore,
    KIND_FEATURES: _features_restore,
}


def save_model(model, path, config_digest: str | None = None) -> None:
    """Write one fitted model into a versioned archive."""
    for cls, (kind, payload) in _PAYLOAD.items():
        if isinstance(model, cls):
            params, meta = payload(model)
            if config_digest is not None:
                meta["config_digest"] = config_digest
            dataio.write_archive(path, kind, params, meta)
            return
    raise ValidationError(f"cannot archive object of type {type(model).__name__}")


def load_model(path):
    """Load whatever model kind the archive declares."""
    kind, params, meta = dataio.read_archive(path)
    if kind not in _RESTORE:
        raise ArchiveShapeError(f"unknown model_kind '{kind}'")
    return _RESTORE[kind](params, meta)


def save_pipeline(models: PipelineModels, path, config_digest: str | None = None) -> None:
    """Bundle the feature extractor and all three models into one archive."""
    params: dict[str, np.ndarray] = {}
    meta: dict = {}
    sections = {"features": models.extractor, "soh": models.soh,
                "static": models.static, "dynamic": models.dynamic}
    for prefix, model in sections.items():
        kind, payload = _PAYLOAD[type(model)]
        p, m = payload(model)
        params.update({f"{prefix}.{name}": arr for name, arr in p.items()})
        meta[prefix] = {"kind": kind, "meta": m}
    if config_digest is not None:
        meta["config_digest"] = config_digest
    dataio.write_archive(path, KIND_PIPELINE, params, meta)


def load_pipeline(path) -> PipelineModels:
    kind, params, meta = dataio.read_archive(path, expected_kind=KIND_PIPELINE)
    restored = {}
    for prefix in ("features", "soh", "static", "dynamic"):
        if prefix not in meta:
            raise ArchiveShapeError(f"pipeline archive missing section '{prefix}'")
        section_params = {name[len(prefix) + 1:]: arr for name, arr in params.items()
                          if name.startswith(prefix + ".")}
        restored[prefix] = _RESTORE[meta[prefix]["kind"]](section_params,
                                                          meta[prefix]["meta"])
    return PipelineModels(extractor=restored["features"], soh=restored["soh"],
                          static=restored["static"], dynamic=restored["dynamic"])
