#!/usr/bin/env python
#
#   FASC Toolkit - Per-Layer Pipeline
#
#   manifest -> covariances -> rho gating -> subspaces (FASC exact or
#   sketched, SVD, baselines) -> J, overlaps, angles -> RunReport.
#
import logging
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .compress import (
    FascConfig,
    Method,
    fasc_subspace,
    fisher_diag_subspace,
    grad_weighted_subspace,
    objective_J,
    rank_for_fraction,
    svd_subspace,
)
from .config import read_config
from .diagnostics import (
    DEGENERATE_GRADIENT_NORM,
    FLAG_DEGENERATE_COVARIANCE,
    FLAG_DEGENERATE_GRADIENTS,
    FLAG_EXCLUDED_LAYER,
    Gate,
    RhoReport,
    gate_layer,
    principal_angles,
    rho_score,
)
from .errors import (
    DegenerateCovarianceError,
    DegenerateGradientsError,
    FascError,
    ManifestError,
    TensorFormatError,
)
from .harness import layer_seed
from .sketch import SketchConfig, choose_sketch_size, sketched_fasc_subspace, subspace_overlap
from .stats import covariance_from_blocks
from .tensorio import load_layer


EXACT_DIM_LIMIT = 512
FLAG_PLAN_FAILED = "plan_failed"

CSV_FIELDS = ["layer", "rho", "method", "J_svd", "J_fasc", "overlap", "median_angle_deg"]


@dataclass
class WorkerResult:
    value: object = None
    error: Optional[tuple] = None


class Worker(object):
    """ Runs a function, handing back its result or the exception and traceback it raised """

    def __init__(self, fn, *args, **kwargs):
        self.fn = fn
        self.args = args
        self.kwargs = kwargs

    def run(self):
        try:
            return WorkerResult(value=self.fn(*self.args, **self.kwargs))
        except Exception:
            exctype, value = sys.exc_info()[:2]
            return WorkerResult(error=(exctype, value, traceback.format_exc()))


def run_workers(workers, threads=1):
    """ Run workers on a pool; results come back in submission order """
    if threads <= 1 or len(workers) <= 1:
        return [_w.run() for _w in workers]
    with ThreadPoolExecutor(max_workers=threads) as _pool:
        return list(_pool.map(lambda _w: _w.run(), workers))


@dataclass(frozen=True)
class LayerPlan:
    layer_id: int
    layer_kind: str
    d: int
    n: int
    method: Method
    gate: Gate
    rank_fraction: float
    k: int
    m: int
    seed: int
    rho: float
    threshold: float
    flags: frozenset = frozenset()
    # Set when the layer could not be planned; execution skips it.
    error: Optional[str] = None

    def to_dict(self):
        return {
            "layer_id": self.layer_id,
            "layer_kind": self.layer_kind,
            "d": self.d,
            "n": self.n,
            "method": self.method.value,
            "gate": self.gate.value,
            "rank_fraction": self.rank_fraction,
            "k": self.k,
            "m": self.m,
            "seed": self.seed,
            "rationale": {"rho": self.rho, "threshold": self.threshold, "flags": sorted(self.flags)},
            "error": self.error,
        }


@dataclass
class LayerResult:
    plan: LayerPlan
    j_values: Dict[str, Optional[float]] = field(default_factory=dict)
    j_selected: Optional[float] = None
    overlap: Optional[float] = None
    angles_deg: List[float] = field(default_factory=list)
    median_angle_deg: Optional[float] = None
    timings: Dict[str, float] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)

    def to_dict(self, include_timings=True):
        _out = {
            "plan": self.plan.to_dict(),
            "J": self.j_values,
            "J_selected": self.j_selected,
            "overlap_fasc_svd": self.overlap,
            "angles_deg": self.angles_deg,
            "median_angle_deg": self.median_angle_deg,
            "errors": self.errors,
        }
        if include_timings:
            _out["timings"] = self.timings
        return _out

    def csv_row(self):
        return {
            "layer": self.plan.layer_id,
            "rho": self.plan.rho,
            "method": self.plan.method.value,
            "J_svd": self.j_values.get(Method.SVD.value),
            "J_fasc": self.j_values.get(Method.FASC.value),
            "overlap": self.overlap,
            "median_angle_deg": self.median_angle_deg,
        }


@dataclass
class RunReport:
    calibration_tag: str
    layers: List[LayerResult]
    summary: Dict = field(default_factory=dict)

    @property
    def degraded(self):
        return any(_l.errors for _l in self.layers)

    def to_dict(self, include_timings=True):
        return {
            "calibration_tag": self.calibration_tag,
            "layers": [_l.to_dict(include_timings=include_timings) for _l in self.layers],
            "summary": self.summary,
        }

    def csv_rows(self):
        return [_l.csv_row() for _l in self.layers]


def _plan_layer(manifest, entry, position, rank_fraction, threshold, master_seed, config):
    _xs, _gs = load_layer(manifest, entry)
    _cov = covariance_from_blocks(_xs, _gs)
    _flags = set()

    try:
        _rho = rho_score(_cov, degenerate_norm=config.get("degenerate_gradient_norm", DEGENERATE_GRADIENT_NORM))
    except DegenerateGradientsError:
        logging.warning(f"Pipeline - Layer {entry.layer_id}: degenerate gradients, falling back to SVD")
        _rho = 0.0
        _flags.add(FLAG_DEGENERATE_GRADIENTS)
    except DegenerateCovarianceError as e:
        logging.warning(f"Pipeline - Layer {entry.layer_id}: {str(e)}")
        _rho = 0.0
        _flags.add(FLAG_DEGENERATE_COVARIANCE)

    _report = RhoReport(layer_id=entry.layer_id, rho=_rho, ci_low=_rho, ci_high=_rho, n=entry.n, flags=frozenset(_flags))
    _gate = gate_layer(
        _report,
        position=position,
        total_layers=len(manifest.layers),
        threshold=threshold,
        layer_kind=entry.layer_kind,
        exclude_layers=config["exclude_layers"],
    )
    if _gate == Gate.EXCLUDED:
        _flags.add(FLAG_EXCLUDED_LAYER)

    _k = rank_for_fraction(rank_fraction, entry.d)
    _m = 0
    if not config["exact_only"] and entry.d > config.get("exact_dim_limit", EXACT_DIM_LIMIT):
        _m = choose_sketch_size(_rho, _k, entry.d, SketchConfig(rho_gate=config["rho_gate"]))

    return LayerPlan(
        layer_id=entry.layer_id,
        layer_kind=entry.layer_kind,
        d=entry.d,
        n=entry.n,
        method=Method.FASC if _gate == Gate.USE_FASC else Method.SVD,
        gate=_gate,
        rank_fraction=float(rank_fraction),
        k=_k,
        m=_m,
        seed=layer_seed(master_seed, entry.layer_id),
        rho=_rho,
        threshold=float(threshold),
        flags=frozenset(_flags),
    )


def _failed_plan(entry, rank_fraction, threshold, master_seed, error):
    return LayerPlan(
        layer_id=entry.layer_id,
        layer_kind=entry.layer_kind,
        d=entry.d,
        n=entry.n,
        method=Method.SVD,
        gate=Gate.USE_SVD,
        rank_fraction=float(rank_fraction),
        k=rank_for_fraction(rank_fraction, entry.d),
        m=0,
        seed=layer_seed(master_seed, entry.layer_id),
        rho=0.0,
        threshold=float(threshold),
        flags=frozenset({FLAG_PLAN_FAILED}),
        error=error,
    )


def plan_run(manifest, rank_fraction, threshold, master_seed, config=None):
    """ One LayerPlan per manifest layer, in manifest order """
    if config is None:
        config = read_config()
    if not manifest.layers:
        raise ManifestError("empty manifest")
    if not 0 < rank_fraction <= 1:
        raise ValueError(f"rank_fraction must be in (0, 1], got {rank_fraction}")

    _workers = [
        Worker(_plan_layer, manifest, _entry, _position, rank_fraction, threshold, master_seed, config)
        for _position, _entry in enumerate(manifest.layers)
    ]
    _plans = []
    for _entry, _result in zip(manifest.layers, run_workers(_workers, threads=config["threads"])):
        if _result.error is not None:
            _exctype, _value, _tb = _result.error
            logging.debug(_tb)
            if isinstance(_value, (ManifestError, TensorFormatError, OSError)):
                raise ManifestError(f"Layer {_entry.layer_id}: {str(_value)}")
            if not isinstance(_value, FascError):
                raise _value
            logging.error(f"Pipeline - Layer {_entry.layer_id} could not be planned - {str(_value)}")
            _plans.append(_failed_plan(_entry, rank_fraction, threshold, master_seed, f"{_exctype.__name__}: {str(_value)}"))
            continue
        _plans.append(_result.value)

    _fasc = sum(1 for _p in _plans if _p.method == Method.FASC)
    logging.info(f"Pipeline - Planned {len(_plans)} layers, {_fasc} gated to FASC at threshold {threshold}")
    return _plans


def _execute_layer(plan, manifest, entry, fasc_cfg):
    if plan.error is not None:
        logging.warning(f"Pipeline - Layer {plan.layer_id}: not planned, skipped")
        return LayerResult(plan=plan, errors=[plan.error])

    _result = LayerResult(plan=plan)
    _t = time.perf_counter()

    _xs, _gs = load_layer(manifest, entry)
    _cov = covariance_from_blocks(_xs, _gs)
    _result.timings["load_stats"] = time.perf_counter() - _t

    _t = time.perf_counter()
    _svd = svd_subspace(_cov, plan.k)
    _result.j_values[Method.SVD.value] = objective_J(_svd, _xs, _gs)
    _result.timings["svd"] = time.perf_counter() - _t

    _t = time.perf_counter()
    _fasc = None
    try:
        if FLAG_DEGENERATE_GRADIENTS in plan.flags:
            logging.warning(f"Pipeline - Layer {plan.layer_id}: degenerate gradients, FASC skipped")
            _result.j_values[Method.FASC.value] = None
        elif plan.m == 0:
            _fasc = fasc_subspace(_cov, plan.k, fasc_cfg)
        else:
            _fasc = sketched_fasc_subspace(_xs, _gs, plan.k, SketchConfig(m=plan.m, seed=plan.seed), fasc_cfg)
        if _fasc is not None:
            _result.j_values[Method.FASC.value] = objective_J(_fasc, _xs, _gs)
    except FascError as e:
        logging.error(f"Pipeline - Layer {plan.layer_id}: FASC failed - {str(e)}")
        _result.j_values[Method.FASC.value] = None
        _result.errors.append(f"fasc: {str(e)}")
    _result.timings["fasc"] = time.perf_counter() - _t

    _t = time.perf_counter()
    for _method, _build in (
        (Method.GRAD_WEIGHTED, lambda: grad_weighted_subspace(_xs, _gs, plan.k)),
        (Method.FISHER_DIAG, lambda: fisher_diag_subspace(_cov, plan.k)),
    ):
        try:
            _result.j_values[_method.value] = objective_J(_build(), _xs, _gs)
        except FascError as e:
            logging.warning(f"Pipeline - Layer {plan.layer_id}: {_method.value} baseline failed - {str(e)}")
            _result.j_values[_method.value] = None
    _result.timings["baselines"] = time.perf_counter() - _t

    if plan.method == Method.FASC and _fasc is not None:
        _result.j_selected = _result.j_values[Method.FASC.value]
    else:
        _result.j_selected = _result.j_values[Method.SVD.value]

    if _fasc is not None:
        _result.overlap = subspace_overlap(_fasc, _svd)
        _angles = principal_angles(_fasc, _svd, layer_id=plan.layer_id)
        _result.angles_deg = _angles.angles_deg
        _result.median_angle_deg = _angles.median_deg

    return _result


def _summarise(results):
    _ok = [_r for _r in results if _r.j_selected is not None]
    _overlaps = [_r.overlap for _r in results if _r.overlap is not None]
    return {
        "layers": len(results),
        "fasc_layers": [_r.plan.layer_id for _r in results if _r.plan.method == Method.FASC],
        "excluded_layers": [_r.plan.layer_id for _r in results if _r.plan.gate == Gate.EXCLUDED],
        "failed_layers": [_r.plan.layer_id for _r in results if _r.errors],
        "total_J_selected": sum(_r.j_selected for _r in _ok),
        "total_J_svd": sum(_r.j_values[Method.SVD.value] for _r in _ok if _r.j_values.get(Method.SVD.value) is not None),
        "mean_overlap_fasc_svd": sum(_overlaps) / len(_overlaps) if _overlaps else None,
    }


def execute_run(plans, manifest, config=None):
    """ Solve every planned layer; a failing layer is recorded and the run goes on """
    if config is None:
        config = read_config()
    if not plans or not manifest.layers:
        raise ManifestError("empty manifest")

    _entries = {_e.layer_id: _e for _e in manifest.layers}
    if sorted(_entries) != sorted(_p.layer_id for _p in plans):
        raise ManifestError("Plans do not cover the manifest's layers")

    _fasc_cfg = FascConfig(epsilon=config["epsilon"], tau=config["tau"])
    _workers = [Worker(_execute_layer, _plan, manifest, _entries[_plan.layer_id], _fasc_cfg) for _plan in plans]

    _results = []
    for _plan, _outcome in zip(plans, run_workers(_workers, threads=config["threads"])):
        if _outcome.error is not None:
            _exctype, _value, _tb = _outcome.error
            logging.error(f"Pipeline - Layer {_plan.layer_id} failed - {str(_value)}")
            logging.debug(_tb)
            _results.append(LayerResult(plan=_plan, errors=[f"{_exctype.__name__}: {str(_value)}"]))
        else:
            _results.append(_outcome.value)

    _report = RunReport(calibration_tag=manifest.calibration_tag, layers=_results, summary=_summarise(_results))
    logging.info(
        f"Pipeline - Run complete: {len(_results)} layers, {len(_report.summary['failed_layers'])} failed, "
        f"total J {_report.summary['total_J_selected']:.6g} (SVD only: {_report.summary['total_J_svd']:.6g})"
    )
    return _report


def report_to_dict(report, include_timings=True):
    return report.to_dict(include_timings=include_timings)
