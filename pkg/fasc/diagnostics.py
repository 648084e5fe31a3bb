#
#   FASC Toolkit - Diagnostics
#
#   Dependence Violation Score (rho), bootstrap intervals, per-layer gating
#   and principal-angle analysis.
#
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, List, Optional

import numpy as np
import scipy.linalg
import scipy.stats

from .errors import (
    DegenerateCovarianceError,
    DegenerateGradientsError,
    DimensionMismatchError,
    InsufficientSamplesError,
    RankError,
    UndefinedCorrelationError,
)
from .stats import covariance_from_arrays
from .tensorio import check_paired


DEGENERATE_GRADIENT_NORM = 1e-4
MIN_BOOTSTRAP_SAMPLES = 32
EARLY_ATTENTION_LAYERS = (0, 1, 2)

FLAG_DEGENERATE_GRADIENTS = "degenerate_gradients"
FLAG_DEGENERATE_COVARIANCE = "degenerate_covariance"
FLAG_EXCLUDED_LAYER = "excluded_layer_rule"


class Gate(str, Enum):
    USE_FASC = "use_fasc"
    USE_SVD = "use_svd"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class RhoReport:
    layer_id: int
    rho: float
    ci_low: float
    ci_high: float
    n: int
    gate: Optional[Gate] = None
    flags: FrozenSet[str] = field(default_factory=frozenset)
    resamples: int = 0

    @property
    def degenerate(self):
        return bool(self.flags & {FLAG_DEGENERATE_GRADIENTS, FLAG_DEGENERATE_COVARIANCE})

    @property
    def ci_width(self):
        return self.ci_high - self.ci_low

    def to_dict(self):
        return {
            "layer_id": self.layer_id,
            "rho": self.rho,
            "ci": [self.ci_low, self.ci_high],
            "n": self.n,
            "gate": self.gate.value if self.gate is not None else None,
            "flags": sorted(self.flags),
        }


@dataclass(frozen=True)
class AngleReport:
    layer_id: Optional[int]
    angles_deg: List[float]
    median_deg: float

    def to_dict(self):
        return {"layer_id": self.layer_id, "angles_deg": list(self.angles_deg), "median_deg": self.median_deg}


def rho_from_matrices(sigma_xx, sigma_gg, sigma_xg, degenerate_norm=DEGENERATE_GRADIENT_NORM):
    _nxx = float(np.linalg.norm(sigma_xx))
    _ngg = float(np.linalg.norm(sigma_gg))
    if _ngg < degenerate_norm:
        raise DegenerateGradientsError(f"degenerate gradients: ||Sigma_gg||_F = {_ngg:.3g} < {degenerate_norm:g}")
    if _nxx == 0.0:
        raise DegenerateCovarianceError("Activation covariance is zero")
    return float(np.linalg.norm(sigma_xg)) / (np.sqrt(_nxx) * np.sqrt(_ngg))


def rho_score(cov, degenerate_norm=DEGENERATE_GRADIENT_NORM):
    """ rho = ||Sigma_xg||_F / (||Sigma_xx||_F^1/2 * ||Sigma_gg||_F^1/2) """
    return rho_from_matrices(cov.sigma_xx, cov.sigma_gg, cov.sigma_xg, degenerate_norm=degenerate_norm)


def _centered_rho(X, G, degenerate_norm):
    _xc = X - X.mean(axis=0)
    _gc = G - G.mean(axis=0)
    _n = X.shape[0]
    return rho_from_matrices(_xc.T @ _xc / _n, _gc.T @ _gc / _n, _xc.T @ _gc / _n, degenerate_norm=degenerate_norm)


def degenerate_report(layer_id, n, flag=FLAG_DEGENERATE_GRADIENTS):
    """ Report for a layer whose gradients (or activations) are too flat for rho to mean anything """
    return RhoReport(layer_id=layer_id, rho=0.0, ci_low=0.0, ci_high=0.0, n=n, flags=frozenset([flag]))


def rho_bootstrap(xs, gs, resamples=1000, seed=0, threads=1, degenerate_norm=DEGENERATE_GRADIENT_NORM):
    """
    Percentile bootstrap 95% interval for rho.

    Resample i draws its indices from its own generator spawned off the seed,
    so the result does not depend on the thread count. Resamples whose
    gradients or activations come out degenerate are dropped; the interval
    is taken over the rest. With two or more usable resamples the interval
    is widened, if needed, to contain the point estimate; a single resample
    gives a zero-width interval at its own value.
    """
    check_paired(xs, gs)
    if xs.n < MIN_BOOTSTRAP_SAMPLES:
        raise InsufficientSamplesError(f"Bootstrap needs n >= {MIN_BOOTSTRAP_SAMPLES}, have {xs.n}")
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")

    _x = xs.as_float64()
    _g = gs.as_float64()
    _n = _x.shape[0]

    _rho = rho_score(covariance_from_arrays(_x, _g), degenerate_norm=degenerate_norm)

    _streams = np.random.SeedSequence([int(seed), int(xs.layer_id)]).spawn(resamples)

    def _one(stream):
        _idx = np.random.default_rng(stream).integers(0, _n, size=_n)
        try:
            return _centered_rho(_x[_idx], _g[_idx], degenerate_norm)
        except (DegenerateGradientsError, DegenerateCovarianceError):
            return np.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as _pool:
            _samples = np.array(list(_pool.map(_one, _streams)))
    else:
        _samples = np.array([_one(_s) for _s in _streams])

    _samples = _samples[np.isfinite(_samples)]
    if _samples.size == 0:
        raise DegenerateGradientsError(f"degenerate gradients: all {resamples} bootstrap resamples were degenerate")
    if _samples.size < resamples:
        logging.warning(
            f"Diagnostics - Layer {xs.layer_id}: dropped {resamples - _samples.size} of {resamples} degenerate resamples"
        )

    if _samples.size == 1:
        _low = _high = float(_samples[0])
    else:
        _low, _high = np.percentile(_samples, [2.5, 97.5])
        _low = float(min(_low, _rho))
        _high = float(max(_high, _rho))

    logging.debug(f"Diagnostics - Layer {xs.layer_id}: rho={_rho:.4f} CI [{_low:.4f}, {_high:.4f}] ({_samples.size} resamples)")

    return RhoReport(
        layer_id=xs.layer_id, rho=_rho, ci_low=max(_low, 0.0), ci_high=_high, n=_n, resamples=int(_samples.size)
    )


def gate_layer(report, position, total_layers, threshold=0.3, layer_kind="mlp", exclude_layers=True):
    """
    use_fasc when rho clears the threshold, use_svd otherwise. position is the
    layer's index in the manifest, not its layer_id: early attention layers
    (positions 0-2) and the final layer are excluded unless exclude_layers is off.
    """
    if exclude_layers:
        if layer_kind == "attention" and position in EARLY_ATTENTION_LAYERS:
            return Gate.EXCLUDED
        if position == total_layers - 1:
            return Gate.EXCLUDED

    if report.rho > threshold and not report.degenerate:
        return Gate.USE_FASC
    return Gate.USE_SVD


def apply_gate(report, gate):
    """ Copy of the report carrying the gate decision and the matching flags """
    _flags = set(report.flags)
    if gate == Gate.EXCLUDED:
        _flags.add(FLAG_EXCLUDED_LAYER)
    return replace(report, gate=gate, flags=frozenset(_flags))


def principal_angles(a, b, layer_id=None):
    """ Principal angles between span(a) and span(b) in degrees, ascending """
    if a.d != b.d or a.k != b.k:
        raise RankError(f"Cannot compare subspaces of shape (d={a.d}, k={a.k}) and (d={b.d}, k={b.k})")

    # subspace_angles switches to an arcsine formula for small angles, where
    # arccos of the cross-Gram singular values loses all precision.
    _theta = np.degrees(scipy.linalg.subspace_angles(a.basis, b.basis))
    _theta = np.clip(np.sort(_theta), 0.0, 90.0)

    return AngleReport(layer_id=layer_id, angles_deg=[float(_t) for _t in _theta], median_deg=float(np.median(_theta)))


def rho_correlation(rhos, gains):
    """ Pearson r between per-layer rho and per-layer gain """
    _r = np.asarray(rhos, dtype=np.float64)
    _gain = np.asarray(gains, dtype=np.float64)
    if _r.shape != _gain.shape or _r.ndim != 1:
        raise DimensionMismatchError(f"rho and gain lists differ in shape: {_r.shape} vs {_gain.shape}")
    if _r.size < 3:
        raise ValueError(f"Need at least 3 layers for a correlation, have {_r.size}")
    if np.ptp(_r) == 0.0 or np.ptp(_gain) == 0.0:
        raise UndefinedCorrelationError("Correlation undefined for constant input")

    return float(scipy.stats.pearsonr(_r, _gain)[0])
