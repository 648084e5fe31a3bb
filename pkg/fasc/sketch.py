#
#   FASC Toolkit - Randomized Cross-Covariance Sketch
#
#   Activations and gradients are pushed through independent Gaussian maps
#   R1, R2 (d x m, entries N(0, 1/m)), the FASC problem is solved in m
#   dimensions and the solution is lifted back with R1. Gaussian entries come
#   from numpy's PCG64 generator (numpy.random.default_rng), which is stable
#   across platforms for a given seed.
#
import logging
from dataclasses import dataclass

import numpy as np

from .compress import FascConfig, Subspace, check_rank, fasc_subspace, orthonormalize
from .errors import DegenerateCovarianceError, RankError
from .stats import centered, covariance_from_arrays
from .tensorio import check_paired


SKETCH_GAUSSIAN = "gaussian"
SKETCH_IDENTITY = "identity"


@dataclass(frozen=True)
class SketchConfig:
    """
    m: sketch size (0 lets choose_sketch_size pick it)
    seed: RNG seed for R1/R2
    rho_gate: layers with rho above this get the larger sketch
    mode: "gaussian", or "identity" (R1 = R2 = I, requires m = d; test hook)
    """

    m: int = 0
    seed: int = 0
    rho_gate: float = 0.3
    m_low_factor: int = 2
    m_high_factor: int = 4
    mode: str = SKETCH_GAUSSIAN

    def __post_init__(self):
        if self.mode not in (SKETCH_GAUSSIAN, SKETCH_IDENTITY):
            raise ValueError(f"Unknown sketch mode {self.mode}")
        if self.m < 0:
            raise ValueError(f"Sketch size must be >= 0, got {self.m}")


def choose_sketch_size(rho, k, d, cfg=None):
    """ m = 2k for low-rho layers, min(4k, d/2) otherwise; always within [k, d] """
    if cfg is None:
        cfg = SketchConfig()
    check_rank(k, d)

    if rho <= cfg.rho_gate:
        _m = cfg.m_low_factor * k
    else:
        _m = min(cfg.m_high_factor * k, max(d // 2, k))

    return int(min(max(_m, k), d))


def sketch_operators(d, m, cfg):
    """ Draw (R1, R2), each d x m """
    if cfg.mode == SKETCH_IDENTITY:
        if m != d:
            raise ValueError(f"Identity sketch needs m == d, got m={m}, d={d}")
        return np.eye(d), np.eye(d)

    _rng = np.random.default_rng(cfg.seed)
    _scale = 1.0 / np.sqrt(m)
    _r1 = _rng.standard_normal((d, m)) * _scale
    _r2 = _rng.standard_normal((d, m)) * _scale
    return _r1, _r2


def sketched_fasc_subspace(xs, gs, k, cfg, fasc_cfg=None):
    """
    FASC solved on X R1, G R2 and lifted back as span{R1 w}. Never forms a
    d x d covariance; the largest intermediates are n x d and d x m.
    """
    if fasc_cfg is None:
        fasc_cfg = FascConfig()
    check_paired(xs, gs)
    check_rank(k, xs.d)

    _m = cfg.m
    if _m < k:
        raise RankError(f"Sketch size m={_m} is smaller than rank k={k}")
    if _m > xs.d:
        raise RankError(f"Sketch size m={_m} exceeds dimension d={xs.d}")

    _r1, _r2 = sketch_operators(xs.d, _m, cfg)

    # Centre first: sketching does not commute with mean removal on raw moments.
    _xs = centered(xs.as_float64()) @ _r1
    _gs = centered(gs.as_float64()) @ _r2

    _cov = covariance_from_arrays(_xs, _gs)
    try:
        _inner = fasc_subspace(_cov, k, fasc_cfg)
    except (RankError, DegenerateCovarianceError) as e:
        raise DegenerateCovarianceError(f"Degenerate sketched activation covariance (m={_m}): {str(e)}")

    _lifted = orthonormalize(_r1 @ _inner.basis)
    logging.debug(f"Sketch - Layer {xs.layer_id}: solved in m={_m} of d={xs.d}, seed {cfg.seed}")

    return Subspace(
        d=xs.d,
        k=k,
        basis=_lifted,
        eigenvalues=_inner.eigenvalues,
        method=_inner.method,
        seed=cfg.seed,
        degenerate=_inner.degenerate,
    )


def subspace_overlap(a, b):
    """ Mean squared cosine of the principal angles: ||Qa^T Qb||_F^2 / k """
    if a.d != b.d or a.k != b.k:
        raise RankError(f"Cannot compare subspaces of shape (d={a.d}, k={a.k}) and (d={b.d}, k={b.k})")
    _cross = a.basis.T @ b.basis
    return float(np.clip(np.sum(_cross * _cross) / a.k, 0.0, 1.0))
