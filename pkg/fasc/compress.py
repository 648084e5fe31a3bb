#
#   FASC Toolkit - Subspace Construction
#
#   Rank-k projection subspaces by Fisher alignment (FASC) and by the three
#   baselines, plus the loss surrogate J(P) = E[(g^T (I - P) x)^2].
#
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateCovarianceError,
    DegenerateGradientsError,
    DimensionMismatchError,
    RankError,
)
from .stats import centered
from .tensorio import check_paired


# Relative gap at the rank-k boundary below which the spectrum is flagged degenerate.
DEGENERATE_GAP = 1e-10


class Method(str, Enum):
    FASC = "fasc"
    SVD = "svd"
    GRAD_WEIGHTED = "grad_weighted"
    FISHER_DIAG = "fisher_diag"


@dataclass(frozen=True)
class FascConfig:
    epsilon: float = 1e-8
    tau: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")


@dataclass(frozen=True, eq=False)
class Subspace:
    """ Orthonormal rank-k basis of R^d, and the projector it induces """

    d: int
    k: int
    basis: np.ndarray
    eigenvalues: np.ndarray
    method: Method
    seed: Optional[int] = None
    degenerate: bool = False

    def __post_init__(self):
        _basis = np.array(self.basis, dtype=np.float64)
        _eig = np.array(self.eigenvalues, dtype=np.float64)
        if _basis.shape != (self.d, self.k):
            raise DimensionMismatchError(f"Basis shape {_basis.shape} does not match d={self.d}, k={self.k}")
        if _eig.shape != (self.k,):
            raise DimensionMismatchError(f"Expected {self.k} eigenvalues, got {_eig.shape}")
        _basis.setflags(write=False)
        _eig.setflags(write=False)
        object.__setattr__(self, "basis", _basis)
        object.__setattr__(self, "eigenvalues", _eig)
        object.__setattr__(self, "method", Method(self.method))

    @property
    def projector(self):
        return self.basis @ self.basis.T

    def projector_errors(self):
        """ (||P^2 - P||_F, ||P - P^T||_F, |trace(P) - k|) """
        _p = self.projector
        return (
            float(np.linalg.norm(_p @ _p - _p)),
            float(np.linalg.norm(_p - _p.T)),
            float(abs(np.trace(_p) - self.k)),
        )

    def check_projector_laws(self, tol=1e-10):
        """ P^2 = P, P^T = P and trace(P) = k, each within tol """
        return all(_e <= tol for _e in self.projector_errors())


def subspace_from_basis(basis, method, eigenvalues=None):
    """ Subspace spanned by the columns of basis, re-orthonormalised """
    _basis = orthonormalize(np.asarray(basis, dtype=np.float64))
    _d, _k = _basis.shape
    if eigenvalues is None:
        eigenvalues = np.zeros(_k)
    return Subspace(d=_d, k=_k, basis=_basis, eigenvalues=eigenvalues, method=method)


def check_rank(k, d):
    if not 1 <= k <= d:
        raise RankError(f"Rank k={k} must satisfy 1 <= k <= d={d}")


def fix_signs(vectors):
    """ Make the largest-magnitude entry of every column positive """
    _v = np.array(vectors, dtype=np.float64)
    _idx = np.argmax(np.abs(_v), axis=0)
    _signs = np.sign(_v[_idx, np.arange(_v.shape[1])])
    _signs[_signs == 0] = 1.0
    return _v * _signs


def sorted_eigh(matrix):
    """ Symmetric eigendecomposition, eigenvalues descending, deterministic signs """
    _w, _v = scipy.linalg.eigh(0.5 * (matrix + matrix.T))
    _order = np.argsort(-_w, kind="stable")
    return _w[_order], fix_signs(_v[:, _order])


def orthonormalize(vectors):
    """ Orthonormal basis of span(vectors) via economic QR """
    _q, _r = scipy.linalg.qr(vectors, mode="economic")
    return fix_signs(_q)


def boundary_degenerate(eigenvalues, k):
    """ True when the rank-k cut falls inside a (numerically) repeated eigenvalue """
    if k >= len(eigenvalues):
        return False
    _scale = max(abs(float(eigenvalues[0])), np.finfo(np.float64).tiny)
    return bool(abs(eigenvalues[k - 1] - eigenvalues[k]) <= DEGENERATE_GAP * _scale)


def whitening_factor(sigma_xx, cfg, k=None):
    """
    Truncated inverse square root of (Sigma_xx + eps I), returned as the
    d x r factor W = V_r diag(w_r^-1/2) over the r eigenvalues >= tau * w_max.
    W W^T is the truncated pseudo-inverse of the regularised covariance.
    """
    _d = sigma_xx.shape[0]
    _w, _v = sorted_eigh(sigma_xx + cfg.epsilon * np.eye(_d))
    if not _w[0] > 0:
        raise DegenerateCovarianceError("Activation covariance has no positive eigenvalues")

    _keep = _w >= cfg.tau * _w[0]
    _rank = int(_keep.sum())
    if k is not None and _rank < k:
        raise RankError(
            f"Activation covariance has numerical rank {_rank} after truncation (tau={cfg.tau}), need k={k}"
        )
    if _rank < _d:
        logging.debug(f"Compress - Truncated {_d - _rank} of {_d} activation eigenvalues below tau")

    return _v[:, _keep] / np.sqrt(_w[_keep])


def fasc_subspace(cov, k, cfg=None):
    """
    Fisher-aligned rank-k subspace: top-k solutions of
        Sigma_xg Sigma_gg Sigma_xg^T v = lambda (Sigma_xx + eps I) v
    solved by whitening, then orthonormalised. Eigenvalues are the
    generalized eigenvalues lambda.
    """
    if cfg is None:
        cfg = FascConfig()
    check_rank(k, cov.d)

    if np.linalg.norm(cov.sigma_gg) < 1e-12 * cov.d:
        raise DegenerateGradientsError("degenerate gradients: gradient covariance is numerically zero")

    _a = cov.sigma_xg @ cov.sigma_gg @ cov.sigma_xg.T
    _a = 0.5 * (_a + _a.T)

    _w = whitening_factor(cov.sigma_xx, cfg, k=k)
    _m = _w.T @ _a @ _w
    _lam, _u = sorted_eigh(_m)

    _vectors = _w @ _u[:, :k]
    _basis = orthonormalize(_vectors)
    _eigenvalues = np.clip(_lam[:k], 0.0, None)

    return Subspace(
        d=cov.d,
        k=k,
        basis=_basis,
        eigenvalues=_eigenvalues,
        method=Method.FASC,
        degenerate=boundary_degenerate(_lam, k),
    )


def _top_eigen_subspace(matrix, k, method):
    _w, _v = sorted_eigh(matrix)
    _degenerate = boundary_degenerate(_w, k)
    if _degenerate:
        logging.warning(f"Compress - {Method(method).value} subspace: degenerate spectrum at rank {k}, basis is one of many")
    return Subspace(
        d=matrix.shape[0],
        k=k,
        basis=_v[:, :k],
        eigenvalues=np.clip(_w[:k], 0.0, None),
        method=method,
        degenerate=_degenerate,
    )


def svd_subspace(cov, k):
    """ Top-k eigenvectors of the activation covariance """
    check_rank(k, cov.d)
    return _top_eigen_subspace(cov.sigma_xx, k, Method.SVD)


def grad_weighted_subspace(xs, gs, k):
    """ Top-k eigenvectors of the centered covariance of h = g * x (elementwise) """
    check_paired(xs, gs)
    check_rank(k, xs.d)

    _h = xs.as_float64() * gs.as_float64()
    _hc = centered(_h)
    _cov_h = _hc.T @ _hc / _h.shape[0]

    _scale = float(np.mean(np.sum(_h * _h, axis=1)))
    if _scale == 0.0 or np.linalg.norm(_cov_h) <= 1e-12 * _scale:
        raise DegenerateCovarianceError("zero-variance weighted covariance")

    return _top_eigen_subspace(_cov_h, k, Method.GRAD_WEIGHTED)


def fisher_diag_subspace(cov, k):
    """
    Axis-aligned subspace from per-coordinate importance
    diag(Sigma_gg)_j * diag(Sigma_xx)_j. Ties go to the lower index.
    """
    check_rank(k, cov.d)

    _scores = np.diag(cov.sigma_gg) * np.diag(cov.sigma_xx)
    _order = np.argsort(-_scores, kind="stable")
    _basis = np.eye(cov.d)[:, _order[:k]]

    return Subspace(
        d=cov.d,
        k=k,
        basis=_basis,
        eigenvalues=np.clip(_scores[_order[:k]], 0.0, None),
        method=Method.FISHER_DIAG,
        degenerate=boundary_degenerate(_scores[_order], k),
    )


def objective_J(subspace, xs, gs):
    """ Mean over samples of (g_i^T (I - P) x_i)^2 on centered data """
    check_paired(xs, gs)
    if subspace.k < 1:
        raise RankError("Empty subspace")
    if subspace.d != xs.d:
        raise DimensionMismatchError(f"Subspace lives in R^{subspace.d}, data has d={xs.d}")

    _x = centered(xs.as_float64())
    _g = centered(gs.as_float64())

    _residual = _x - (_x @ subspace.basis) @ subspace.basis.T
    _s = np.sum(_g * _residual, axis=1)
    return float(np.mean(_s * _s))


def rank_for_fraction(rank_fraction, d):
    """ k = round-half-up(rank_fraction * d), clamped to [1, d] """
    if not 0 < rank_fraction <= 1:
        raise ValueError(f"rank_fraction must be in (0, 1], got {rank_fraction}")
    return int(min(max(int(np.floor(rank_fraction * d + 0.5)), 1), d))
