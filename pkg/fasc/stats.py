#
#   FASC Toolkit - Streaming Covariance Statistics
#
#   Running sums of x, g, xx^T, gg^T and xg^T are kept in float64 and can be
#   merged across shards. Centering happens once, at finalize.
#
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InsufficientSamplesError, NonFiniteValueError
from .tensorio import check_paired, find_non_finite


DEFAULT_SHARD_ROWS = 1024


@dataclass(frozen=True, eq=False)
class CovarianceSet:
    """ Centered population (1/n) covariances of one layer """

    d: int
    n: int
    mean_x: np.ndarray
    mean_g: np.ndarray
    sigma_xx: np.ndarray
    sigma_gg: np.ndarray
    sigma_xg: np.ndarray

    def __post_init__(self):
        for _name in ("mean_x", "mean_g", "sigma_xx", "sigma_gg", "sigma_xg"):
            _arr = np.array(getattr(self, _name), dtype=np.float64)
            _arr.setflags(write=False)
            object.__setattr__(self, _name, _arr)


class CovAccumulator(object):
    """
    Mergeable accumulator of first and second moments for paired
    activation/gradient streams. Single writer; shard the stream and merge()
    to parallelise.
    """

    def __init__(self, d):
        if d < 1:
            raise DimensionMismatchError(f"Accumulator dimension must be >= 1, got {d}")
        self.d = int(d)
        self.n = 0
        self.sum_x = np.zeros(self.d)
        self.sum_g = np.zeros(self.d)
        self.sum_xx = np.zeros((self.d, self.d))
        self.sum_gg = np.zeros((self.d, self.d))
        self.sum_xg = np.zeros((self.d, self.d))

    def _check_dims(self, x, g, ndim):
        if x.shape != g.shape or x.ndim != ndim or x.shape[-1] != self.d:
            raise DimensionMismatchError(
                f"Accumulator expects d={self.d}, got activations {x.shape} and gradients {g.shape}"
            )
        for _name, _arr in (("activation", x), ("gradient", g)):
            _pos = find_non_finite(np.atleast_2d(_arr))
            if _pos is not None:
                raise NonFiniteValueError(
                    f"Non-finite {_name} value at row {_pos[0]}, column {_pos[1]}", row=_pos[0], column=_pos[1]
                )

    def accumulate(self, x, g):
        """ Add one paired sample. Returns self so calls can be chained. """
        _x = np.asarray(x, dtype=np.float64)
        _g = np.asarray(g, dtype=np.float64)
        self._check_dims(_x, _g, ndim=1)

        self.sum_x += _x
        self.sum_g += _g
        self.sum_xx += np.outer(_x, _x)
        self.sum_gg += np.outer(_g, _g)
        self.sum_xg += np.outer(_x, _g)
        self.n += 1
        return self

    def accumulate_block(self, X, G):
        """ Add a block of paired samples (rows) in one go """
        _X = np.asarray(X, dtype=np.float64)
        _G = np.asarray(G, dtype=np.float64)
        self._check_dims(_X, _G, ndim=2)

        self.sum_x += _X.sum(axis=0)
        self.sum_g += _G.sum(axis=0)
        self.sum_xx += _X.T @ _X
        self.sum_gg += _G.T @ _G
        self.sum_xg += _X.T @ _G
        self.n += _X.shape[0]
        return self

    def merge(self, other):
        """ Combine two accumulators into a new one """
        if other.d != self.d:
            raise DimensionMismatchError(f"Cannot merge accumulators of dimension {self.d} and {other.d}")

        _out = CovAccumulator(self.d)
        _out.n = self.n + other.n
        _out.sum_x = self.sum_x + other.sum_x
        _out.sum_g = self.sum_g + other.sum_g
        _out.sum_xx = self.sum_xx + other.sum_xx
        _out.sum_gg = self.sum_gg + other.sum_gg
        _out.sum_xg = self.sum_xg + other.sum_xg
        return _out

    def finalize(self):
        """ Produce centered covariances using the sum-of-outer-products identity """
        if self.n < 2:
            raise InsufficientSamplesError(f"Need at least 2 samples to centre, have {self.n}")

        _n = float(self.n)
        _mx = self.sum_x / _n
        _mg = self.sum_g / _n

        _sxx = self.sum_xx / _n - np.outer(_mx, _mx)
        _sgg = self.sum_gg / _n - np.outer(_mg, _mg)
        _sxg = self.sum_xg / _n - np.outer(_mx, _mg)

        # Symmetry by averaging with the transpose.
        _sxx = 0.5 * (_sxx + _sxx.T)
        _sgg = 0.5 * (_sgg + _sgg.T)

        return CovarianceSet(
            d=self.d, n=self.n, mean_x=_mx, mean_g=_mg, sigma_xx=_sxx, sigma_gg=_sgg, sigma_xg=_sxg
        )


def accumulate_arrays(X, G, shard_rows=DEFAULT_SHARD_ROWS):
    """ Accumulate paired float arrays shard by shard and merge the shards """
    _X = np.asarray(X, dtype=np.float64)
    _G = np.asarray(G, dtype=np.float64)
    if _X.ndim != 2 or _X.shape != _G.shape:
        raise DimensionMismatchError(f"Unpaired arrays: {_X.shape} and {_G.shape}")

    _total = CovAccumulator(_X.shape[1])
    for _start in range(0, _X.shape[0], shard_rows):
        _shard = CovAccumulator(_X.shape[1])
        _shard.accumulate_block(_X[_start : _start + shard_rows], _G[_start : _start + shard_rows])
        _total = _total.merge(_shard)
    return _total


def covariance_from_arrays(X, G, shard_rows=DEFAULT_SHARD_ROWS):
    return accumulate_arrays(X, G, shard_rows=shard_rows).finalize()


def covariance_from_blocks(xs, gs, shard_rows=DEFAULT_SHARD_ROWS):
    """ Finalized CovarianceSet for a paired activation/gradient TensorBlock pair """
    check_paired(xs, gs)
    _cov = covariance_from_arrays(xs.as_float64(), gs.as_float64(), shard_rows=shard_rows)
    logging.debug(f"Stats - Layer {xs.layer_id}: covariances from {_cov.n} samples, d={_cov.d}")
    return _cov


def centered(X):
    """ Float64 copy of X with its column means removed """
    _X = np.asarray(X, dtype=np.float64)
    return _X - _X.mean(axis=0)
