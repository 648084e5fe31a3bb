import tracemalloc

import numpy as np
import pytest

from fasc.compress import Method, fasc_subspace, subspace_from_basis
from fasc.errors import RankError
from fasc.harness import PlantedSpec, generate_planted
from fasc.sketch import (
    SKETCH_IDENTITY,
    SketchConfig,
    choose_sketch_size,
    sketch_operators,
    sketched_fasc_subspace,
    subspace_overlap,
)
from fasc.stats import covariance_from_blocks

from .conftest import make_pair, planted3_spec


def _four_planted(seed=0, d=64, n=2048):
    """ Four planted axes with distinct variances, so the top-4 FASC space is well separated """
    _var = [1.0] * d
    for _axis, _v in zip(range(d - 4, d), (0.2, 0.3, 0.4, 0.5)):
        _var[_axis] = _v
    return generate_planted(
        PlantedSpec(d=d, planted_axes=range(d - 4, d), variances=_var, gradient_gain=3.0, noise=1.0, n=n, seed=seed)
    )


def test_choose_sketch_size():
    assert choose_sketch_size(0.1, 8, 128) == 16
    assert choose_sketch_size(0.5, 8, 128) == 32
    assert choose_sketch_size(0.5, 8, 20) == 10
    # Clamped into [k, d].
    assert choose_sketch_size(0.1, 8, 12) == 12
    assert choose_sketch_size(0.9, 6, 8) == 6


def test_identity_sketch_is_exact():
    _xs, _gs = _four_planted()
    _exact = fasc_subspace(covariance_from_blocks(_xs, _gs), 4)
    _sketched = sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=64, mode=SKETCH_IDENTITY))

    assert subspace_overlap(_exact, _sketched) >= 0.999


def test_identity_sketch_needs_full_size():
    with pytest.raises(ValueError):
        sketch_operators(8, 4, SketchConfig(m=4, mode=SKETCH_IDENTITY))


def test_planted_small_gaussian_sketch():
    _xs, _gs = generate_planted(planted3_spec())
    _sketched = sketched_fasc_subspace(_xs, _gs, 1, SketchConfig(m=3, seed=11))

    assert abs(_sketched.basis[2, 0]) >= 0.95
    assert _sketched.seed == 11
    assert _sketched.method == Method.FASC


def test_overlap_grows_with_sketch_size():
    _xs, _gs = _four_planted(seed=5)
    _exact = fasc_subspace(covariance_from_blocks(_xs, _gs), 4)

    _small = [subspace_overlap(_exact, sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=8, seed=_s))) for _s in range(20)]
    _large = [subspace_overlap(_exact, sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=16, seed=_s))) for _s in range(20)]

    assert np.mean(_large) > np.mean(_small)


def test_sketch_is_deterministic():
    _xs, _gs = _four_planted(d=32, n=512)
    _a = sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=12, seed=3))
    _b = sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=12, seed=3))
    _c = sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=12, seed=4))

    np.testing.assert_array_equal(_a.basis, _b.basis)
    assert not np.array_equal(_a.basis, _c.basis)


def test_lifted_basis_is_orthonormal():
    _xs, _gs = _four_planted(d=32, n=512)
    _s = sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=8, seed=1))

    assert (_s.d, _s.k) == (32, 4)
    np.testing.assert_allclose(_s.basis.T @ _s.basis, np.eye(4), atol=1e-10)
    assert _s.check_projector_laws()


def test_sketch_size_bounds():
    _xs, _gs = _four_planted(d=16, n=256)
    with pytest.raises(RankError):
        sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=3))
    with pytest.raises(RankError):
        sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=17))


def test_wide_layer_never_builds_d_by_d():
    _d = 4096
    _rng = np.random.default_rng(0)
    _x = _rng.standard_normal((128, _d)).astype(np.float32)
    _xs, _gs = make_pair(_x, _x + _rng.standard_normal((128, _d)).astype(np.float32))

    tracemalloc.start()
    try:
        sketched_fasc_subspace(_xs, _gs, 4, SketchConfig(m=16, seed=0))
        _, _peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()

    assert _peak < _d * _d * 8 // 4


def test_subspace_overlap_examples():
    _e = np.eye(3)
    _s = lambda *cols: subspace_from_basis(_e[:, list(cols)], Method.SVD)

    assert subspace_overlap(_s(0), _s(0)) == pytest.approx(1.0)
    assert subspace_overlap(_s(0), _s(1)) == pytest.approx(0.0)
    assert subspace_overlap(_s(0, 1), _s(0, 2)) == pytest.approx(0.5)
    with pytest.raises(RankError):
        subspace_overlap(_s(0), _s(0, 1))
