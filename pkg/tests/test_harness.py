import numpy as np
import pytest

from fasc.diagnostics import rho_score
from fasc.errors import DimensionMismatchError
from fasc.harness import (
    MAX_HESSIAN_WIDTH,
    PlantedSpec,
    ToyNet,
    balanced_spec,
    calibration_size_study,
    fim_hessian_overlap,
    fim_hessian_quadratic_gap,
    generate_planted,
    layer_gain_experiment,
    layer_seed,
    planted_layers,
    rank_sweep,
    threshold_sweep,
    top_eigen_overlap,
    toy_forward_backward,
)
from fasc.stats import covariance_from_blocks
from fasc.tensorio import read_manifest

from .conftest import make_pair


def _optimal_linear_net(width=16, n=4096, noise=0.1, seed=0):
    """ Linear net whose weights are the least-squares optimum for its own targets """
    _rng = np.random.default_rng(seed)
    _u = np.linalg.qr(_rng.standard_normal((width, width)))[0]
    _v = np.linalg.qr(_rng.standard_normal((width, width)))[0]
    _w = _u @ np.diag(3.0 * 0.85 ** np.arange(width)) @ _v.T
    _inputs = _rng.standard_normal((n, width))
    _targets = _inputs @ _w.T + noise * _rng.standard_normal((n, width))
    return ToyNet([_w], nonlinearity="tanh"), _inputs, _targets, _w


def test_planted_is_deterministic():
    _spec = balanced_spec(8, 2.0, n=128, seed=3)
    _a = generate_planted(_spec)
    _b = generate_planted(_spec)

    assert _a[0] == _b[0] and _a[1] == _b[1]


def test_planted_gradients_follow_spec():
    _xs, _gs = generate_planted(PlantedSpec(d=4, planted_axes=(3,), gradient_gain=2.0, noise=0.0, n=64))
    _x = _xs.as_float64()
    _g = _gs.as_float64()

    assert np.all(_g[:, :3] == 0.0)
    np.testing.assert_allclose(_g[:, 3], 2.0 * _x[:, 3], rtol=1e-6)


def test_planted_spec_validation():
    with pytest.raises(ValueError):
        PlantedSpec(d=4, planted_axes=(4,))
    with pytest.raises(ValueError):
        PlantedSpec(d=4, planted_axes=(1,), variance_low=10.0, variance_high=1.0)
    with pytest.raises(ValueError):
        PlantedSpec(d=4, planted_axes=(1,), gradient_gain=-1.0)
    with pytest.raises(ValueError):
        PlantedSpec(d=4, planted_axes=(1, 1))


def test_zero_gain_is_null_level():
    _xs, _gs = generate_planted(balanced_spec(64, 0.0, n=4096, seed=1))
    assert rho_score(covariance_from_blocks(_xs, _gs)) < 0.2


def test_strong_gain_rho_above_half():
    _xs, _gs = generate_planted(balanced_spec(64, 3.0, n=4096, seed=1))
    assert rho_score(covariance_from_blocks(_xs, _gs)) > 0.5


def test_planted_layers_rho_ramp():
    _layers = planted_layers(d=16, n=2048, gains=[0.75, 1.5, 3.0])
    _rhos = [rho_score(covariance_from_blocks(_xs, _gs)) for _xs, _gs in _layers]

    assert [_xs.layer_id for _xs, _ in _layers] == [0, 1, 2]
    assert _rhos == sorted(_rhos)


def test_layer_seed_distinct():
    assert layer_seed(0, 0) != layer_seed(0, 1)
    assert layer_seed(0, 1) != layer_seed(1, 1)
    assert layer_seed(5, 2) == layer_seed(5, 2)


def test_zero_weights_zero_gradients():
    _net = ToyNet([np.zeros((6, 4)), np.zeros((6, 6)), np.zeros((3, 6))], nonlinearity="tanh")
    _rng = np.random.default_rng(0)
    _traces = toy_forward_backward(_net, _rng.standard_normal((5, 4)), _rng.standard_normal((5, 3)))

    for _trace in _traces[1:]:
        assert np.all(_trace.gradients == 0.0)


def test_single_linear_layer_closed_form():
    _w = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    _x = np.array([[0.3, -0.7]])
    _t = np.array([[1.0, 0.0, -1.0]])
    _trace = toy_forward_backward(ToyNet([_w]), _x, _t)[0]

    np.testing.assert_allclose(_trace.gradients[0], 2.0 * _w.T @ (_w @ _x[0] - _t[0]), rtol=1e-12)
    np.testing.assert_array_equal(_trace.activations, _x)


def test_gradients_match_finite_differences():
    _net = ToyNet.random([8, 8, 8, 4], nonlinearity="tanh", seed=1)
    _rng = np.random.default_rng(2)
    _inputs = _rng.standard_normal((6, 8))
    _targets = _rng.standard_normal((6, 4))
    _traces = toy_forward_backward(_net, _inputs, _targets)

    _step = 1e-4
    for _trace in _traces:
        _acts = _trace.activations
        _fd = np.zeros_like(_acts)
        for _j in range(_acts.shape[1]):
            _shift = np.zeros(_acts.shape[1])
            _shift[_j] = _step
            _plus = _net.losses_from(_trace.layer, _acts + _shift, _targets)
            _minus = _net.losses_from(_trace.layer, _acts - _shift, _targets)
            _fd[:, _j] = (_plus - _minus) / (2.0 * _step)
        assert np.max(np.abs(_fd - _trace.gradients)) <= 1e-6


def test_toy_shape_checks():
    _net = ToyNet.random([4, 3])
    with pytest.raises(DimensionMismatchError):
        toy_forward_backward(_net, np.zeros((2, 5)), np.zeros((2, 3)))
    with pytest.raises(DimensionMismatchError):
        toy_forward_backward(_net, np.zeros((2, 4)), np.zeros((3, 3)))
    with pytest.raises(DimensionMismatchError):
        ToyNet([np.zeros((3, 4)), np.zeros((2, 5))])
    with pytest.raises(ValueError):
        ToyNet([np.zeros((3, 4))], nonlinearity="sigmoid")


def test_fim_matches_hessian_at_optimum():
    _net, _inputs, _targets, _w = _optimal_linear_net()

    assert fim_hessian_overlap(_net, _inputs, _targets, layer=0, k=4) >= 0.9

    _g = toy_forward_backward(_net, _inputs, _targets)[0].gradients
    _fisher = _g.T @ _g / _inputs.shape[0]
    assert top_eigen_overlap(_fisher, 2.0 * _w.T @ _w, 4) >= 0.9


def test_fim_full_rank_overlap_is_one():
    _net, _inputs, _targets, _ = _optimal_linear_net(width=6, n=256)
    assert fim_hessian_overlap(_net, _inputs, _targets, layer=0, k=6) == pytest.approx(1.0)


def test_fim_far_from_optimum_is_reported():
    _net = ToyNet.random([8, 8, 4], seed=3)
    _rng = np.random.default_rng(4)
    _inputs = _rng.standard_normal((256, 8))
    _targets = _rng.standard_normal((256, 4)) + 5.0

    _overlap = fim_hessian_overlap(_net, _inputs, _targets, layer=1, k=2)
    _gap = fim_hessian_quadratic_gap(_net, _inputs, _targets, layer=1, k=2)
    assert 0.0 <= _overlap <= 1.0
    assert np.isfinite(_gap) and _gap >= 0.0


def test_fim_width_guard():
    _width = MAX_HESSIAN_WIDTH + 1
    _net = ToyNet.random([_width, 2])
    with pytest.raises(ValueError):
        fim_hessian_overlap(_net, np.zeros((4, _width)), np.zeros((4, 2)), layer=0, k=1)


def test_threshold_sweep_monotone():
    _layers = planted_layers(d=16, n=2048)
    _report = threshold_sweep(_layers, rank_fraction=0.5, thresholds=[0.0, 0.1, 0.3, 0.5, 1.01])
    _by_threshold = {_t.threshold: _t for _t in _report.thresholds}

    assert _by_threshold[0.0].fasc_layers == [0, 1, 2, 3, 4, 5, 6]
    assert _by_threshold[1.01].fasc_layers == []
    assert _report.layers_monotone
    assert _report.j_monotone
    _counts = [_by_threshold[_t].n_fasc for _t in (0.0, 0.1, 0.3, 0.5, 1.01)]
    assert _counts == sorted(_counts, reverse=True)
    assert len(_report.records) == 8 * 5


def test_threshold_sweep_without_exclusion():
    _layers = planted_layers(d=16, n=1024, gains=[1.0, 2.0, 3.0])
    _report = threshold_sweep(_layers, thresholds=[0.0, 1.01], exclude_layers=False)

    assert _report.thresholds[0].fasc_layers == [0, 1, 2]
    assert "compression_seconds" not in _report.to_dict(include_timings=False)["thresholds"][0]


def test_threshold_sweep_needs_two_of_each():
    _layers = planted_layers(d=8, n=256, gains=[1.0, 2.0])
    with pytest.raises(ValueError):
        threshold_sweep(_layers[:1], thresholds=[0.1, 0.3])
    with pytest.raises(ValueError):
        threshold_sweep(_layers, thresholds=[0.3])


def test_gain_correlation_on_ramp():
    _report = layer_gain_experiment(planted_layers(d=16, n=2048), rank_fraction=0.5)

    assert _report.correlation > 0.5
    assert _report.top_mean_gain > _report.bottom_mean_gain
    assert all(_row["gain"] > 0.0 for _row in _report.rows)
    assert _report.flags == []


def test_gain_identical_layers_flagged():
    _pair = generate_planted(balanced_spec(8, 1.0, n=512))
    _report = layer_gain_experiment([_pair] * 4)

    assert _report.correlation is None
    assert "undefined_correlation" in _report.flags


def _uncoupled_layers(d, n, count=4):
    return [
        generate_planted(
            PlantedSpec(d=d, planted_axes=(), variances=[1.0] * d, gradient_gain=0.0, noise=1.0, n=n, seed=_s, layer_id=_s)
        )
        for _s in range(count)
    ]


def test_gain_vanishes_without_coupling():
    # Without coupling the only gain left is finite-sample bias: SVD keeps the
    # directions whose sample variance came out high, FASC's whitening leans
    # the other way. Both shrink like sqrt(d / n).
    _d = 8
    _relative = {}
    for _n in (1024, 16384):
        _rows = layer_gain_experiment(_uncoupled_layers(_d, _n)).rows
        _relative[_n] = float(np.mean([_row["gain"] / _row["J_svd"] for _row in _rows]))
        assert abs(_relative[_n]) <= 4.0 * np.sqrt(_d / _n)

    assert abs(_relative[16384]) < 0.6 * abs(_relative[1024])


def test_rank_sweep_full_rank_lossless():
    _xs, _gs = generate_planted(balanced_spec(8, 2.0, n=512))
    _rows = rank_sweep(_xs, _gs, rank_fractions=(0.5, 1.0))

    assert [_r["k"] for _r in _rows] == [4, 8]
    assert set(_rows[0]["J"]) == {"svd", "fasc", "grad_weighted", "fisher_diag"}
    assert _rows[0]["J"]["fasc"] < _rows[0]["J"]["svd"]
    for _j in _rows[1]["J"].values():
        assert _j == pytest.approx(0.0, abs=1e-12)


def test_calibration_size_study():
    _rng = np.random.default_rng(12)
    _x = _rng.standard_normal((4096, 16))
    _rows = calibration_size_study(*make_pair(_x, _x + _rng.standard_normal((4096, 16))), resamples=200)

    assert [_r["n"] for _r in _rows] == [1024, 2048, 4096]
    assert _rows[0]["width"] > _rows[1]["width"] > _rows[2]["width"]
    with pytest.raises(ValueError):
        calibration_size_study(*make_pair(_x[:100], _x[:100]), sizes=(200,))


def test_write_fixture(ramp_manifest):
    _manifest = read_manifest(ramp_manifest)

    assert _manifest.calibration_tag == "ramp"
    assert _manifest.layer_ids() == list(range(8))
    assert all(_e.d == 16 and _e.n == 2048 for _e in _manifest.layers)
