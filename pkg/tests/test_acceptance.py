#
#   End-to-end checks on the d=64 planted fixtures.
#
import json

import numpy as np
import pytest

from fasc.cli import EXIT_OK, main
from fasc.compress import (
    fasc_subspace,
    fisher_diag_subspace,
    grad_weighted_subspace,
    objective_J,
    svd_subspace,
)
from fasc.harness import layer_gain_experiment, planted_layers
from fasc.sketch import SketchConfig, sketched_fasc_subspace
from fasc.stats import covariance_from_blocks


@pytest.fixture(scope="module")
def planted64():
    return planted_layers(d=64, n=4096, seed=0)


def test_fasc_dominates_on_every_planted_layer(planted64):
    for _xs, _gs in planted64:
        _cov = covariance_from_blocks(_xs, _gs)
        _j_fasc = objective_J(fasc_subspace(_cov, 32), _xs, _gs)
        _j_svd = objective_J(svd_subspace(_cov, 32), _xs, _gs)
        assert _j_fasc < _j_svd


def test_rho_tracks_gain_at_width_64(planted64):
    _report = layer_gain_experiment(planted64, rank_fraction=0.5)
    assert _report.correlation > 0.5


def test_projector_laws_for_every_method(planted64):
    _xs, _gs = planted64[3]
    _cov = covariance_from_blocks(_xs, _gs)
    _subspaces = [
        fasc_subspace(_cov, 16),
        svd_subspace(_cov, 16),
        grad_weighted_subspace(_xs, _gs, 16),
        fisher_diag_subspace(_cov, 16),
        sketched_fasc_subspace(_xs, _gs, 16, SketchConfig(m=32, seed=1)),
    ]
    for _s in _subspaces:
        _idem, _sym, _trace = _s.projector_errors()
        assert _idem <= 1e-10
        assert _sym <= 1e-12
        assert _trace <= 1e-8


def _strip_timings(path):
    with open(path) as _f:
        _report = json.load(_f)
    for _layer in _report["layers"]:
        _layer.pop("timings")
    return json.dumps(_report, sort_keys=True)


def test_compress_runs_are_reproducible(tmp_path):
    _fixture = tmp_path / "fixture"
    assert main(["synth", "--seed", "2", "--out", str(_fixture), "d=32", "n=1024"]) == EXIT_OK

    _outs = [tmp_path / "run1", tmp_path / "run2"]
    for _out in _outs:
        assert main(["compress", "--manifest", str(_fixture / "manifest.json"), "--seed", "2", "--out", str(_out)]) == EXIT_OK

    assert _strip_timings(_outs[0] / "run_report.json") == _strip_timings(_outs[1] / "run_report.json")
    with open(_outs[0] / "run_report.csv", "rb") as _a, open(_outs[1] / "run_report.csv", "rb") as _b:
        assert _a.read() == _b.read()
    assert np.isfinite(json.loads(_strip_timings(_outs[0] / "run_report.json"))["summary"]["total_J_selected"])
