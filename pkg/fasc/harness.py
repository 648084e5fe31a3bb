#
#   FASC Toolkit - Desk-Scale Harness
#
#   Synthetic calibration data with planted low-variance / high-gradient axes,
#   an analytic toy network with exact activation gradients, and the layer
#   experiments (threshold sweep, rho-gain correlation, rank sweep,
#   calibration-size study, FIM-Hessian overlap).
#
#   Note: "gain" here is the reduction in the loss surrogate J, i.e.
#   J_svd - J_fasc. It is not a benchmark accuracy.
#
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .compress import (
    Method,
    Subspace,
    fasc_subspace,
    fisher_diag_subspace,
    grad_weighted_subspace,
    objective_J,
    rank_for_fraction,
    sorted_eigh,
    svd_subspace,
)
from .diagnostics import (
    Gate,
    RhoReport,
    degenerate_report,
    gate_layer,
    rho_bootstrap,
    rho_correlation,
    rho_score,
)
from .errors import DegenerateGradientsError, DimensionMismatchError, FascError, UndefinedCorrelationError
from .sketch import subspace_overlap
from .stats import covariance_from_blocks
from .tensorio import (
    KIND_ACTIVATION,
    KIND_GRADIENT,
    LayerEntry,
    Manifest,
    TensorBlock,
    file_crc,
    write_manifest,
    write_tensor,
)


MAX_HESSIAN_WIDTH = 64
FD_STEP = 1e-4


@dataclass(frozen=True)
class PlantedSpec:
    """
    Activations have variance variance_low on planted_axes and variance_high
    elsewhere (or per-axis `variances` when given). Gradients are
    gradient_gain * x on the planted axes plus noise * N(0, 1) on every axis.
    """

    d: int
    planted_axes: Tuple[int, ...]
    variance_high: float = 10.0
    variance_low: float = 0.1
    gradient_gain: float = 100.0
    noise: float = 0.01
    n: int = 4096
    seed: int = 0
    layer_id: int = 0
    variances: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "planted_axes", tuple(int(_a) for _a in self.planted_axes))
        if self.d < 1 or self.n < 1:
            raise ValueError(f"Need d >= 1 and n >= 1, got d={self.d}, n={self.n}")
        if len(set(self.planted_axes)) != len(self.planted_axes):
            raise ValueError("Planted axes must be distinct")
        if any(not 0 <= _a < self.d for _a in self.planted_axes):
            raise ValueError(f"Planted axes {self.planted_axes} fall outside [0, {self.d})")
        if not self.variance_low < self.variance_high:
            raise ValueError("variance_low must be below variance_high")
        if self.gradient_gain < 0 or self.noise < 0:
            raise ValueError("gradient_gain and noise must be non-negative")
        if self.variances is not None:
            object.__setattr__(self, "variances", tuple(float(_v) for _v in self.variances))
            if len(self.variances) != self.d or min(self.variances) < 0:
                raise ValueError(f"Need {self.d} non-negative variances")

    def axis_variances(self):
        if self.variances is not None:
            return np.array(self.variances)
        _var = np.full(self.d, self.variance_high)
        _var[list(self.planted_axes)] = self.variance_low
        return _var


def generate_planted(spec):
    """ Draw (activations, gradients) TensorBlocks for one planted layer """
    _rng = np.random.default_rng(spec.seed)
    _x = _rng.standard_normal((spec.n, spec.d)) * np.sqrt(spec.axis_variances())
    _g = _rng.standard_normal((spec.n, spec.d)) * spec.noise

    _axes = list(spec.planted_axes)
    _g[:, _axes] += spec.gradient_gain * _x[:, _axes]

    return (
        TensorBlock(layer_id=spec.layer_id, kind=KIND_ACTIVATION, data=_x),
        TensorBlock(layer_id=spec.layer_id, kind=KIND_GRADIENT, data=_g),
    )


def layer_seed(master_seed, layer_id):
    """ Independent per-layer seed derived from the master seed """
    return int(np.random.SeedSequence([int(master_seed), int(layer_id)]).generate_state(1)[0])


def balanced_spec(d, gain, n=4096, seed=0, layer_id=0, noise=1.0):
    """
    Planted layer with the upper half of the axes planted at variance 0.5
    against 1.0 elsewhere. rho rises with the gain (about 0.3 at gain 0.75,
    0.6 at gain 3) while SVD keeps discarding the planted half.
    """
    return PlantedSpec(
        d=d,
        planted_axes=tuple(range(d - d // 2, d)),
        variance_high=1.0,
        variance_low=0.5,
        gradient_gain=gain,
        noise=noise,
        n=n,
        seed=seed,
        layer_id=layer_id,
    )


def planted_layers(d=64, n=4096, gains=None, seed=0, noise=1.0):
    """ One balanced planted layer per gain; layer i gets its own RNG stream """
    if gains is None:
        gains = np.linspace(0.75, 3.0, 8)
    return [
        generate_planted(balanced_spec(d, float(_gain), n=n, seed=layer_seed(seed, _i), layer_id=_i, noise=noise))
        for _i, _gain in enumerate(gains)
    ]


def write_fixture(layers, out_dir, tag="synthetic", layer_kinds=None):
    """ Write (xs, gs) pairs and a manifest into out_dir; returns the manifest path """
    os.makedirs(out_dir, exist_ok=True)
    _entries = []
    for _i, (_xs, _gs) in enumerate(layers):
        _act = f"layer{_xs.layer_id:03d}_act.fasc"
        _grad = f"layer{_xs.layer_id:03d}_grad.fasc"
        write_tensor(_xs, os.path.join(out_dir, _act))
        write_tensor(_gs, os.path.join(out_dir, _grad))
        _entries.append(
            LayerEntry(
                layer_id=_xs.layer_id,
                activation=_act,
                gradient=_grad,
                d=_xs.d,
                n=_xs.n,
                layer_kind=layer_kinds[_i] if layer_kinds else "mlp",
                activation_crc=file_crc(os.path.join(out_dir, _act)),
                gradient_crc=file_crc(os.path.join(out_dir, _grad)),
            )
        )

    _path = os.path.join(out_dir, "manifest.json")
    write_manifest(Manifest(layers=_entries, calibration_tag=tag), _path)
    return _path


#
#   Toy network
#

def _activate(z, nonlinearity):
    if nonlinearity == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_prime(z, nonlinearity):
    if nonlinearity == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return (z > 0.0).astype(np.float64)


class ToyNet(object):
    """
    Bias-free feed-forward net. weights[l] has shape (sizes[l+1], sizes[l]);
    hidden layers apply the nonlinearity, the output layer is linear, and the
    per-sample loss is the squared error ||y - t||^2.
    """

    def __init__(self, weights, nonlinearity="tanh"):
        if nonlinearity not in ("tanh", "relu"):
            raise ValueError(f"Unknown nonlinearity {nonlinearity}")
        if len(weights) < 1:
            raise ValueError("ToyNet needs at least one layer")

        self.weights = [np.array(_w, dtype=np.float64) for _w in weights]
        self.nonlinearity = nonlinearity

        for _i, _w in enumerate(self.weights):
            if _w.ndim != 2 or not np.all(np.isfinite(_w)):
                raise ValueError(f"Layer {_i} weights must be a finite 2D array")
            if _i > 0 and _w.shape[1] != self.weights[_i - 1].shape[0]:
                raise DimensionMismatchError(
                    f"Layer {_i} expects width {_w.shape[1]}, previous layer gives {self.weights[_i - 1].shape[0]}"
                )

    @classmethod
    def random(cls, sizes, nonlinearity="tanh", seed=0, scale=1.0):
        _rng = np.random.default_rng(seed)
        _weights = [
            _rng.standard_normal((sizes[_i + 1], sizes[_i])) * scale / np.sqrt(sizes[_i])
            for _i in range(len(sizes) - 1)
        ]
        return cls(_weights, nonlinearity=nonlinearity)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [_w.shape[0] for _w in self.weights]

    @property
    def depth(self):
        return len(self.weights)

    def forward_from(self, layer, acts):
        """ Pre-activations and outputs running the net from the input of `layer` """
        _a = acts
        _zs = []
        for _l in range(layer, self.depth):
            _z = _a @ self.weights[_l].T
            _zs.append(_z)
            _a = _activate(_z, self.nonlinearity) if _l < self.depth - 1 else _z
        return _zs, _a

    def losses_from(self, layer, acts, targets):
        _zs, _y = self.forward_from(layer, acts)
        return np.sum((_y - targets) ** 2, axis=1)

    def gradients_from(self, layer, acts, targets):
        """ Per-sample gradients of the loss w.r.t. every layer input from `layer` on """
        _zs, _y = self.forward_from(layer, acts)
        _delta = 2.0 * (_y - targets)
        _grads = {}
        for _l in range(self.depth - 1, layer - 1, -1):
            _grad_a = _delta @ self.weights[_l]
            _grads[_l] = _grad_a
            if _l > layer:
                _delta = _grad_a * _activate_prime(_zs[_l - 1 - layer], self.nonlinearity)
        return _grads

    def check_shapes(self, inputs, targets):
        if inputs.ndim != 2 or inputs.shape[1] != self.sizes[0]:
            raise DimensionMismatchError(f"Inputs {inputs.shape} do not match input width {self.sizes[0]}")
        if targets.shape != (inputs.shape[0], self.sizes[-1]):
            raise DimensionMismatchError(f"Targets {targets.shape} do not match outputs ({inputs.shape[0]}, {self.sizes[-1]})")


@dataclass(frozen=True, eq=False)
class LayerTrace:
    layer: int
    activations: np.ndarray
    gradients: np.ndarray


def toy_forward_backward(net, inputs, targets):
    """ Per-layer input activations and exact per-sample loss gradients w.r.t. them """
    _inputs = np.asarray(inputs, dtype=np.float64)
    _targets = np.asarray(targets, dtype=np.float64)
    net.check_shapes(_inputs, _targets)

    _zs, _ = net.forward_from(0, _inputs)
    _acts = [_inputs] + [_activate(_z, net.nonlinearity) for _z in _zs[:-1]]
    _grads = net.gradients_from(0, _inputs, _targets)

    return [LayerTrace(layer=_l, activations=_acts[_l], gradients=_grads[_l]) for _l in range(net.depth)]


def _layer_hessian(net, layer, acts, targets, step):
    """ Mean per-sample Hessian of the loss w.r.t. layer inputs, by central differences of the gradient """
    _d = acts.shape[1]
    _hessian = np.zeros((_d, _d))
    for _j in range(_d):
        _shift = np.zeros(_d)
        _shift[_j] = step
        _gp = net.gradients_from(layer, acts + _shift, targets)[layer]
        _gm = net.gradients_from(layer, acts - _shift, targets)[layer]
        _hessian[:, _j] = np.mean((_gp - _gm) / (2.0 * step), axis=0)
    _hessian = 0.5 * (_hessian + _hessian.T)
    if not np.all(np.isfinite(_hessian)):
        raise FascError(f"Non-finite finite-difference Hessian at layer {layer}")
    return _hessian


def _fisher_and_hessian(net, inputs, targets, layer, step):
    _inputs = np.asarray(inputs, dtype=np.float64)
    _targets = np.asarray(targets, dtype=np.float64)
    net.check_shapes(_inputs, _targets)
    if not 0 <= layer < net.depth:
        raise ValueError(f"Layer {layer} outside [0, {net.depth})")

    _width = net.sizes[layer]
    if _width > MAX_HESSIAN_WIDTH:
        raise ValueError(f"Layer width {_width} too large for a finite-difference Hessian (max {MAX_HESSIAN_WIDTH})")

    _trace = toy_forward_backward(net, _inputs, _targets)[layer]
    _fisher = _trace.gradients.T @ _trace.gradients / _inputs.shape[0]
    _hessian = _layer_hessian(net, layer, _trace.activations, _targets, step)
    return _fisher, _hessian


def top_eigen_overlap(a, b, k):
    """ Overlap of the top-k eigenspaces of two symmetric matrices """
    _wa, _va = sorted_eigh(a)
    _wb, _vb = sorted_eigh(b)
    _d = a.shape[0]
    return subspace_overlap(
        Subspace(d=_d, k=k, basis=_va[:, :k], eigenvalues=np.abs(_wa[:k]), method=Method.SVD),
        Subspace(d=_d, k=k, basis=_vb[:, :k], eigenvalues=np.abs(_wb[:k]), method=Method.SVD),
    )


def fim_hessian_overlap(net, inputs, targets, layer, k, step=FD_STEP):
    """
    Overlap between the top-k eigenspace of the empirical Fisher
    F = (1/n) sum g g^T and that of the finite-difference Hessian of the mean
    loss w.r.t. the activations entering `layer`.
    """
    _fisher, _hessian = _fisher_and_hessian(net, inputs, targets, layer, step)
    if not 1 <= k <= _fisher.shape[0]:
        raise ValueError(f"k={k} outside [1, {_fisher.shape[0]}]")
    _overlap = top_eigen_overlap(_fisher, _hessian, k)
    logging.info(f"Harness - FIM/Hessian top-{k} overlap at layer {layer}: {_overlap:.4f}")
    return _overlap


def fim_hessian_quadratic_gap(net, inputs, targets, layer, k, step=FD_STEP):
    """
    max |v^T H v - v^T F v| / max|eig(H)| over the top-k eigenvectors v of F.
    Reported only: F and H agree in direction near equilibrium, not in scale.
    """
    _fisher, _hessian = _fisher_and_hessian(net, inputs, targets, layer, step)
    _wf, _vf = sorted_eigh(_fisher)
    _top = _vf[:, :k]
    _gap = np.abs(np.einsum("ij,ik,kj->j", _top, _hessian, _top) - _wf[:k])
    _scale = max(float(np.max(np.abs(np.linalg.eigvalsh(_hessian)))), np.finfo(np.float64).tiny)
    return float(np.max(_gap) / _scale)


#
#   Layer experiments
#

@dataclass
class LayerSolution:
    layer_id: int
    n: int
    rho: float
    degenerate: bool
    j_svd: float
    j_fasc: Optional[float]
    svd_seconds: float
    fasc_seconds: float

    @property
    def gain(self):
        if self.j_fasc is None:
            return 0.0
        return self.j_svd - self.j_fasc

    def rho_report(self):
        if self.degenerate:
            return degenerate_report(self.layer_id, self.n)
        return RhoReport(layer_id=self.layer_id, rho=self.rho, ci_low=self.rho, ci_high=self.rho, n=self.n)


def solve_layer(xs, gs, rank_fraction, fasc_cfg=None):
    """ rho, SVD and exact FASC solutions and their J for one layer """
    _cov = covariance_from_blocks(xs, gs)
    _k = rank_for_fraction(rank_fraction, xs.d)

    try:
        _rho = rho_score(_cov)
        _degenerate = False
    except DegenerateGradientsError:
        _rho = 0.0
        _degenerate = True

    _t0 = time.perf_counter()
    _svd = svd_subspace(_cov, _k)
    _t1 = time.perf_counter()
    try:
        _fasc = fasc_subspace(_cov, _k, fasc_cfg)
        _j_fasc = objective_J(_fasc, xs, gs)
    except FascError as e:
        logging.warning(f"Harness - Layer {xs.layer_id}: FASC unavailable - {str(e)}")
        _j_fasc = None
    _t2 = time.perf_counter()

    return LayerSolution(
        layer_id=xs.layer_id,
        n=xs.n,
        rho=_rho,
        degenerate=_degenerate,
        j_svd=objective_J(_svd, xs, gs),
        j_fasc=_j_fasc,
        svd_seconds=_t1 - _t0,
        fasc_seconds=_t2 - _t1,
    )


@dataclass
class ThresholdResult:
    threshold: float
    fasc_layers: List[int]
    total_j: float
    compression_seconds: float

    @property
    def n_fasc(self):
        return len(self.fasc_layers)


@dataclass
class SweepReport:
    thresholds: List[ThresholdResult]
    records: List[Dict] = field(default_factory=list)
    layers_monotone: bool = True
    j_monotone: bool = True

    def to_dict(self, include_timings=True):
        _summary = []
        for _t in self.thresholds:
            _item = {"threshold": _t.threshold, "fasc_layers": _t.fasc_layers, "n_fasc": _t.n_fasc, "total_J": _t.total_j}
            if include_timings:
                _item["compression_seconds"] = _t.compression_seconds
            _summary.append(_item)
        return {
            "records": self.records,
            "thresholds": _summary,
            "layers_monotone": self.layers_monotone,
            "j_monotone": self.j_monotone,
        }


def threshold_sweep(
    layers,
    rank_fraction=0.5,
    thresholds=(0.1, 0.3, 0.5),
    exclude_layers=True,
    fasc_cfg=None,
    solutions=None,
    layer_kinds=None,
):
    """
    Gate every layer at each threshold and total the J of the deployed
    subspaces. Layers are solved once; per-threshold compression time is the
    sum of the solve times of the methods each layer would run.
    """
    if len(layers) < 2 or len(thresholds) < 2:
        raise ValueError("A sweep needs at least 2 layers and 2 thresholds")

    if solutions is None:
        solutions = [solve_layer(_xs, _gs, rank_fraction, fasc_cfg) for _xs, _gs in layers]
    _total_layers = len(solutions)

    _results = []
    _records = []
    for _threshold in thresholds:
        _fasc_layers = []
        _total_j = 0.0
        _seconds = 0.0
        for _position, _sol in enumerate(solutions):
            _gate = gate_layer(
                _sol.rho_report(),
                position=_position,
                total_layers=_total_layers,
                threshold=_threshold,
                layer_kind=layer_kinds[_position] if layer_kinds else "mlp",
                exclude_layers=exclude_layers,
            )
            if _gate == Gate.USE_FASC and _sol.j_fasc is not None:
                _fasc_layers.append(_sol.layer_id)
                _j = _sol.j_fasc
                _seconds += _sol.fasc_seconds
            else:
                _j = _sol.j_svd
                _seconds += _sol.svd_seconds
            _total_j += _j
            _records.append(
                {"layer_id": _sol.layer_id, "threshold": _threshold, "rho": _sol.rho, "gate": _gate.value, "J": _j}
            )
        _results.append(
            ThresholdResult(threshold=float(_threshold), fasc_layers=_fasc_layers, total_j=_total_j, compression_seconds=_seconds)
        )

    _ordered = sorted(_results, key=lambda _r: _r.threshold)
    _layers_monotone = all(
        set(_b.fasc_layers) <= set(_a.fasc_layers) for _a, _b in zip(_ordered, _ordered[1:])
    )
    _j_monotone = all(_b.total_j >= _a.total_j for _a, _b in zip(_ordered, _ordered[1:]))
    if not _layers_monotone:
        logging.warning("Harness - FASC layer sets are not nested across thresholds")

    return SweepReport(thresholds=_results, records=_records, layers_monotone=_layers_monotone, j_monotone=_j_monotone)


@dataclass
class GainReport:
    rows: List[Dict]
    correlation: Optional[float]
    top_mean_gain: float
    bottom_mean_gain: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "rows": self.rows,
            "correlation": self.correlation,
            "top_mean_gain": self.top_mean_gain,
            "bottom_mean_gain": self.bottom_mean_gain,
            "flags": self.flags,
        }


def layer_gain_experiment(layers, rank_fraction=0.5, fasc_cfg=None):
    """ Per-layer rho against the J reduction of FASC over SVD, with Pearson r """
    if len(layers) < 4:
        raise ValueError("The gain experiment needs at least 4 layers")

    _solutions = [solve_layer(_xs, _gs, rank_fraction, fasc_cfg) for _xs, _gs in layers]
    _rows = [
        {"layer_id": _s.layer_id, "rho": _s.rho, "J_svd": _s.j_svd, "J_fasc": _s.j_fasc, "gain": _s.gain}
        for _s in _solutions
    ]

    _flags = []
    try:
        _r = rho_correlation([_s.rho for _s in _solutions], [_s.gain for _s in _solutions])
    except UndefinedCorrelationError:
        logging.warning("Harness - rho/gain correlation undefined (constant input)")
        _flags.append("undefined_correlation")
        _r = None

    # Top and bottom 20% of layers by rho.
    _count = max(1, int(np.floor(0.2 * len(_solutions) + 0.5)))
    _by_rho = sorted(_solutions, key=lambda _s: _s.rho)
    _bottom = float(np.mean([_s.gain for _s in _by_rho[:_count]]))
    _top = float(np.mean([_s.gain for _s in _by_rho[-_count:]]))

    return GainReport(rows=_rows, correlation=_r, top_mean_gain=_top, bottom_mean_gain=_bottom, flags=_flags)


def rank_sweep(xs, gs, rank_fractions=(0.4, 0.5, 0.6, 0.8), fasc_cfg=None):
    """ J of all four methods across compression rates for one layer """
    _cov = covariance_from_blocks(xs, gs)
    _rows = []
    for _fraction in rank_fractions:
        _k = rank_for_fraction(_fraction, xs.d)
        _j = {}
        for _method, _build in (
            (Method.SVD, lambda: svd_subspace(_cov, _k)),
            (Method.FASC, lambda: fasc_subspace(_cov, _k, fasc_cfg)),
            (Method.GRAD_WEIGHTED, lambda: grad_weighted_subspace(xs, gs, _k)),
            (Method.FISHER_DIAG, lambda: fisher_diag_subspace(_cov, _k)),
        ):
            try:
                _j[_method.value] = objective_J(_build(), xs, gs)
            except FascError as e:
                logging.warning(f"Harness - {_method.value} at rank {_k} failed - {str(e)}")
                _j[_method.value] = None
        _rows.append({"rank_fraction": float(_fraction), "k": _k, "J": _j})
    return _rows


def head_block(block, n):
    """ First n samples of a block """
    return TensorBlock(layer_id=block.layer_id, kind=block.kind, data=block.data[:n])


def calibration_size_study(xs, gs, sizes=(1024, 2048, 4096), resamples=1000, seed=0):
    """ rho and bootstrap interval width using the first n samples, for each n """
    _rows = []
    for _n in sizes:
        if _n > xs.n:
            raise ValueError(f"Calibration size {_n} exceeds the {xs.n} available samples")
        _report = rho_bootstrap(head_block(xs, _n), head_block(gs, _n), resamples=resamples, seed=seed)
        _rows.append({"n": int(_n), "rho": _report.rho, "ci": [_report.ci_low, _report.ci_high], "width": _report.ci_width})
    return _rows
