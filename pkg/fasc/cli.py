#!/usr/bin/env python
#
#   FASC Toolkit - Command Line Interface
#
#   fasc rho      --manifest M [--resamples N] [--seed S] [--out DIR]
#   fasc compress --manifest M [--rank-frac F] [--rho-threshold T] [--exact-only] [--out DIR]
#   fasc synth    [key=value ...] [--seed S] [--out DIR]
#   fasc sweep    --manifest M [--thresholds a,b,c] [--rank-frac F] [--out DIR]
#   fasc angles   --manifest M [--rank-frac F] [--rho-threshold T] [--out DIR]
#
#   Exit codes: 0 ok, 1 usage error, 2 degraded run, 3 I/O error.
#
import argparse
import logging
import sys

import numpy as np

from . import __version__
from .config import read_config, setup_logging
from .diagnostics import (
    FLAG_DEGENERATE_COVARIANCE,
    RhoReport,
    apply_gate,
    degenerate_report,
    gate_layer,
    rho_bootstrap,
    rho_score,
)
from .errors import (
    DegenerateCovarianceError,
    DegenerateGradientsError,
    FascError,
    InsufficientSamplesError,
    ManifestError,
    TensorFormatError,
)
from .harness import PlantedSpec, generate_planted, layer_seed, planted_layers, threshold_sweep, write_fixture
from .pipeline import CSV_FIELDS, execute_run, plan_run, report_to_dict
from .reports import ReportWriter
from .stats import covariance_from_blocks
from .tensorio import load_layer, read_manifest


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGRADED = 2
EXIT_IO = 3

SYNTH_KINDS = ("planted", "coupled", "independent", "identical")

# Generator parameters accepted by `synth`, with their defaults.
SYNTH_DEFAULTS = {
    "d": 16,
    "n": 4096,
    "layers": 8,
    "kind": "planted",
    "planted": None,
    "var_high": 10.0,
    "var_low": 0.1,
    "noise": None,
    "gain": None,
    "gain_ramp": "0.75:3.0",
    "tag": "synthetic",
}


class UsageExitParser(argparse.ArgumentParser):
    """ ArgumentParser that exits with status 1 on usage errors """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def rank_fraction_arg(value):
    try:
        _value = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rank fraction {value!r}")
    if not 0 < _value <= 1:
        raise argparse.ArgumentTypeError(f"rank fraction must be in (0, 1], got {value}")
    return _value


def thresholds_arg(value):
    try:
        _values = [float(_v) for _v in value.split(",") if _v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid threshold list {value!r}")
    if len(_values) < 2:
        raise argparse.ArgumentTypeError("need at least 2 thresholds")
    return _values


def resamples_arg(value):
    try:
        _value = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid resample count {value!r}")
    if _value < 1:
        raise argparse.ArgumentTypeError("resamples must be >= 1")
    return _value


def build_parser():
    _defaults = read_config()

    parser = UsageExitParser(
        prog="fasc",
        description="Fisher-Aligned Subspace Compression toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _sub = parser.add_subparsers(dest="command", parser_class=UsageExitParser)
    _sub.required = True

    _common = UsageExitParser(add_help=False)
    _common.add_argument("--seed", type=int, default=_defaults["seed"], help="Master seed.")
    _common.add_argument("--out", type=str, default=".", help="Output directory.")

    _manifest = UsageExitParser(add_help=False)
    _manifest.add_argument("--manifest", type=str, required=True, help="Calibration manifest (JSON).")
    _manifest.add_argument(
        "--no-layer-exclusion",
        action="store_true",
        default=False,
        help="Do not exclude early attention layers and the final layer from FASC.",
    )

    _threshold = UsageExitParser(add_help=False)
    _threshold.add_argument(
        "--rho-threshold", type=float, default=_defaults["rho_threshold"], help="Layers with rho above this use FASC."
    )

    _rank = UsageExitParser(add_help=False)
    _rank.add_argument(
        "--rank-frac", type=rank_fraction_arg, default=_defaults["rank_fraction"], help="Retained rank as a fraction of d."
    )

    _exact = UsageExitParser(add_help=False)
    _exact.add_argument("--exact-only", action="store_true", default=False, help="Never use the randomized sketch.")

    _fmt = argparse.ArgumentDefaultsHelpFormatter

    _rho = _sub.add_parser(
        "rho", parents=[_common, _manifest, _threshold], formatter_class=_fmt, help="Per-layer rho with bootstrap CI."
    )
    _rho.add_argument(
        "--resamples", type=resamples_arg, default=_defaults["resamples"], help="Bootstrap resamples."
    )

    _sub.add_parser(
        "compress",
        parents=[_common, _manifest, _threshold, _rank, _exact],
        formatter_class=_fmt,
        help="Gate, compress and score every layer.",
    )

    _synth = _sub.add_parser(
        "synth", parents=[_common], formatter_class=_fmt, help="Write a synthetic fixture manifest."
    )
    _synth.add_argument(
        "params",
        nargs="*",
        metavar="key=value",
        help=f"Generator parameters: {', '.join(SYNTH_DEFAULTS)}. kind is one of {', '.join(SYNTH_KINDS)}.",
    )

    _sweep = _sub.add_parser(
        "sweep", parents=[_common, _manifest, _rank], formatter_class=_fmt, help="Threshold sensitivity sweep."
    )
    _sweep.add_argument(
        "--thresholds", type=thresholds_arg, default=[0.1, 0.3, 0.5], help="Comma separated rho thresholds."
    )

    _sub.add_parser(
        "angles",
        parents=[_common, _manifest, _threshold, _rank, _exact],
        formatter_class=_fmt,
        help="FASC vs SVD principal angles per layer.",
    )

    return parser


def parse_synth_params(tokens):
    """ key=value tokens into a typed parameter dict; raises ValueError on bad input """
    _params = dict(SYNTH_DEFAULTS)
    _given = set()
    for _token in tokens:
        if "=" not in _token:
            raise ValueError(f"expected key=value, got {_token!r}")
        _key, _value = _token.split("=", 1)
        if _key not in SYNTH_DEFAULTS:
            raise ValueError(f"unknown synth parameter {_key!r}")
        _given.add(_key)
        if _key in ("d", "n", "layers"):
            _params[_key] = int(_value)
        elif _key in ("var_high", "var_low", "noise", "gain"):
            _params[_key] = float(_value)
        elif _key == "planted":
            _params[_key] = tuple(int(_a) for _a in _value.split(",") if _a.strip() != "")
        elif _key == "gain_ramp":
            _lo, _hi = _value.split(":")
            _params[_key] = f"{float(_lo)}:{float(_hi)}"
        else:
            _params[_key] = _value

    if _params["kind"] not in SYNTH_KINDS:
        raise ValueError(f"kind must be one of {', '.join(SYNTH_KINDS)}")
    if _params["d"] < 1 or _params["n"] < 2 or _params["layers"] < 1:
        raise ValueError("need d >= 1, n >= 2 and layers >= 1")
    _params["explicit"] = bool(_given & {"planted", "gain", "var_high", "var_low"})
    return _params


def synth_layers(params, seed):
    """ (xs, gs) pairs for every layer of a synthetic fixture """
    _d = params["d"]
    _count = params["layers"]

    if params["kind"] == "planted" and not params["explicit"]:
        _lo, _hi = (float(_v) for _v in params["gain_ramp"].split(":"))
        _noise = 1.0 if params["noise"] is None else params["noise"]
        return planted_layers(d=_d, n=params["n"], gains=np.linspace(_lo, _hi, _count), seed=seed, noise=_noise)

    _ones = tuple([1.0] * _d)
    _layers = []
    for _i in range(_count):
        if params["kind"] == "planted":
            _spec = PlantedSpec(
                d=_d,
                planted_axes=params["planted"] if params["planted"] is not None else (_d - 1,),
                variance_high=params["var_high"],
                variance_low=params["var_low"],
                gradient_gain=100.0 if params["gain"] is None else params["gain"],
                noise=0.01 if params["noise"] is None else params["noise"],
                n=params["n"],
                seed=layer_seed(seed, _i),
                layer_id=_i,
            )
        elif params["kind"] == "coupled":
            _spec = PlantedSpec(
                d=_d, planted_axes=range(_d), variances=_ones, gradient_gain=1.0 if params["gain"] is None else params["gain"],
                noise=1.0 if params["noise"] is None else params["noise"], n=params["n"], seed=layer_seed(seed, _i), layer_id=_i,
            )
        elif params["kind"] == "independent":
            _spec = PlantedSpec(
                d=_d, planted_axes=(), variances=_ones, gradient_gain=0.0,
                noise=1.0 if params["noise"] is None else params["noise"], n=params["n"], seed=layer_seed(seed, _i), layer_id=_i,
            )
        else:
            # g == x exactly
            _spec = PlantedSpec(
                d=_d, planted_axes=range(_d), variances=_ones, gradient_gain=1.0, noise=0.0,
                n=params["n"], seed=layer_seed(seed, _i), layer_id=_i,
            )
        _layers.append(generate_planted(_spec))
    return _layers


def layer_rho_report(xs, gs, config):
    """
    Bootstrapped RhoReport for one layer. Layers too small to bootstrap get
    a point estimate; degenerate layers get a flagged report with rho 0.
    """
    _norm = config["degenerate_gradient_norm"]
    try:
        try:
            return rho_bootstrap(
                xs, gs, resamples=config["resamples"], seed=config["seed"], threads=config["threads"], degenerate_norm=_norm
            )
        except InsufficientSamplesError as e:
            logging.warning(f"CLI - Layer {xs.layer_id}: {str(e)}, reporting the point estimate only")
            _rho = rho_score(covariance_from_blocks(xs, gs), degenerate_norm=_norm)
            return RhoReport(layer_id=xs.layer_id, rho=_rho, ci_low=_rho, ci_high=_rho, n=xs.n)
    except DegenerateGradientsError as e:
        logging.warning(f"CLI - Layer {xs.layer_id}: {str(e)}")
        return degenerate_report(xs.layer_id, xs.n)
    except DegenerateCovarianceError as e:
        logging.warning(f"CLI - Layer {xs.layer_id}: {str(e)}")
        return degenerate_report(xs.layer_id, xs.n, flag=FLAG_DEGENERATE_COVARIANCE)


def rho_records(manifest, config):
    """ One gated RhoReport per layer, bootstrapped """
    _reports = []
    for _position, _entry in enumerate(manifest.layers):
        _xs, _gs = load_layer(manifest, _entry)
        _report = layer_rho_report(_xs, _gs, config)

        _gate = gate_layer(
            _report,
            position=_position,
            total_layers=len(manifest.layers),
            threshold=config["rho_threshold"],
            layer_kind=_entry.layer_kind,
            exclude_layers=config["exclude_layers"],
        )
        _reports.append(apply_gate(_report, _gate))
    return _reports


def cmd_rho(args, config):
    _manifest = read_manifest(args.manifest)
    if not _manifest.layers:
        raise ManifestError("empty manifest")

    _reports = rho_records(_manifest, config)
    ReportWriter(args.out).write_json(
        "rho_report.json",
        {"calibration_tag": _manifest.calibration_tag, "resamples": config["resamples"], "seed": config["seed"],
         "layers": [_r.to_dict() for _r in _reports]},
    )

    for _r in _reports:
        logging.info(f"CLI - Layer {_r.layer_id}: rho={_r.rho:.4f} CI [{_r.ci_low:.4f}, {_r.ci_high:.4f}] {_r.gate.value}")

    return EXIT_DEGRADED if any(_r.degenerate for _r in _reports) else EXIT_OK


def _run(args, config):
    _manifest = read_manifest(args.manifest)
    _plans = plan_run(_manifest, args.rank_frac, config["rho_threshold"], config["seed"], config=config)
    return _manifest, execute_run(_plans, _manifest, config=config)


def cmd_compress(args, config):
    _manifest, _report = _run(args, config)

    _writer = ReportWriter(args.out)
    _writer.write_json("run_report.json", report_to_dict(_report, include_timings=True))
    _writer.write_csv("run_report.csv", _report.csv_rows(), CSV_FIELDS)

    return EXIT_DEGRADED if _report.degraded else EXIT_OK


def cmd_synth(args, config):
    _params = parse_synth_params(args.params)
    _layers = synth_layers(_params, config["seed"])
    _path = write_fixture(_layers, args.out, tag=_params["tag"])
    logging.info(f"CLI - Wrote {len(_layers)} {_params['kind']} layers (d={_params['d']}, n={_params['n']}) to {_path}")
    return EXIT_OK


def cmd_sweep(args, config):
    _manifest = read_manifest(args.manifest)
    if not _manifest.layers:
        raise ManifestError("empty manifest")

    _layers = [load_layer(_manifest, _entry) for _entry in _manifest.layers]
    _report = threshold_sweep(
        _layers,
        rank_fraction=args.rank_frac,
        thresholds=args.thresholds,
        exclude_layers=config["exclude_layers"],
        layer_kinds=[_entry.layer_kind for _entry in _manifest.layers],
    )

    _out = _report.to_dict(include_timings=True)
    _out["calibration_tag"] = _manifest.calibration_tag
    _out["rank_fraction"] = args.rank_frac
    ReportWriter(args.out).write_json("sweep_report.json", _out)

    return EXIT_OK


def cmd_angles(args, config):
    _manifest, _report = _run(args, config)
    _rhos = {_r.layer_id: _r for _r in rho_records(_manifest, config)}

    _layers = []
    for _result in _report.layers:
        _record = _rhos[_result.plan.layer_id].to_dict()
        _record["angles_deg"] = _result.angles_deg
        _record["median_angle_deg"] = _result.median_angle_deg
        _layers.append(_record)

    ReportWriter(args.out).write_json(
        "angles_report.json", {"calibration_tag": _manifest.calibration_tag, "layers": _layers}
    )

    if _report.degraded or any(_r.degenerate for _r in _rhos.values()):
        return EXIT_DEGRADED
    return EXIT_OK


COMMANDS = {
    "rho": cmd_rho,
    "compress": cmd_compress,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "angles": cmd_angles,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    _overrides = {"seed": args.seed}
    if hasattr(args, "no_layer_exclusion"):
        _overrides["exclude_layers"] = not args.no_layer_exclusion
    if hasattr(args, "rho_threshold"):
        _overrides["rho_threshold"] = args.rho_threshold
    if hasattr(args, "rank_frac"):
        _overrides["rank_fraction"] = args.rank_frac
    if hasattr(args, "resamples"):
        _overrides["resamples"] = args.resamples
    if hasattr(args, "exact_only"):
        _overrides["exact_only"] = args.exact_only

    config = read_config(_overrides)
    setup_logging(config)
    logging.debug(f"CLI - fasc {__version__}, config: {config}")

    try:
        if args.command == "synth":
            try:
                return cmd_synth(args, config)
            except ValueError as e:
                parser.error(f"synth: {str(e)}")
        return COMMANDS[args.command](args, config)
    except (OSError, TensorFormatError, ManifestError) as e:
        logging.error(f"CLI - {str(e)}")
        return EXIT_IO
    except FascError as e:
        logging.error(f"CLI - {type(e).__name__}: {str(e)}")
        return EXIT_DEGRADED


if __name__ == "__main__":
    sys.exit(main())
