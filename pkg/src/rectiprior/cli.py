"""Batch command-line interface.

Subcommands: infer, rectify, bench, diagnose, generate.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .diagnostics import predict_centering_bias, labeled_erm, mixed_erm, sandwich
from .exceptions import (
    ConvergenceError,
    IngestionError,
    OutcomeTypeError,
    ParameterError,
    RankDeficiencyError,
    RectipriorError,
)
from .harness import (
    RunConfig,
    ScenarioSpec,
    generate_scenario,
    load_base_csv,
    load_labeled_csv,
    run_bench,
    serialize_bench,
    format_bench_summary,
    write_base_csv,
    write_labeled_csv,
)
from .losses import (
    LinearRegressionLoss,
    MeanLoss,
    MlpLoss,
    MultinomialLogisticLoss,
    QuantileLoss,
)
from .posterior import PriorConfig, run_posterior, serialize_run, summarize_run
from .rectifiers import (
    Fixed,
    Identity,
    Isotonic,
    MomentAffine,
    MomentShift,
    Npb,
    ProbRecalib,
    QuantileMap,
    Split,
    apply_rectifier,
    fit_rectifier,
    serialize_rectifier,
)

_RECTIFIERS = {
    "identity": Identity,
    "quantile-map": QuantileMap,
    "isotonic": Isotonic,
    "moment-shift": MomentShift,
    "moment-affine": MomentAffine,
    "prob-recalib": ProbRecalib,
}

_STRATEGIES = {"fixed": Fixed, "npb": Npb}


class UsageError(Exception):
    pass


def _build_loss(args):
    name = args.loss
    if name == "mean":
        return MeanLoss()
    if name == "quantile":
        return QuantileLoss(tau=args.tau)
    if name == "ols":
        return LinearRegressionLoss()
    if name == "logistic":
        if args.classes is None:
            raise UsageError("--classes is required for the logistic loss")
        return MultinomialLogisticLoss(num_classes=args.classes)
    if name == "mlp":
        if args.classes is None:
            raise UsageError("--classes is required for the mlp loss")
        return MlpLoss(hidden=args.hidden, num_classes=args.classes, seed=args.seed)
    raise UsageError(f"unknown loss {name!r}")


def _build_strategy(args):
    name = args.strategy
    if name in _STRATEGIES:
        return _STRATEGIES[name]()
    if name == "split":
        return Split()
    raise UsageError(f"unknown strategy {name!r}")


def _build_scenario(args):
    return ScenarioSpec(tag=args.scenario, n=args.n, n_unlabeled=args.n_unlabeled,
                        noise=args.noise, miscal=args.miscal, miscal2=args.miscal2,
                        num_classes=args.classes or 3, seed=args.seed)


def _load_data(args, loss):
    if args.scenario is not None:
        labeled, base, _ = generate_scenario(_build_scenario(args), loss)
        return labeled, base
    if args.labeled is None:
        raise UsageError("either --labeled or --scenario is required")
    labeled = load_labeled_csv(args.labeled, num_classes=args.classes)
    base = load_base_csv(args.base) if args.base else None
    return labeled, base


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"malformed config line {line!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_common(p):
    p.add_argument("--labeled", help="labeled sample CSV")
    p.add_argument("--base", help="base measure CSV")
    p.add_argument("--scenario", choices=("gaussian-shift", "monotone-distortion",
                                          "heteroscedastic-linear", "categorical-miscalibrated"))
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--n-unlabeled", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--miscal", type=float, default=1.0)
    p.add_argument("--miscal2", type=float, default=0.5)
    p.add_argument("--loss", default="mean",
                   choices=("mean", "quantile", "ols", "logistic", "mlp"))
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--classes", type=int)
    p.add_argument("--hidden", type=int, default=20)
    p.add_argument("--rectifier", default="quantile-map", choices=sorted(_RECTIFIERS))
    p.add_argument("--strategy", default="npb", choices=("fixed", "split", "npb"))
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--draws", type=int, default=500)
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="output file path (or prefix for generate)")
    p.add_argument("--config", help="flat key = value config file; flags take precedence")


def _make_parser():
    parser = argparse.ArgumentParser(prog="rectiprior",
                                     description="Rectified AI-powered Bayesian inference")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
            ("infer", "posterior bootstrap run with credible intervals"),
            ("rectify", "fit a rectifier and write its serialized form"),
            ("bench", "replication benchmark over the four methods"),
            ("diagnose", "sandwich covariance and centering-bias report"),
            ("generate", "write synthetic scenario CSV files")]:
        _add_common(sub.add_parser(name, help=helptext))
    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    values = _read_config_file(argv[i + 1])
    extra = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if flag not in argv:
            extra.extend([flag, value])
    return argv + extra


def _cmd_infer(args):
    loss = _build_loss(args)
    labeled, base = _load_data(args, loss)
    config = PriorConfig(gamma=args.gamma, draws=args.draws, level=args.level,
                         strategy=_build_strategy(args),
                         rectifier=_RECTIFIERS[args.rectifier](),
                         seed=args.seed, threads=args.threads)
    run = run_posterior(labeled, base, loss, config)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(serialize_run(run))
    print(summarize_run(run))
    return 0


def _cmd_rectify(args):
    loss = _build_loss(args)
    labeled, base = _load_data(args, loss)
    if base is None:
        raise UsageError("rectify requires a base measure")
    fitted = fit_rectifier(_RECTIFIERS[args.rectifier](), labeled, base)
    text = serialize_rectifier(fitted)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return 0


def _cmd_bench(args):
    loss = _build_loss(args)
    if args.scenario is not None:
        config = RunConfig(loss=loss, scenario=_build_scenario(args),
                           rectifier=_RECTIFIERS[args.rectifier](),
                           strategy=_build_strategy(args), gamma=args.gamma,
                           draws=args.draws, level=args.level,
                           replications=args.replications, seed=args.seed,
                           threads=args.threads)
    else:
        labeled, base = _load_data(args, loss)
        config = RunConfig(loss=loss, labeled=labeled, base=base, n=args.n,
                           rectifier=_RECTIFIERS[args.rectifier](),
                           strategy=_build_strategy(args), gamma=args.gamma,
                           draws=args.draws, level=args.level,
                           replications=args.replications, seed=args.seed,
                           threads=args.threads)
    records = run_bench(config)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(serialize_bench(records))
    print(format_bench_summary(records))
    return 0


def _cmd_diagnose(args):
    loss = _build_loss(args)
    labeled, base = _load_data(args, loss)
    if base is None:
        raise UsageError("diagnose requires a base measure")
    theta_tilde = labeled_erm(labeled, loss)
    theta_mixed = mixed_erm(labeled, base, loss, args.gamma)
    est = sandwich(labeled, base, loss, theta_mixed, args.gamma)
    bias = predict_centering_bias(labeled, base, loss, theta_tilde, args.gamma)
    lines = [f"mixed ERM theta: {theta_mixed}",
             f"sandwich covariance diagonal: {est.cov.diagonal()}",
             f"predicted centering bias: {bias}"]
    report = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report + "\n")
    print(report)
    return 0


def _cmd_generate(args):
    if args.scenario is None:
        raise UsageError("generate requires --scenario")
    labeled, base, _ = generate_scenario(_build_scenario(args))
    prefix = args.out or args.scenario
    write_labeled_csv(f"{prefix}_labeled.csv", labeled)
    write_base_csv(f"{prefix}_base.csv", base)
    print(f"wrote {prefix}_labeled.csv and {prefix}_base.csv")
    return 0


_COMMANDS = {"infer": _cmd_infer, "rectify": _cmd_rectify, "bench": _cmd_bench,
             "diagnose": _cmd_diagnose, "generate": _cmd_generate}


def cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _make_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IngestionError, ParameterError, OutcomeTypeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (RankDeficiencyError, ConvergenceError, RectipriorError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
