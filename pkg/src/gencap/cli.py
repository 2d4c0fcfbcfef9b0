"""Command-line entry point.

    gencap [--seed N] [--out DIR] [--data-dir DIR] <command> [options]

Commands: ``train``, ``measure``, ``sharpness``, ``pacbayes-sweep``,
``conditions`` and ``experiment <kind>``. Each accepts ``--config FILE`` and
repeated ``--set key=value`` overrides. Exit status is 0 on success, 1 on a
usage or config error and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .conditions import condition_histograms
from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .data import IdxFormatError
from .experiments import ResumeConflict, architecture, derive_seed, error_rate, run_experiment, training_subset, write_manifest
from .network import DivergenceError, ModelFormatError, fit, init_network, load_network, save_network
from .norms import capacity_report
from .sharpness import bicriteria_sweep, max_sharpness, sweep_to_csv

log = logging.getLogger("gencap")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--data-dir", default=argparse.SUPPRESS, help="directory holding the MNIST IDX files")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    model = _Parser(add_help=False)
    model.add_argument("--model", required=True, help="network file written by `train`")
    model.add_argument("--data", choices=("mnist", "blobs"), help="dataset the model is evaluated on")

    parser = _Parser(prog="gencap", description=__doc__.split("\n\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", parents=[common], help="train one network and save it")
    p.add_argument("--data", choices=("mnist", "blobs"))

    p = sub.add_parser("measure", parents=[common, model], help="margin and norm measures of a saved network")
    p.add_argument("--eps", type=float, help="margin percentile")

    p = sub.add_parser("sharpness", parents=[common, model], help="max sharpness of a saved network")
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("pacbayes-sweep", parents=[common, model], help="bi-criteria sweep of a saved network")
    p.add_argument("--replicates", type=int)

    p = sub.add_parser("conditions", parents=[common, model], help="condition statistics of a saved network")
    p.add_argument("--inputs", type=int, help="number of sampled training inputs")

    p = sub.add_parser("experiment", parents=[common], help="run a whole experiment")
    p.add_argument("kind", choices=KINDS)
    return parser


def _config(args, **fixed) -> ExperimentConfig:
    fixed.update(
        seed=getattr(args, "seed", None),
        out=getattr(args, "out", None),
        data_dir=getattr(args, "data_dir", None),
        dataset=getattr(args, "data", None),
    )
    return load_config(getattr(args, "config", None), getattr(args, "set", []), **fixed)


def _load_model(args, cfg: ExperimentConfig):
    path = Path(args.model)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    net = load_network(path)
    train, test = training_subset(cfg, cfg.seed)
    if net.dims[0] != train.dim or net.dims[-1] != train.num_classes:
        raise ValueError(f"{path}: network maps {net.dims[0]} -> {net.dims[-1]} but the data has {train.dim} inputs and {train.num_classes} classes")
    return net, train, test


def _manifest(cfg: ExperimentConfig, command: str, started: float, **extra):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "digest": cfg.digest(), "seed": cfg.seed, "config": cfg.as_dict(), "wall_time": time.perf_counter() - started, **extra}
    write_manifest(out, body, name=f"{command}.manifest.json")


def cmd_train(args) -> int:
    start = time.perf_counter()
    cfg = _config(args)
    train, test = training_subset(cfg, cfg.seed)
    dims = architecture(train, cfg.hidden)
    res = fit(init_network(dims, derive_seed(cfg.seed, "init")), train, cfg.train_config(derive_seed(cfg.seed, "order")))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_network(res.network, out / "model.gcap")
    summary = {
        "dims": dims, "epochs": res.epochs, "loss": res.loss, "converged": res.converged,
        "train_error": error_rate(res.network, train), "test_error": error_rate(res.network, test),
    }
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    _manifest(cfg, "train", start, model=str(out / "model.gcap"))
    return EXIT_OK


def cmd_measure(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, epsilon=args.eps)
    net, train, _ = _load_model(args, cfg)
    report = capacity_report(net, train, cfg.margin_spec(), metadata={"model": args.model, "epsilon": cfg.epsilon})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "measure.csv").write_text(report.to_csv())
    (out / "measure.json").write_text(report.to_json() + "\n")
    print(report.to_csv(), end="")
    _manifest(cfg, "measure", start, model=args.model)
    return EXIT_OK


def cmd_sharpness(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, ascent_alpha=args.alpha, ascent_steps=args.steps)
    net, train, _ = _load_model(args, cfg)
    value = max_sharpness(net, train, cfg.ascent_config(cfg.seed))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    body = {"alpha": cfg.ascent_alpha, "steps": cfg.ascent_steps, "max_sharpness": value, "m": len(train)}
    (out / "sharpness.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    print(json.dumps(body, sort_keys=True))
    _manifest(cfg, "sharpness", start, model=args.model)
    return EXIT_OK


def cmd_pacbayes(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, replicates=args.replicates)
    net, train, _ = _load_model(args, cfg)
    points = bicriteria_sweep(net, train, cfg.alphas, replicates=cfg.replicates, seed=cfg.seed, delta=cfg.delta, batch_size=cfg.batch_size)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pacbayes.csv").write_text(sweep_to_csv(points))
    print(sweep_to_csv(points), end="")
    _manifest(cfg, "pacbayes-sweep", start, model=args.model)
    return EXIT_OK


def cmd_conditions(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, condition_inputs=args.inputs)
    net, train, _ = _load_model(args, cfg)
    n = min(cfg.condition_inputs, len(train))
    sample = train.take(range(n)).inputs
    stats = condition_histograms(net, sample, label=Path(args.model).stem)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "conditions.json").write_text(stats.to_json() + "\n")
    (out / "c2.csv").write_text(stats.c2_csv())
    print(json.dumps({k: stats.summary()[k] for k in ("mu", "c2", "c3", "finite_fraction")}, sort_keys=True))
    _manifest(cfg, "conditions", start, model=args.model)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args, kind=args.kind)
    result = run_experiment(cfg)
    print(f"{cfg.kind}: {len(result)} {'seeds' if cfg.kind == 'conditions' else 'rows'} in {cfg.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "measure": cmd_measure,
    "sharpness": cmd_sharpness,
    "pacbayes-sweep": cmd_pacbayes,
    "conditions": cmd_conditions,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"gencap: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ModelFormatError, IdxFormatError, DivergenceError, ResumeConflict, ValueError) as err:
        print(f"gencap: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
