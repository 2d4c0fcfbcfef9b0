"""Experiment harness: sweeps over data size, label noise, confusion sets and width.

Every run writes into one output directory:

``results.csv``
    one row per trained network, keyed by (kind, sweep value, variant, seed)
``pacbayes.csv``
    the bi-criteria sweep behind each row, same key columns in front
``manifest.json``
    config, digest, seeds, library versions and per-row wall times

Rows are append-only. A rerun into the same directory skips keys that are
already present, so an interrupted sweep is resumed by running it again. Wall
times live only in the manifest, which keeps the CSVs byte-identical across
reruns of the same config.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .conditions import ConditionStats, condition_histograms
from .data import LabeledDataset, load_mnist_dir, make_confusion_union, randomize_labels, split, subsample, synthetic_blobs
from .network import DivergenceError, Network, fit, forward_batch, init_network, save_network
from .norms import MEASURE_KEYS, MeasureReport, capacity_report
from .sharpness import PacBayesPoint, bicriteria_sweep, max_sharpness, sweep_to_csv

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
NAN = float("nan")


class ResumeConflict(RuntimeError):
    """The output directory holds results from a run with a different config."""


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from any JSON-serialisable parts."""
    blob = json.dumps(parts, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little") & 0x7FFFFFFF


def error_rate(net: Network, data) -> float:
    if len(data.labels) == 0:
        return NAN
    return float(np.mean(forward_batch(net, data.inputs).argmax(axis=1) != data.labels))


# -- rows -------------------------------------------------------------------

@dataclass
class ExperimentRow:
    kind: str
    sweep_value: int
    variant: str
    seed: int
    status: str
    epochs: int
    converged: bool
    train_loss: float
    train_error: float
    test_error: float
    report: MeasureReport | None
    max_sharpness: float = NAN
    best_bound_eq5: float = NAN
    best_alpha: float = NAN
    pacbayes_digest: str = ""
    wall_time: float = NAN

    HEAD = ("kind", "sweep_value", "variant", "seed", "status", "epochs", "converged", "train_loss", "train_error", "test_error")
    TAIL = ("max_sharpness", "best_bound_eq5", "best_alpha", "pacbayes_digest")
    CSV_COLUMNS = HEAD + MeasureReport.CSV_COLUMNS + TAIL

    def __post_init__(self):
        for name in ("train_error", "test_error"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def key(self) -> tuple:
        return (self.kind, self.sweep_value, self.variant, self.seed)

    def normalized(self, measure: str) -> float:
        if self.report is None or self.report.normalized is None:
            return NAN
        return self.report.normalized[measure]

    def csv_row(self) -> dict:
        row = {name: getattr(self, name) for name in self.HEAD}
        row["converged"] = int(self.converged)
        if self.report is not None:
            row.update(self.report.as_row())
        else:
            row.update({c: NAN for c in MeasureReport.CSV_COLUMNS})
        row.update({name: getattr(self, name) for name in self.TAIL})
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in row.items()}

    @classmethod
    def from_csv(cls, row: dict) -> "ExperimentRow":
        f = {k: float(v) for k, v in row.items() if k not in ("kind", "variant", "status", "pacbayes_digest")}
        report = None
        if not math.isnan(f["margin"]):
            raw = {k: f[f"raw_{k}"] for k in MEASURE_KEYS}
            norm = {k: f[f"norm_{k}"] for k in MEASURE_KEYS}
            defined = not any(math.isnan(v) for v in norm.values())
            report = MeasureReport(f["margin"], raw, norm if defined else None, int(f["m"]))
        return cls(
            kind=row["kind"],
            sweep_value=int(f["sweep_value"]),
            variant=row["variant"],
            seed=int(f["seed"]),
            status=row["status"],
            epochs=int(f["epochs"]),
            converged=bool(int(f["converged"])),
            train_loss=f["train_loss"],
            train_error=f["train_error"],
            test_error=f["test_error"],
            report=report,
            max_sharpness=f["max_sharpness"],
            best_bound_eq5=f["best_bound_eq5"],
            best_alpha=f["best_alpha"],
            pacbayes_digest=row["pacbayes_digest"],
        )


# -- persistence ------------------------------------------------------------

def _versions() -> dict:
    from . import __version__

    return {"gencap": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out: Path, payload: dict, name: str = "manifest.json") -> Path:
    path = Path(out) / name
    body = {"schema": MANIFEST_SCHEMA, "versions": _versions(), **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


class Manifest:
    """``manifest.json`` of one output directory; refuses to mix configs."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.path = out / "manifest.json"
        wall_times = {}
        if self.path.exists():
            old = json.loads(self.path.read_text())
            if old.get("resume_digest") != cfg.resume_digest():
                raise ResumeConflict(
                    f"{out} holds results from a config that differs in more than its sweep lists "
                    f"(digest {old.get('digest')}, this run {cfg.digest()})"
                )
            wall_times = old.get("wall_times", {})
        self.body = {
            "kind": cfg.kind, "digest": cfg.digest(), "resume_digest": cfg.resume_digest(),
            "seed": cfg.seed, "config": cfg.as_dict(), "wall_times": wall_times,
        }

    def record(self, name: str, seconds: float):
        self.body["wall_times"][name] = seconds
        self.save()

    def save(self):
        write_manifest(self.path.parent, self.body)


class ResultStore:
    """Append-only CSV writer for one output directory; the single writer of its files."""

    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.results = self.out / "results.csv"
        self.pacbayes = self.out / "pacbayes.csv"
        self.manifest = Manifest(cfg, self.out)
        self.manifest.save()
        self.rows = self._read_rows()
        self._drop_orphan_sweeps()

    def _read_rows(self) -> dict:
        if not self.results.exists():
            return {}
        with open(self.results, newline="") as f:
            rows = [ExperimentRow.from_csv(r) for r in csv.DictReader(f)]
        return {r.key: r for r in rows}

    def _drop_orphan_sweeps(self):
        # a crash between the sweep write and the row write leaves sweep lines with no row
        if not self.pacbayes.exists():
            return
        with open(self.pacbayes, newline="") as f:
            lines = list(csv.DictReader(f))
        keep = [r for r in lines if _sweep_key(r) in self.rows]
        if len(keep) != len(lines):
            _write_csv(self.pacbayes, _SWEEP_COLUMNS, keep, mode="w")

    def done(self, key: tuple) -> bool:
        return key in self.rows

    def add(self, row: ExperimentRow, points: list[PacBayesPoint] | None = None):
        if points:
            keyed = [{**_key_cols(row.key), **{k: repr(v) if isinstance(v, float) else str(v) for k, v in p.csv_row().items()}} for p in points]
            _write_csv(self.pacbayes, _SWEEP_COLUMNS, keyed)
        _write_csv(self.results, ExperimentRow.CSV_COLUMNS, [row.csv_row()])
        self.rows[row.key] = row
        self.manifest.record("/".join(map(str, row.key)), row.wall_time)


_KEY_COLUMNS = ("kind", "sweep_value", "variant", "seed")
_SWEEP_COLUMNS = _KEY_COLUMNS + PacBayesPoint.CSV_COLUMNS


def _key_cols(key: tuple) -> dict:
    return {k: str(v) for k, v in zip(_KEY_COLUMNS, key)}


def _sweep_key(row: dict) -> tuple:
    return (row["kind"], int(row["sweep_value"]), row["variant"], int(row["seed"]))


def _write_csv(path: Path, columns, rows, mode="a"):
    new = mode == "w" or not path.exists()
    with open(path, mode, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerows(rows)


# -- data -------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.dataset == "mnist":
        return load_mnist_dir(cfg.data_dir)
    return synthetic_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.blob_spread, seed=cfg.seed)


def fixed_split(cfg: ExperimentConfig, data: LabeledDataset) -> tuple[LabeledDataset, LabeledDataset]:
    """(test, pool): the test set is drawn once from the master seed, before any subsetting."""
    if cfg.test_size >= len(data):
        raise ValueError(f"test_size {cfg.test_size} leaves no training data out of {len(data)}")
    return split(data, cfg.test_size, derive_seed(cfg.seed, "test"))


def architecture(data: LabeledDataset, hidden) -> list[int]:
    return [data.dim, *hidden, data.num_classes]


def _need(pool: LabeledDataset, n: int, what: str):
    if n > len(pool):
        raise ValueError(f"{what} needs {n} samples but only {len(pool)} remain after the test split")


# -- one training run -------------------------------------------------------

def train_and_evaluate(
    cfg: ExperimentConfig,
    key: tuple,
    train: LabeledDataset,
    test: LabeledDataset,
    dims: list[int],
    init_seed: int,
    order_seed: int,
    error_set: LabeledDataset | None = None,
    stop_at_zero_error: bool = False,
    sharpness: bool = True,
    sweep: bool = True,
    model_path: Path | None = None,
) -> tuple[ExperimentRow, list[PacBayesPoint]]:
    """Train one network and compute every quantity that goes into its row.

    ``error_set`` is where train error is measured when it differs from the
    data the network was fitted on.
    """
    kind, value, variant, seed = key
    start = time.perf_counter()
    net0 = init_network(dims, init_seed)
    try:
        res = fit(net0, train, cfg.train_config(order_seed, stop_at_zero_error))
    except DivergenceError as err:
        log.warning("%s diverged at epoch %d", key, err.epoch)
        row = ExperimentRow(kind, value, variant, seed, "diverged", err.epoch, False, NAN, NAN, NAN, None)
        row.wall_time = time.perf_counter() - start
        return row, []
    net = res.network
    if model_path is not None:
        save_network(net, model_path)
    report = capacity_report(net, train, cfg.margin_spec())
    row = ExperimentRow(
        kind, value, variant, seed, "ok", res.epochs, res.converged, res.loss,
        error_rate(net, error_set if error_set is not None else train), error_rate(net, test), report,
    )
    points = []
    if sharpness:
        row.max_sharpness = max_sharpness(net, train, cfg.ascent_config(derive_seed(seed, "ascent", *key)))
    if sweep:
        points = bicriteria_sweep(
            net, train, cfg.alphas, replicates=cfg.replicates, seed=derive_seed(seed, "sweep", *key),
            delta=cfg.delta, batch_size=cfg.batch_size,
        )
        best = min(points, key=lambda p: p.bound_eq5)
        row.best_bound_eq5, row.best_alpha = best.bound_eq5, best.alpha
        row.pacbayes_digest = hashlib.sha256(sweep_to_csv(points).encode()).hexdigest()[:16]
    row.wall_time = time.perf_counter() - start
    log.info("%s: epochs=%d loss=%.2e train_err=%.4f test_err=%.4f (%.1fs)", key, res.epochs, res.loss, row.train_error, row.test_error, row.wall_time)
    return row, points


def _run(store: ResultStore, key: tuple, rows: list, **kw):
    if store.done(key):
        log.info("%s already complete, skipping", key)
        rows.append(store.rows[key])
        return
    row, points = train_and_evaluate(store.cfg, key, **kw)
    store.add(row, points)
    rows.append(row)


# -- experiment kinds -------------------------------------------------------

def run_true_vs_random(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[ExperimentRow]:
    """Each subset size, trained once with its true labels and once with uniformly random labels."""
    store = store or ResultStore(cfg)
    test, pool = fixed_split(cfg, load_dataset(cfg))
    _need(pool, max(cfg.sizes), "the largest subset")
    dims = architecture(pool, cfg.hidden)
    rows: list[ExperimentRow] = []
    for seed in cfg.replicate_seeds:
        for size in cfg.sizes:
            subset = subsample(pool, size, derive_seed(seed, "subset", size))
            for variant in ("true", "random"):
                data = subset if variant == "true" else randomize_labels(subset, 1.0, derive_seed(seed, "labels", size))
                _run(
                    store, (cfg.kind, size, variant, seed), rows, train=data, test=test, dims=dims,
                    init_seed=derive_seed(seed, "init", size), order_seed=derive_seed(seed, "order", size, variant),
                )
    return rows


def run_confusion(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[ExperimentRow]:
    """A fixed true-label set unioned with random-label confusion sets of growing size."""
    store = store or ResultStore(cfg)
    test, pool = fixed_split(cfg, load_dataset(cfg))
    _need(pool, cfg.train_size + max(cfg.confusion_sizes), "the largest confusion union")
    dims = architecture(pool, cfg.hidden)
    rows: list[ExperimentRow] = []
    for seed in cfg.replicate_seeds:
        base, rest = split(pool, cfg.train_size, derive_seed(seed, "base"))
        for size in cfg.confusion_sizes:
            union = make_confusion_union(base, rest, size, derive_seed(seed, "confusion", size))
            _run(
                store, (cfg.kind, size, "", seed), rows, train=union, test=test, dims=dims,
                error_set=union.true_part(), stop_at_zero_error=True,
                init_seed=derive_seed(seed, "init"), order_seed=derive_seed(seed, "order", size),
            )
    return rows


def run_hidden_sweep(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[ExperimentRow]:
    """Two-layer networks of growing width on one fixed training subset."""
    store = store or ResultStore(cfg)
    test, pool = fixed_split(cfg, load_dataset(cfg))
    _need(pool, cfg.train_size, "the training subset")
    rows: list[ExperimentRow] = []
    for seed in cfg.replicate_seeds:
        train = subsample(pool, cfg.train_size, derive_seed(seed, "subset"))
        for h in cfg.hidden_units:
            _run(
                store, (cfg.kind, h, "", seed), rows, train=train, test=test, dims=architecture(pool, [h]),
                init_seed=derive_seed(seed, "init", h), order_seed=derive_seed(seed, "order", h),
            )
    return rows


def training_subset(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) for single-network runs; the model subcommands reuse it."""
    test, pool = fixed_split(cfg, load_dataset(cfg))
    _need(pool, cfg.train_size, "the training subset")
    return subsample(pool, cfg.train_size, derive_seed(seed, "subset")), test


def _run_single(cfg: ExperimentConfig, store: ResultStore | None, sharpness: bool, sweep: bool) -> list[ExperimentRow]:
    store = store or ResultStore(cfg)
    rows: list[ExperimentRow] = []
    for seed in cfg.replicate_seeds:
        train, test = training_subset(cfg, seed)
        _run(
            store, (cfg.kind, cfg.train_size, "", seed), rows, train=train, test=test, dims=architecture(train, cfg.hidden),
            init_seed=derive_seed(seed, "init"), order_seed=derive_seed(seed, "order"),
            sharpness=sharpness, sweep=sweep, model_path=store.out / f"model_seed{seed}.gcap",
        )
    return rows


def run_measure(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[ExperimentRow]:
    """One trained network per seed with its norm measures and max sharpness."""
    return _run_single(cfg, store, sharpness=True, sweep=False)


def run_pacbayes_sweep(cfg: ExperimentConfig, store: ResultStore | None = None) -> list[ExperimentRow]:
    """One trained network per seed with its bi-criteria sweep over the alpha grid."""
    return _run_single(cfg, store, sharpness=False, sweep=True)


# -- conditions -------------------------------------------------------------

CONDITION_COLUMNS = ("seed", "label", "inputs", "finite_fraction", "mu", "c2", "c3", "excluded_inputs", "excluded_triples", "total_triples")
_STATS_ARRAYS = ("mu_per_input", "c2_per_input", "c3_per_input", "deltas", "c2_ratios", "c3_per_layer")


def _save_stats(stats: ConditionStats, path: Path):
    np.savez(path, **{k: getattr(stats, k) for k in _STATS_ARRAYS},
             scalars=np.array([stats.mu, stats.c2, stats.c3]), triples=np.array([stats.excluded_triples, stats.total_triples]))


def _load_stats(path: Path, label: str) -> ConditionStats:
    with np.load(path) as z:
        mu, c2, c3 = z["scalars"]
        excluded, total = z["triples"]
        arrays = {k: z[k] for k in _STATS_ARRAYS}
    return ConditionStats(float(mu), float(c2), float(c3), **arrays, excluded_triples=int(excluded), total_triples=int(total), label=label)


def run_conditions(cfg: ExperimentConfig, out=None) -> list[tuple[ConditionStats, ConditionStats]]:
    """Condition statistics at the seeded initialisation and after training, per seed.

    Writes ``conditions.csv`` (one line per baseline), a JSON summary and the
    averaged activation-ratio curves for each baseline, and the raw per-input
    arrays as ``.npz`` so a rerun can skip finished seeds.
    """
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg, out)
    manifest.save()
    test, pool = fixed_split(cfg, load_dataset(cfg))
    _need(pool, cfg.train_size, "the training subset")
    dims = architecture(pool, cfg.hidden)
    table = out / "conditions.csv"
    labels = ("initial", "trained")

    def finished(seed):
        return all((out / f"conditions_seed{seed}_{label}.npz").exists() for label in labels)

    if table.exists():
        # drop lines left by a seed that crashed before its npz files were written
        with open(table, newline="") as f:
            lines = list(csv.DictReader(f))
        keep = [r for r in lines if finished(int(r["seed"]))]
        if len(keep) != len(lines):
            _write_csv(table, CONDITION_COLUMNS, keep, mode="w")
    pairs = []
    for seed in cfg.replicate_seeds:
        if finished(seed):
            pairs.append(tuple(_load_stats(out / f"conditions_seed{seed}_{label}.npz", label) for label in labels))
            continue
        start = time.perf_counter()
        train = subsample(pool, cfg.train_size, derive_seed(seed, "subset"))
        net0 = init_network(dims, derive_seed(seed, "init"))
        res = fit(net0, train, cfg.train_config(derive_seed(seed, "order")))
        sample = subsample(train, min(cfg.condition_inputs, len(train)), derive_seed(seed, "inputs")).inputs
        pair = []
        for label, net in zip(labels, (net0, res.network)):
            stats = condition_histograms(net, sample, label=label)
            stats.metadata.update({"seed": seed, "dims": dims, "epochs": res.epochs, "train_loss": res.loss})
            (out / f"conditions_seed{seed}_{label}.json").write_text(stats.to_json() + "\n")
            (out / f"c2_seed{seed}_{label}.csv").write_text(stats.c2_csv())
            s = stats.summary()
            line = {"seed": seed, **{c: s[c] for c in CONDITION_COLUMNS[1:]}}
            _write_csv(table, CONDITION_COLUMNS, [{k: repr(v) if isinstance(v, float) else str(v) for k, v in line.items()}])
            pair.append(stats)
        # the npz files mark the seed as finished, so they are written last
        for stats in pair:
            _save_stats(stats, out / f"conditions_seed{seed}_{stats.label}.npz")
        manifest.record(f"conditions/{seed}", time.perf_counter() - start)
        pairs.append(tuple(pair))
    return pairs


RUNNERS = {
    "true_vs_random": run_true_vs_random,
    "confusion": run_confusion,
    "hidden_sweep": run_hidden_sweep,
    "measure": run_measure,
    "pacbayes_sweep": run_pacbayes_sweep,
    "conditions": run_conditions,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.kind](cfg)


def smallest_fitting_width(rows: list[ExperimentRow]) -> int | None:
    """Smallest hidden width whose row reached zero train error."""
    fits = sorted(r.sweep_value for r in rows if r.status == "ok" and r.train_error == 0.0)
    return fits[0] if fits else None
