"""Dataset-level certification and attacks, and manifest-driven experiments.

A manifest is a JSON file::

    {
      "dataset": {"path": "mnist.csv", "format": "csv", "classes": [0, 1, 2],
                  "subsample": 1500, "seed": 0, "n_train": 1000},
      "runs": [
        {"name": "cl", "config": "cl.cfg"},
        {"name": "wd", "settings": {"model": "kernel", "regularizer": "weight_decay", "lambda": 1e-5}},
        {"name": "given", "model": "linear.model"}
      ],
      "p": 2, "backend": "local", "eval_points": 500
    }

Relative paths are resolved against the manifest's directory.  Each run
trains (or loads) a model, certifies and attacks the correctly classified
evaluation points, and contributes one row to ``aggregate.csv`` and two rows
(lower and upper bound) to ``plot.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AdversarialSample, attack_boundary_search, parse_p
from .certify import default_backend, guarantee
from .data import LabeledDataset, load_dataset, mnist_sample
from .errors import NumericalError, ValidationError
from .model import LinearModel, Model, OneHiddenLayerModel, load_model, save_model
from .train import TrainConfig, error_rate, load_config, train

logger = logging.getLogger(__name__)

BACKEND_CHOICES = ("local", "global", "linear")
SANDWICH_TOL = 1e-9


def resolve_backend(model: Model, choice: str | None) -> str:
    """Map the CLI's ``local``/``global``/``linear`` onto a backend name for ``model``."""
    if choice is None or choice == "local":
        return default_backend(model, local=True)
    if choice == "global":
        if not isinstance(model, OneHiddenLayerModel):
            raise ValidationError("the global backend is only available for one-hidden-layer networks")
        return "nn_global"
    if choice == "linear":
        if not isinstance(model, LinearModel):
            raise ValidationError("the linear backend needs a linear model")
        return "linear_exact"
    raise ValidationError(f"backend must be one of {BACKEND_CHOICES}, got {choice!r}")


def worker_count(requested: int | None) -> int:
    if requested is None:
        env = os.environ.get("CERTILIP_WORKERS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValidationError(f"CERTILIP_WORKERS must be an integer, got {env!r}") from None
        else:
            requested = 1
    if requested < 1:
        raise ValidationError("workers must be >= 1")
    return requested


# ---------------------------------------------------------------------------
# per-instance fan-out; results always come back in input order


def _certify_one(args):
    model, x, backend, p, ident = args
    return guarantee(model, x, backend, p, instance_id=ident)


def _attack_one(args):
    model, x, p, ident = args
    return ident, attack_boundary_search(model, x, p)


def _fan_out(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def certify_points(model: Model, X, ids, backend: str, p=2, workers: int = 1):
    return _fan_out(_certify_one, [(model, x, backend, p, i) for x, i in zip(X, ids)], workers)


def attack_points(model: Model, X, ids, p=2, workers: int = 1) -> list[tuple[object, AdversarialSample]]:
    return _fan_out(_attack_one, [(model, x, p, i) for x, i in zip(X, ids)], workers)


# ---------------------------------------------------------------------------
# serialisation


def jsonl(records) -> str:
    return "".join(json.dumps(r, allow_nan=False) + "\n" for r in records)


def deltas_csv(samples, d: int) -> str:
    """Raw perturbations in feature order; infeasible rows are left empty."""
    lines = ["id," + ",".join(f"x{i}" for i in range(d))]
    for ident, s in samples:
        vals = "" if s.delta is None else ",".join(f"{v:.17g}" for v in s.delta)
        lines.append(f"{ident},{vals}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# summaries


AGGREGATE_FIELDS = ("run", "model", "regularizer", "lambda", "test_error", "n_eval", "n_correct",
                    "n_flipped", "n_attack_failed", "mean_guarantee", "mean_adv_norm",
                    "sandwich_violations")


@dataclass
class RunSummary:
    run: str
    model: str
    regularizer: str
    lam: float | None
    test_error: float
    n_eval: int
    guarantees: list[float]
    adv_norms: list[float | None]
    extra: dict = field(default_factory=dict)

    @property
    def n_correct(self) -> int:
        return len(self.guarantees)

    def sandwich_violations(self) -> list[int]:
        return [i for i, (g, a) in enumerate(zip(self.guarantees, self.adv_norms))
                if a is not None and g > a + SANDWICH_TOL * max(1.0, a)]

    def row(self) -> dict:
        flipped = [a for a in self.adv_norms if a is not None]
        return {
            "run": self.run,
            "model": self.model,
            "regularizer": self.regularizer,
            "lambda": "" if self.lam is None else repr(self.lam),
            "test_error": repr(self.test_error),
            "n_eval": self.n_eval,
            "n_correct": self.n_correct,
            "n_flipped": len(flipped),
            "n_attack_failed": self.n_correct - len(flipped),
            "mean_guarantee": repr(float(np.mean(self.guarantees))) if self.guarantees else "",
            "mean_adv_norm": repr(float(np.mean(flipped))) if flipped else "",
            "sandwich_violations": len(self.sandwich_violations()),
        }


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def aggregate_csv(summaries: list[RunSummary]) -> str:
    """Aggregate rows; aborts when any lower bound exceeds its upper bound."""
    for s in summaries:
        bad = s.sandwich_violations()
        if bad:
            i = bad[0]
            raise NumericalError(
                f"run {s.run}: certified radius {s.guarantees[i]!r} exceeds adversarial norm "
                f"{s.adv_norms[i]!r} at evaluation instance {i} ({len(bad)} violations)"
            )
    return _csv_text(AGGREGATE_FIELDS, [s.row() for s in summaries])


def plot_csv(summaries: list[RunSummary]) -> str:
    """Test error against mean lower bound and mean upper bound, one row per (run, series)."""
    rows = []
    for s in summaries:
        r = s.row()
        rows.append({"run": s.run, "series": "lower", "test_error": r["test_error"],
                     "mean_norm": r["mean_guarantee"]})
        rows.append({"run": s.run, "series": "upper", "test_error": r["test_error"],
                     "mean_norm": r["mean_adv_norm"]})
    return _csv_text(("run", "series", "test_error", "mean_norm"), rows)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ExperimentManifest:
    dataset_path: str | None
    dataset_format: str
    classes: list[int] | None
    subsample: int | None
    seed: int
    n_train: int | None
    runs: list[dict]
    p: float = 2.0
    backend: str = "local"
    eval_points: int | None = None
    base_dir: Path = Path(".")

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path


def parse_manifest(text: str, base_dir=".") -> ExperimentManifest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError("manifest must be a JSON object")
    ds = raw.get("dataset")
    if not isinstance(ds, dict):
        raise ValidationError("manifest needs a 'dataset' object")
    runs = raw.get("runs")
    if not isinstance(runs, list) or not runs:
        raise ValidationError("manifest needs a non-empty 'runs' list")
    names = set()
    for r in runs:
        if not isinstance(r, dict) or "name" not in r:
            raise ValidationError("every run needs a 'name'")
        if sum(k in r for k in ("config", "settings", "model")) != 1:
            raise ValidationError(f"run {r['name']!r} needs exactly one of config, settings, model")
        if r["name"] in names:
            raise ValidationError(f"duplicate run name {r['name']!r}")
        names.add(r["name"])
    classes = ds.get("classes")
    if classes is not None and (not isinstance(classes, list) or not classes):
        raise ValidationError("dataset.classes must be a non-empty list when given")
    m = ExperimentManifest(
        dataset_path=ds.get("path"),
        dataset_format=ds.get("format", "csv"),
        classes=classes,
        subsample=ds.get("subsample"),
        seed=int(ds.get("seed", 0)),
        n_train=ds.get("n_train"),
        runs=runs,
        p=parse_p(raw.get("p", 2)),
        backend=raw.get("backend", "local"),
        eval_points=raw.get("eval_points"),
        base_dir=Path(base_dir),
    )
    if m.backend not in BACKEND_CHOICES:
        raise ValidationError(f"backend must be one of {BACKEND_CHOICES}")
    for r in runs:
        for key in ("config", "model"):
            if key in r and not m.resolve(r[key]).exists():
                raise ValidationError(f"run {r['name']!r}: {key} file {m.resolve(r[key])} does not exist")
    if m.dataset_path not in (None, "mnist") and not m.resolve(m.dataset_path.split(":")[0]).exists():
        raise ValidationError(f"dataset {m.resolve(m.dataset_path)} does not exist")
    return m


def load_manifest(path) -> ExperimentManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    return parse_manifest(path.read_text(), path.parent)


def prepare_dataset(ds: LabeledDataset, classes=None, subsample=None, seed: int = 0) -> LabeledDataset:
    if classes:
        ds = ds.select_classes(classes)
    if subsample is not None:
        ds = ds.subsample(int(subsample), seed)
    return ds


def manifest_dataset(m: ExperimentManifest) -> LabeledDataset:
    if m.dataset_path in (None, "mnist"):
        ds = mnist_sample()
    else:
        ds = load_dataset(m.resolve(m.dataset_path), m.dataset_format)
    return prepare_dataset(ds, m.classes, m.subsample, m.seed)


def evaluate_model(name: str, model: Model, test: LabeledDataset, p, backend_choice: str,
                   eval_points: int | None = None, workers: int = 1, config: dict | None = None):
    """Certify and attack the correctly classified evaluation points of ``test``."""
    ev = test if eval_points is None or eval_points >= test.n else test.subset(np.arange(eval_points))
    backend = resolve_backend(model, backend_choice)
    pred = np.argmax(model.outputs(ev.points), axis=1)
    ids = [int(i) for i in np.flatnonzero(pred == ev.labels)]
    reports = certify_points(model, ev.points[ids], ids, backend, p, workers)
    attacks = attack_points(model, ev.points[ids], ids, p, workers)
    summary = RunSummary(
        run=name,
        model=model.kind,
        regularizer=(config or {}).get("regularizer", ""),
        lam=(config or {}).get("lambda"),
        test_error=error_rate(model, ev.points, ev.labels),
        n_eval=ev.n,
        guarantees=[r.guarantee_radius for r in reports],
        adv_norms=[s.norm_value if s.flipped else None for _, s in attacks],
    )
    return summary, reports, attacks


def run_experiment(m: ExperimentManifest, out_dir, workers: int = 1) -> list[RunSummary]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = manifest_dataset(m)
    if m.n_train is not None:
        if not 0 < m.n_train < ds.n:
            raise ValidationError(f"n_train={m.n_train} must lie strictly between 0 and {ds.n}")
        train_set, test_set = ds.split(int(m.n_train), m.seed)
    else:
        train_set, test_set = None, ds

    summaries = []
    for run in m.runs:
        name = run["name"]
        config_dict = None
        if "model" in run:
            model = load_model(m.resolve(run["model"]))
        else:
            if train_set is None:
                raise ValidationError(f"run {name!r} trains a model, so the manifest needs dataset.n_train")
            if "config" in run:
                cfg = load_config(m.resolve(run["config"]))
            else:
                settings = dict(run["settings"])
                if "lambda" in settings:
                    settings["lam"] = settings.pop("lambda")
                try:
                    cfg = TrainConfig(**settings)
                except TypeError as exc:
                    raise ValidationError(f"run {name!r}: {exc}") from None
            model, report = train(train_set.points, train_set.labels, cfg, test_set.points,
                                  test_set.labels, ds.n_classes)
            config_dict = cfg.to_dict()
            (out / f"{name}.report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
            save_model(model, out / f"{name}.model")
        logger.info("evaluating run %s", name)
        summary, reports, attacks = evaluate_model(name, model, test_set, m.p, m.backend,
                                                   m.eval_points, workers, config_dict)
        (out / f"{name}.guarantees.jsonl").write_text(jsonl(r.to_record() for r in reports))
        (out / f"{name}.attacks.jsonl").write_text(jsonl(s.to_record(i) for i, s in attacks))
        summaries.append(summary)

    write_summaries(summaries, out)
    return summaries


def write_summaries(summaries: list[RunSummary], out_dir) -> None:
    out = Path(out_dir)
    (out / "aggregate.csv").write_text(aggregate_csv(summaries))
    (out / "plot.csv").write_text(plot_csv(summaries))


def summaries_from_dir(out_dir) -> list[RunSummary]:
    """Rebuild run summaries from the JSONL files written by :func:`run_experiment`."""
    out = Path(out_dir)
    agg = out / "aggregate.csv"
    if not agg.exists():
        raise ValidationError(f"{agg} does not exist; run eval first")
    rows = list(csv.DictReader(agg.open()))
    summaries = []
    for row in rows:
        name = row["run"]
        g = [json.loads(line) for line in (out / f"{name}.guarantees.jsonl").read_text().splitlines()]
        a = [json.loads(line) for line in (out / f"{name}.attacks.jsonl").read_text().splitlines()]
        summaries.append(RunSummary(
            run=name,
            model=row["model"],
            regularizer=row["regularizer"],
            lam=float(row["lambda"]) if row["lambda"] else None,
            test_error=float(row["test_error"]),
            n_eval=int(row["n_eval"]),
            guarantees=[r["guarantee_radius"] for r in g],
            adv_norms=[r["norm"] if r["flipped"] else None for r in a],
        ))
    return summaries


def format_table(summaries: list[RunSummary]) -> str:
    head = f"{'run':<16} {'model':<7} {'test err':>8} {'mean lower':>11} {'mean upper':>11} {'failed':>6}"
    lines = [head, "-" * len(head)]
    for s in summaries:
        r = s.row()

        def f(v):
            return f"{float(v):11.4f}" if v != "" else f"{'-':>11}"

        lines.append(f"{s.run:<16} {s.model:<7} {float(r['test_error']):8.4f} {f(r['mean_guarantee'])} "
                     f"{f(r['mean_adv_norm'])} {r['n_attack_failed']:>6}")
    return "\n".join(lines)

