"""``certilip`` command line.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .attack import BoxLinearProblem, parse_p, solve_box
from .certify import cross_lip_bound_kernel, cross_lip_bound_nn
from .data import dumps_csv, generate, load_dataset, mnist_sample, save_csv
from .errors import NumericalError, ValidationError
from .model import GaussianKernelModel, OneHiddenLayerModel, load_model, save_model
from .oracle import oracle_ball_max_gradient, oracle_box_l1, oracle_box_linf, oracle_box_qp
from .train import TrainConfig, load_config, train

logger = logging.getLogger("certilip")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _classes(text):
    if text is None:
        return None
    try:
        out = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--classes expects comma-separated integers, got {text!r}")
    return out


def _dataset(args):
    """Load ``--dataset`` (a file, or ``mnist`` for the offline sample) with class/subsample filters."""
    if args.dataset is None:
        raise ValidationError("--dataset is required")
    if args.classes is not None and not args.classes:
        raise ValidationError("--classes selects no classes")
    ds = mnist_sample() if args.dataset == "mnist" else load_dataset(args.dataset, args.format)
    return ex.prepare_dataset(ds, args.classes, args.subsample, args.seed or 0)


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    ds = generate(args.kind, args.n, args.d, args.n_classes, args.seed, args.noise)
    if args.out in (None, "-"):
        sys.stdout.write(dumps_csv(ds))
    else:
        save_csv(ds, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    ds = _dataset(args)
    test = None
    if args.test_dataset:
        test = load_dataset(args.test_dataset, args.format)
        if args.classes:
            test = test.select_classes(args.classes)
    model, report = train(ds.points, ds.labels, cfg,
                          None if test is None else test.points,
                          None if test is None else test.labels, ds.n_classes)
    if args.out is None:
        raise ValidationError("--out is required for train")
    save_model(model, args.out)
    report_path = args.report or f"{args.out}.report.json"
    _write(report_path, json.dumps(report.to_dict(timing=args.timing), indent=1) + "\n")
    logger.info("train error %.4f, model written to %s", report.train_error, args.out)
    return EXIT_OK


def cmd_certify(args) -> int:
    model = _model(args)
    ds = _dataset(args)
    backend = ex.resolve_backend(model, args.backend)
    reports = ex.certify_points(model, ds.points, range(ds.n), backend, args.p,
                                ex.worker_count(args.workers))
    _write(args.out, ex.jsonl(r.to_record() for r in reports))
    return EXIT_OK


def cmd_attack(args) -> int:
    model = _model(args)
    ds = _dataset(args)
    samples = ex.attack_points(model, ds.points, range(ds.n), args.p, ex.worker_count(args.workers))
    records = []
    for ident, s in samples:
        rec = s.to_record(ident)
        if args.deltas:
            rec["delta_file"] = str(args.deltas)
        records.append(rec)
    _write(args.out, ex.jsonl(records))
    if args.deltas:
        _write(args.deltas, ex.deltas_csv(samples, ds.d))
    return EXIT_OK


def cmd_eval(args) -> int:
    m = ex.load_manifest(args.manifest)
    if args.out is None:
        raise ValidationError("--out (output directory) is required for eval")
    summaries = ex.run_experiment(m, args.out, ex.worker_count(args.workers))
    print(ex.format_table(summaries))
    return EXIT_OK


def cmd_report(args) -> int:
    if args.out is None:
        raise ValidationError("--out (the eval output directory) is required for report")
    summaries = ex.summaries_from_dir(args.out)
    ex.write_summaries(summaries, args.out)
    print(ex.format_table(summaries))
    return EXIT_OK


def cmd_verify(args) -> int:
    """Spot-check the solvers and bounds against the brute-force oracles."""
    rng = np.random.default_rng(args.seed)
    oracles = {1.0: oracle_box_l1, 2.0: oracle_box_qp, np.inf: oracle_box_linf}
    summary = {"solver_checks": 0, "solver_mismatches": 0, "bound_checks": 0, "bound_violations": 0}
    for _ in range(args.n):
        d = int(rng.integers(2, 7))
        v = rng.standard_normal(d)
        x = rng.random(d)
        gap = -float(rng.exponential(1.0))
        prob = BoxLinearProblem(v, gap, x)
        for p, oracle in oracles.items():
            delta = solve_box(prob, p)
            ref = oracle(v, gap, x)
            summary["solver_checks"] += 1
            if (delta is None) != (not ref.feasible):
                summary["solver_mismatches"] += 1
            elif delta is not None and abs(np.linalg.norm(delta, ord=p) - ref.value) > 1e-8:
                summary["solver_mismatches"] += 1

    if args.model:
        model = load_model(args.model)
        if not isinstance(model, (GaussianKernelModel, OneHiddenLayerModel)):
            raise ValidationError("bound verification needs a kernel or one-hidden-layer model")
        bound = cross_lip_bound_kernel if isinstance(model, GaussianKernelModel) else cross_lip_bound_nn
        pts = _dataset(args).points if args.dataset else rng.random((args.n, model.n_features))
        for i, x in enumerate(pts[: args.n]):
            c = int(np.argmax(model.outputs(x)))
            j = (c + 1) % model.n_classes
            radius = float(rng.uniform(0.0, 1.0))
            ref = oracle_ball_max_gradient(model, x, j, c, radius, args.samples, seed=args.seed + i)
            summary["bound_checks"] += 1
            if ref.value > bound(model, x, j, c, radius) * (1 + 1e-9) + 1e-12:
                summary["bound_violations"] += 1
    print(json.dumps(summary))
    if summary["solver_mismatches"] or summary["bound_violations"]:
        raise NumericalError("verification found disagreements with the oracles")
    return EXIT_OK


def _model(args):
    if args.model is None:
        raise ValidationError("--model is required")
    return load_model(args.model)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", help="CSV/IDX path, or 'mnist' for the offline MNIST sample")
    common.add_argument("--format", choices=("csv", "idx"), default="csv")
    common.add_argument("--model", help="model file")
    common.add_argument("--config", help="training config (key = value lines)")
    common.add_argument("--p", type=parse_p, default=2.0, metavar="{1,2,inf}")
    common.add_argument("--backend", choices=ex.BACKEND_CHOICES, default="local")
    common.add_argument("--out", help="output path ('-' for stdout where applicable)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $CERTILIP_WORKERS or 1)")
    common.add_argument("--subsample", type=int, default=None)
    common.add_argument("--classes", type=_classes, default=None, help="e.g. 0,1,2")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="certilip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as CSV")
    g.add_argument("kind", choices=("blobs", "moons", "xor"))
    g.add_argument("--n", type=int, default=300)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--n-classes", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a kernel or one-hidden-layer model")
    t.add_argument("--test-dataset", help="held-out data for the report's test error")
    t.add_argument("--report", help="report path (default: <out>.report.json)")
    t.add_argument("--timing", action="store_true", help="include wall time in the report")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", parents=[common], help="certified radius per instance (JSONL)")
    c.set_defaults(func=cmd_certify)

    a = sub.add_parser("attack", parents=[common], help="box-constrained adversarial samples (JSONL)")
    a.add_argument("--deltas", help="also write raw perturbations to this CSV")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", parents=[common], help="run an experiment manifest")
    e.add_argument("manifest")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="rebuild aggregate and plot CSVs of an eval directory")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", parents=[common], help="spot-check solvers and bounds against oracles")
    v.add_argument("--n", type=int, default=200)
    v.add_argument("--samples", type=int, default=2000)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and args.command != "train":
        args.seed = 0
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
