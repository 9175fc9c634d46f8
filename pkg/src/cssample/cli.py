"""``cssample`` command line: gen, train, sample, eval, bench, gradcheck.

Exit codes: 0 success, 1 invalid arguments or inputs (checked before any
output is written), 2 failure while running. Diagnostics go to stderr; the
machine-readable results go to the paths named on the command line.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError
from .dataset import build_dataset, read_dataset, write_dataset
from .estimators import CSNetSampler
from .metrics import chamfer, emd
from .model import CsNetConfig, CsNetModel, select
from .pointcloud import CLASS_NAMES, CloudFormatError, DatasetSpec, PointCloud, read_cloud, sample_shape, write_cloud
from .samplers import SampleResult, fps, poisson_disk, random_sample
from .trainer import predict_logits

__all__ = ["main", "run", "build_parser", "CliError"]

logger = logging.getLogger("cssample")

SAMPLE_METHODS = ("random", "fps", "poisson", "csnet")
BENCH_METHODS = ("random", "fps", "csnet")
LOSS_NAMES = {"emd": "emd", "cd": "cd", "cd_emd": "cd_plus_emd"}
EVAL_COLUMNS = ["method", "k", "cloud_id", "cd", "emd", "accuracy"]
BENCH_COLUMNS = ["method", "n", "ratio", "k", "median_seconds", "repeats"]


class CliError(Exception):
    """Bad arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument types


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _float(lo: float, strict: bool):
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
        if not np.isfinite(v) or v < lo or (strict and v == lo):
            raise argparse.ArgumentTypeError(f"expected a finite number {'>' if strict else '>='} {lo}, got {text}")
        return v

    return parse


def _list_of(item, choices: Optional[Sequence[str]] = None):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise argparse.ArgumentTypeError("empty list")
        if choices is not None:
            bad = [p for p in parts if p not in choices]
            if bad:
                raise argparse.ArgumentTypeError(f"invalid choice(s) {', '.join(bad)}; choose from {', '.join(choices)}")
        out = [item(p) for p in parts]
        if len(set(out)) != len(out):
            raise argparse.ArgumentTypeError(f"duplicate entries in {text!r}")
        return out

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cssample", description="Contribution-based point-cloud sampling.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic labelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=_positive_int, default=len(CLASS_NAMES))
    g.add_argument("--per-class", type=_positive_int, default=150)
    g.add_argument("--points", type=_positive_int, default=256)
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--noise", type=_float(0.0, False), default=0.01)

    t = sub.add_parser("train", help="train the sampler jointly with the classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--k", type=_positive_int, default=64)
    t.add_argument("--epochs", type=_positive_int, default=20)
    t.add_argument("--batch", type=_positive_int, default=8)
    t.add_argument("--lr", type=_float(0.0, True), default=1e-3)
    t.add_argument("--alpha", type=_float(0.0, False), default=1.0)
    t.add_argument("--beta", type=_float(0.0, False), default=1.0)
    t.add_argument("--eps", type=_float(0.0, True), default=0.01)
    t.add_argument("--loss", choices=tuple(LOSS_NAMES), default="emd")
    t.add_argument("--attn", choices=("oa", "sa", "mlp"), default="oa")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--seed", type=_nonneg_int, default=0)

    s = sub.add_parser("sample", help="downsample one cloud file")
    s.add_argument("--method", choices=SAMPLE_METHODS, required=True)
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--start-index", type=_nonneg_int, default=0)

    e = sub.add_parser("eval", help="CD/EMD report of samplers on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--methods", type=_list_of(str, SAMPLE_METHODS), default=["random", "fps"])
    e.add_argument("--k", type=_list_of(_positive_int), default=[64])
    e.add_argument("--metrics", type=_list_of(str, ("cd", "emd")), default=["cd", "emd"])
    e.add_argument("--report", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--passthrough", action="store_true", help="identity selection (k = n) for metric calibration")

    b = sub.add_parser("bench", help="sampling wall time versus cloud size")
    b.add_argument("--points", type=_list_of(_positive_int), default=[1024, 2048, 4096])
    b.add_argument("--ratios", type=_list_of(_positive_int), default=[4])
    b.add_argument("--repeats", type=_positive_int, default=5)
    b.add_argument("--report", required=True)
    b.add_argument("--ckpt")

    c = sub.add_parser("gradcheck", help="run every registered gradient and oracle check")
    c.add_argument("--tol", type=_float(0.0, False), default=None)
    return p


# ---------------------------------------------------------------------------
# commands


def _require_file(path: Optional[str], what: str) -> str:
    if path is None:
        raise CliError(f"{what} is required")
    if not os.path.isfile(path):
        raise CliError(f"{what} {path!r} does not exist")
    return path


def _load_sampler(path: str) -> CSNetSampler:
    try:
        return CSNetSampler.load(path)
    except (CheckpointError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path!r}: {exc}")


def _read_data(directory: str, splits=None):
    if not os.path.isdir(directory):
        raise CliError(f"data directory {directory!r} does not exist")
    try:
        return read_dataset(directory, splits)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc))


def cmd_gen(args) -> None:
    if args.classes > len(CLASS_NAMES):
        raise CliError(f"--classes must be at most {len(CLASS_NAMES)}")
    if args.points < 8:
        raise CliError("--points must be at least 8")
    if args.per_class < 2:
        raise CliError("--per-class must be at least 2 so both splits are populated")
    spec = DatasetSpec(CLASS_NAMES[: args.classes], args.per_class, args.points, args.seed, args.noise)
    ds = build_dataset(spec)
    write_dataset(ds, args.out)
    logger.info("wrote %d clouds (%d test) to %s", len(ds.clouds), ds.splits.count("test"), args.out)


def cmd_train(args) -> None:
    ds = _read_data(args.data)
    train_c, _ = ds.split("train")
    test_c, _ = ds.split("test")
    if not train_c:
        raise CliError(f"{args.data} has no training clouds")
    n = min(c.n for c in train_c + test_c)
    if args.k >= n:
        raise CliError(f"--k must be below the cloud size {n}")
    if args.alpha == 0 and args.beta == 0:
        raise CliError("--alpha and --beta cannot both be 0")
    ckpt_dir = os.path.dirname(os.path.abspath(args.ckpt))
    if not os.path.isdir(ckpt_dir):
        raise CliError(f"checkpoint directory {ckpt_dir!r} does not exist")
    est = CSNetSampler(
        n_samples=args.k,
        n_neighbors=min(32, n),
        attention=args.attn,
        loss=LOSS_NAMES[args.loss],
        alpha=args.alpha,
        beta=args.beta,
        epsilon=args.eps,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        random_state=args.seed,
    )
    labels = [c.label for c in train_c]
    X_val = test_c or None
    y_val = [c.label for c in test_c] if test_c else None
    start = time.perf_counter()
    est.fit(train_c, labels, X_val, y_val)
    est.save(args.ckpt)
    hist = est.history_
    tail = ""
    if hist.test_accuracy:
        tail = f", test accuracy final {hist.test_accuracy[-1]:.3f} best {max(hist.test_accuracy):.3f}"
    logger.info("trained in %.1fs%s; checkpoint %s", time.perf_counter() - start, tail, args.ckpt)
    if hist.sinkhorn_nonconverged:
        logger.info("%d transport solves stopped at the iteration cap", hist.sinkhorn_nonconverged)


def _sample_one(method: str, cloud: PointCloud, k: int, seed, sampler: Optional[CSNetSampler], start_index: int = 0) -> SampleResult:
    if method == "random":
        return random_sample(cloud, k, np.random.default_rng(seed))
    if method == "fps":
        return fps(cloud, k, start_index)
    if method == "poisson":
        return poisson_disk(cloud, k, np.random.default_rng(seed))
    if method == "csnet":
        return select(cloud, sampler.model_, k)
    raise CliError(f"unknown method {method!r}")


def cmd_sample(args) -> None:
    _require_file(args.input, "--in")
    sampler = _load_sampler(_require_file(args.ckpt, "--ckpt")) if args.method == "csnet" else None
    try:
        cloud = read_cloud(args.input)
    except CloudFormatError as exc:
        raise CliError(str(exc))
    hi = cloud.n - 1 if args.method == "csnet" else cloud.n
    if args.k > hi:
        raise CliError(f"--k must be at most {hi} for a cloud of {cloud.n} points")
    if args.start_index >= cloud.n:
        raise CliError(f"--start-index must be below {cloud.n}")
    if sampler is not None and sampler.model_.config.n_neighbors > cloud.n:
        raise CliError(f"cloud has fewer points than the checkpoint's neighbourhood size")
    res = _sample_one(args.method, cloud, args.k, args.seed, sampler, args.start_index)
    write_cloud(res.sampled, args.out)
    logger.info("kept %d of %d points with %s", res.k, cloud.n, args.method)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.9g}"


def cmd_eval(args) -> None:
    ds = _read_data(args.data, ["test"])
    clouds, ids = ds.clouds, ds.cloud_ids
    if not clouds:
        raise CliError(f"{args.data} has no test clouds")
    sampler = None
    if args.ckpt is not None or "csnet" in args.methods:
        sampler = _load_sampler(_require_file(args.ckpt, "--ckpt"))
    n = min(c.n for c in clouds)
    if args.passthrough:
        plan = [("passthrough", None)]
    else:
        for k in args.k:
            hi = n - 1 if "csnet" in args.methods else n
            if k > hi:
                raise CliError(f"--k {k} exceeds the usable sample size {hi}")
        plan = [(m, k) for m in args.methods for k in args.k]
    want_cd, want_emd = "cd" in args.metrics, "emd" in args.metrics

    rows, summary = [], []
    for method, k in plan:
        cds, emds, correct = [], [], 0
        for i, (cloud, cid) in enumerate(zip(clouds, ids)):
            if method == "passthrough":
                res = SampleResult.from_indices(cloud, np.arange(cloud.n), "passthrough")
            else:
                res = _sample_one(method, cloud, k, i, sampler)
            cd = chamfer(res.sampled.points, cloud.points) if want_cd else None
            em = emd(res.sampled.points, cloud.points)[0] if want_emd else None
            cds.append(cd)
            emds.append(em)
            if sampler is not None:
                logits = predict_logits(res.sampled.points, sampler.classifier_)
                correct += int(sampler.classes_[int(np.argmax(logits))] == cloud.label)
            rows.append([method, res.k, cid, _fmt(cd), _fmt(em), ""])
        k_out = clouds[0].n if k is None else k
        acc = correct / len(clouds) if sampler is not None else None
        summary.append([
            method,
            k_out,
            "mean",
            _fmt(float(np.mean(cds))) if want_cd else "",
            _fmt(float(np.mean(emds))) if want_emd else "",
            _fmt(acc),
        ])
        logger.info("%s k=%s: mean cd %s emd %s%s", method, k_out, summary[-1][3] or "-", summary[-1][4] or "-",
                    f" accuracy {acc:.3f}" if acc is not None else "")
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerows(rows)
        w.writerows(summary)


def bench_cloud(n: int, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng([seed, n])
    return PointCloud(sample_shape("torus", n, rng))


def time_sampler(method: str, cloud: PointCloud, k: int, repeats: int, model: Optional[CsNetModel] = None) -> float:
    """Median wall time of ``repeats`` calls, after one untimed warm-up."""

    def call():
        if method == "random":
            random_sample(cloud, k, np.random.default_rng(0))
        elif method == "fps":
            fps(cloud, k)
        elif method == "csnet":
            select(cloud, model, k)
        else:
            raise ValueError(method)

    call()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_bench(args) -> None:
    if args.ckpt is not None:
        model = _load_sampler(_require_file(args.ckpt, "--ckpt")).model_
    else:
        model = CsNetModel.initialize(CsNetConfig(), 0)
    g = model.config.n_neighbors
    for n in args.points:
        if n <= g:
            raise CliError(f"--points must exceed the neighbourhood size {g}, got {n}")
        for r in args.ratios:
            if r < 2 or n // r < 1:
                raise CliError(f"ratio {r} is invalid for n={n} (need ratio >= 2 and n/ratio >= 1)")
    rows = []
    for n in sorted(args.points):
        cloud = bench_cloud(n)
        for r in args.ratios:
            k = n // r
            for method in BENCH_METHODS:
                t = time_sampler(method, cloud, k, args.repeats, model)
                rows.append([method, n, r, k, f"{t:.6g}", args.repeats])
                logger.info("%s n=%d k=%d: %.4fs", method, n, k, t)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        w.writerows(rows)


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_checks(args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        note = f"  ({r.error})" if r.error else ""
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  tol {r.tol:.0e}  {status}{note}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck: {len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise CliError(parser.format_usage().rstrip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError(parser.format_usage().rstrip())
        code = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


def main() -> None:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
