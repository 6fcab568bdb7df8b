"""``lmn`` command line: analyze, config, train, eval, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Reports go to
``--out`` or stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, dataio
from .config import dump_config, load_config, parse_config
from .errors import FormatError, LmnError
from .graph import HeadSpec
from .presets import PRESETS, preset_config

log = logging.getLogger("lmobilenet")

DATA_ENV = "LMN_DATA_DIR"


class UsageError(Exception):
    pass


def _shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        parts = ()
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}")
    return parts


def _classes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated class ids, got {text!r}") from None


def _arch(args, num_classes=None, input_shape=None):
    if args.config:
        cfg = load_config(args.config)
    else:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        cfg = preset_config(args.preset, num_classes or getattr(args, "classes", None))
    if num_classes and cfg.head.classes != num_classes:
        cfg = type(cfg)(cfg.name, cfg.input_shape, cfg.rows, HeadSpec(num_classes, cfg.head.bn, cfg.head.relu), cfg.flags)
    if input_shape:
        cfg = type(cfg)(cfg.name, tuple(input_shape), cfg.rows, cfg.head, cfg.flags)
    return cfg


def _emit(data: bytes, out: str | None):
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def cmd_analyze(args) -> int:
    cfg = _arch(args, input_shape=args.input_shape)
    graph = cfg.build()
    report = analysis.cost_report(graph)
    census = analysis.op_census(graph)
    ckpt_bytes = dataio.checkpoint_size(graph)
    extra = {
        "weighted_layers": len(graph.weighted_layers()),
        "checkpoint_bytes": ckpt_bytes,
    }
    if args.format == "json":
        data = analysis.report_serialize(report, "json", census, extra)
    else:
        data = analysis.report_serialize(report, "csv")
    _emit(data, args.out)
    t = report.totals
    summary = (
        f"{graph.name}: params={t['params']} ({t['params'] / 1e6:.2f}M) madds={t['madds']} mac={t['mac']} "
        f"weighted_layers={extra['weighted_layers']} checkpoint_bytes={ckpt_bytes} "
        f"census BN={census.BatchNorm} ReLU={census.ReLU} Eltwise={census.Eltwise} Concat={census.Concat}"
    )
    print(summary, file=sys.stdout if args.out else sys.stderr)
    return 0


def cmd_config(args) -> int:
    cfg = _arch(args)
    _emit(dump_config(cfg).encode(), args.out)
    return 0


def _load_dataset(name: str, data: str | None):
    root = data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset directory: pass --data or set {DATA_ENV}")
    loader = dataio.load_cifar10 if name == "cifar10" else dataio.load_cifar100
    return loader(root)


LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "wall_time_s")


def cmd_train(args) -> int:
    from .training import OptimConfig, fit

    train, _ = _load_dataset(args.dataset, args.data)
    if args.subset is not None or args.class_ids:
        k = args.subset if args.subset is not None else len(train)
        train = train.subset_per_class(k, args.class_ids or None)
    train = dataio.normalize_dataset(train)
    cfg = _arch(args, num_classes=train.class_count)
    graph = cfg.build().init_params(args.seed)
    ocfg = OptimConfig(batch_size=args.batch_size)
    log_path = Path(args.log or f"{args.out}.log.csv")
    with open(log_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)

        def on_epoch(rec):
            wr.writerow((rec.epoch, f"{rec.lr:.6g}", f"{rec.train_loss:.6f}", f"{rec.train_acc:.6f}", f"{rec.wall_time_s:.3f}"))
            fh.flush()
            print(f"epoch {rec.epoch} lr={rec.lr:g} loss={rec.train_loss:.4f} acc={rec.train_acc:.4f}", file=sys.stderr)

        if args.epochs > 0:
            fit(graph, train, ocfg, args.epochs, args.seed, kernel=args.kernel, on_epoch=on_epoch)
    extra = {
        dataio.NORM_MEAN_KEY: train.mean.astype(np.float64),
        dataio.NORM_STD_KEY: train.std.astype(np.float64),
    }
    if args.class_ids:
        extra["__class_ids__"] = np.asarray(args.class_ids, np.int64)
    size = dataio.save_checkpoint(graph, args.out, extra)
    print(f"wrote {args.out} ({size} bytes), log {log_path}", file=sys.stderr)
    return 0


def _graph_from_checkpoint(path):
    tensors = dataio.read_checkpoint(path)
    if dataio.CONFIG_KEY not in tensors:
        raise FormatError(f"{path}: checkpoint carries no architecture config")
    cfg = parse_config(tensors[dataio.CONFIG_KEY].tobytes().decode())
    graph = cfg.build()
    extra = dataio.load_checkpoint(path, graph)
    return graph, extra


def cmd_eval(args) -> int:
    from .training import evaluate

    graph, extra = _graph_from_checkpoint(args.ckpt)
    _, test = _load_dataset(args.dataset, args.data)
    class_ids = extra.get("__class_ids__")
    if class_ids is not None:
        test = test.subset_per_class(len(test), class_ids.tolist())
    classes = graph.output_shape[0]
    if classes != test.class_count:
        raise FormatError(
            f"checkpoint head predicts {classes} classes but {args.dataset} test split has {test.class_count}"
        )
    if dataio.NORM_MEAN_KEY in extra:
        test = dataio.normalize_dataset(test, (extra[dataio.NORM_MEAN_KEY], extra[dataio.NORM_STD_KEY]))
    if args.limit:
        test = replace(test, images=test.images[: args.limit], labels=test.labels[: args.limit])
    acc = evaluate(graph, test.images, test.labels, kernel=args.kernel)
    doc = {"model": graph.name, "dataset": args.dataset, "split": "test", "samples": len(test), "top1": acc}
    _emit((json.dumps(doc) + "\n").encode(), args.out)
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_forward

    graph = _arch(args).build().init_params(args.seed)
    rep = bench_forward(graph, args.batch, args.reps, args.warmup, args.kernel, args.threads, args.seed)
    if args.format == "json":
        data = (json.dumps(rep.to_dict(), indent=2) + "\n").encode()
    else:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("node_id", "kind", "mean_s", "std_s", "calls"))
        for n in rep.nodes:
            wr.writerow((n.node_id, n.kind, f"{n.mean_s:.9f}", f"{n.std_s:.9f}", n.calls))
        data = buf.getvalue().encode()
    _emit(data, args.out)
    shares = ", ".join(f"{k}={v:.1%}" for k, v in sorted(rep.per_kind_share.items(), key=lambda kv: -kv[1]))
    print(
        f"{graph.name} [{args.kernel}] forward {rep.end_to_end_s * 1e3:.2f} ms "
        f"(node sum {rep.node_sum_s * 1e3:.2f} ms); shares: {shares}",
        file=sys.stderr,
    )
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_battery

    reports = run_battery(args.seed, args.tol, args.samples)
    worst_name, worst = "", ("", 0.0)
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max rel err {rep.worst[1]:.3e} ({rep.worst[0]})")
        if rep.worst[1] >= worst[1]:
            worst_name, worst = name, rep.worst
    if worst[1] >= args.tol:
        print(f"gradient check failed: worst offender {worst_name}/{worst[0]} rel err {worst[1]:.3e} >= {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def arch(p, default="l-mobilenet"):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--preset", default=default, help=f"one of: {', '.join(PRESETS)}")
        g.add_argument("--config", help="architecture config file (YAML)")

    p = sub.add_parser("analyze", help="parameter / madds / MAC report and op census")
    arch(p)
    p.add_argument("--classes", type=int, help="override the classifier width")
    p.add_argument("--input-shape", type=_shape, default=None, help="CxHxW (default 3x32x32)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("config", help="print a preset as a config file")
    arch(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("train", help="train on CIFAR with Nesterov SGD")
    arch(p)
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, help="keep the first K training images per class")
    p.add_argument("--class-ids", type=_classes, help="restrict to these classes, e.g. 0,1")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--kernel", choices=("naive", "gemm"), default="gemm")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log (default <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--data")
    p.add_argument("--limit", type=int)
    p.add_argument("--kernel", choices=("naive", "gemm"), default="gemm")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-layer forward latency")
    arch(p)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--kernel", choices=("naive", "gemm"), default="gemm")
    p.add_argument("--threads", type=int)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmn: error: {exc}", file=sys.stderr)
        return 2
    except (LmnError, FileNotFoundError) as exc:
        print(f"lmn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
