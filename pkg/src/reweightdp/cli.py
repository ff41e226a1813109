"""Command line: ``bench`` timing matrix and ``train`` with a privacy report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .bench import MODELS, BenchSpec, bench_dataset, build_reference_model, run_bench, write_report
from .clipping import STRATEGIES
from .data import Dataset, load_idx, rows_as_sequence
from .layers import save_params
from .privacy import privacy_report, write_privacy_report
from .trainer import TrainConfig, train


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _str_list(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in out if t not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {STRATEGIES}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reweightdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="time clipping strategies per epoch")
    b.add_argument("--model", choices=MODELS, default="mlp")
    b.add_argument("--methods", type=_str_list, default=["reweight", "nxbp", "multiloss", "nonprivate"])
    b.add_argument("--batch-sizes", type=_int_list, default=[16, 32, 64, 128])
    b.add_argument("--depth", type=int, default=2)
    b.add_argument("--epochs", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--records", type=int, default=2000)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--out", default="report.csv")

    t = sub.add_parser("train", help="train one reference model")
    t.add_argument("--config", help="JSON run configuration; command-line flags override it")
    t.add_argument("--model", choices=MODELS, default="mlp")
    t.add_argument("--method", choices=STRATEGIES)
    t.add_argument("--clip", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--noise-mode", choices=("std", "multiplier"))
    t.add_argument("--target-eps", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--seed", type=int)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--records", type=int, default=2000)
    t.add_argument("--images", help="IDX image file (MNIST layout); synthetic data if omitted")
    t.add_argument("--labels", help="IDX label file")
    t.add_argument("--metrics", help="append per-epoch metrics to this CSV")
    t.add_argument("--eps-report", help="write the privacy report JSON here")
    t.add_argument("--save-params", help="directory for the trained parameters")
    return p


def _train_config(args) -> TrainConfig:
    base = json.loads(open(args.config).read()) if args.config else {}
    names = {f.name for f in fields(TrainConfig)}
    flag_map = {"method": args.method, "clip": args.clip, "sigma": args.sigma,
                "noise_mode": args.noise_mode, "target_eps": args.target_eps,
                "delta": args.delta, "epochs": args.epochs, "batch_size": args.batch_size,
                "lr": args.lr, "optimizer": args.optimizer, "seed": args.seed}
    base.update({k: v for k, v in flag_map.items() if v is not None})
    unknown = set(base) - names
    if unknown:
        raise SystemExit(f"unknown configuration keys: {sorted(unknown)}")
    return TrainConfig(**base)


def _dataset(args, seed: int) -> Dataset:
    if args.images:
        if not args.labels:
            raise SystemExit("--images requires --labels")
        ds = load_idx(args.images, args.labels)
        if args.model in ("rnn", "lstm"):
            ds = Dataset(rows_as_sequence(ds.features), ds.targets, ds.num_classes)
        return ds
    return bench_dataset(args.model, args.records, seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench":
        spec = BenchSpec(model=args.model, methods=args.methods, batch_sizes=args.batch_sizes,
                         depth=args.depth, epochs=args.epochs, warmup=args.warmup,
                         records=args.records, seed=args.seed, threads=args.threads)
        rows = run_bench(spec)
        write_report(rows, args.out)
        for r in rows:
            print(f"{r['model']},{r['method']},{r['batch']},{r['depth']},"
                  f"{r['epoch_seconds_median']:.4f},{r['speedup_vs_nxbp']:.2f},"
                  f"{r['final_accuracy']:.4f},{r['thread_count']}")
        return 0

    config = _train_config(args)
    ds = _dataset(args, config.seed)
    model = build_reference_model(args.model, args.depth, ds.features.shape[1:], ds.num_classes,
                                  config.seed)
    model, ledger, metrics = train(model, ds, config, metrics_csv=args.metrics)
    for m in metrics:
        print(f"epoch {m.epoch}: {m.wall_seconds:.3f}s loss={m.loss:.4f} acc={m.accuracy:.4f} "
              f"eps'={m.eps_prime:.4g}")
    if args.eps_report:
        report = privacy_report(ledger, config.noise_std(), config.clip, config.batch_size,
                                config.delta)
        write_privacy_report(args.eps_report, report)
    if args.save_params:
        save_params(model.parameters(), args.save_params)
    return 0


if __name__ == "__main__":
    sys.exit(main())
