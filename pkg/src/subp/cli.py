"""Command-line front end: ``subp {train,export,infer,bench,dataset}``.

Failures exit nonzero with a single stderr line ``error:<category>:<message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import assert_uniform
from .bsr import deserialize, export_model, serialize, to_tinynet
from .config import RunConfig, load_config, parse_config
from .data import save_raw
from .errors import ConfigError, FormatError, InputError, SubpError
from .model import TinyNet
from .sparse_infer import MODES, bench_kernel, infer_model, write_csv
from .train import predict, summary, train_subp

log = logging.getLogger("subp")


class UsageError(SubpError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: TinyNet, masks: dict, config: RunConfig) -> None:
    arrays = {f"param/{k}": v for k, v in model.params().items()}
    arrays.update({f"mask/{k}": v for k, v in masks.items()})
    arrays["config"] = np.frombuffer(config.to_text().encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return (model, masks, config) from a checkpoint written by ``train``."""
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    if "config" not in data:
        raise InputError(f"{path} is not a subp checkpoint")
    config = parse_config(data["config"].tobytes().decode(), f"{path}:config")
    model = TinyNet.create(config.image_channels, config.channels, config.num_classes, np.random.default_rng(0))
    model.load_params({k[len("param/"):]: v for k, v in data.items() if k.startswith("param/")})
    masks = {k[len("mask/"):]: v for k, v in data.items() if k.startswith("mask/")}
    return model, masks, config


def load_init_params(path) -> dict:
    """Dense weights from a checkpoint or a plain .npz keyed like TinyNet.params()."""
    with np.load(path) as z:
        return {k.removeprefix("param/"): z[k] for k in z.files if k != "config" and not k.startswith("mask/")}


# --- commands -----------------------------------------------------------------


def _summary_line(s: dict) -> str:
    dens = ",".join(f"{k}:{v:.4f}" for k, v in s["density"].items())
    return (f"summary top1={s['top1']:.4f} flops_dense={s['flops_dense']} flops_sparse={s['flops_sparse']} "
            f"flops_prunable_dense={s['flops_prunable_dense']} "
            f"flops_prunable_sparse={s['flops_prunable_sparse']} density={dens}")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    fields = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([r["epoch"], f"{r['loss']:.6f}", f"{r['top1']:.4f}",
                    *(f"{r[f]:.4f}" for f in fields[3:])])
    return buf.getvalue()


def cmd_train(args) -> int:
    config = load_config(args.config)
    init = load_init_params(config.init_weights) if config.init_weights else None
    result = train_subp(config, init_params=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", result.model, result.masks, config)
    (out / "metrics.csv").write_text(metrics_csv(result.log))
    line = _summary_line(summary(result, config))
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return 0


def cmd_export(args) -> int:
    model, masks, config = load_checkpoint(args.checkpoint)
    if not model.convs:
        raise FormatError("checkpoint holds no layers; nothing to export")
    for name, m in masks.items():
        try:
            assert_uniform(m)
        except SubpError as exc:
            raise type(exc)(f"{name}: {exc}") from None
    data = serialize(export_model(model, masks, config.n))
    Path(args.out).write_bytes(data)
    print(f"wrote {args.out} ({len(data)} bytes)")
    return 0


def cmd_infer(args) -> int:
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    try:
        buf = Path(args.model).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {args.model}: {exc.strerror}") from None
    bsr_model = deserialize(buf)
    ds = load_config(args.config).dataset()
    if args.decoded:
        model, masks = to_tinynet(bsr_model)
        logits = predict(model, ds.x_val, masks)
    else:
        logits = np.concatenate([infer_model(bsr_model, ds.x_val[i : i + 256], args.workers)
                                 for i in range(0, len(ds.x_val), 256)])
    top1 = float((logits.argmax(axis=1) == ds.y_val).mean())
    print(f"top1={top1:.4f} samples={len(ds.y_val)} workers={args.workers} path={'decoded' if args.decoded else 'sparse'}")
    return 0


def _csv_list(kind):
    def parse(s):
        try:
            return [kind(x) for x in s.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {s!r}") from None
    return parse


def cmd_bench(args) -> int:
    shape = tuple(args.shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ConfigError(f"--shape needs four positive integers C_out,C_in,Kh,Kw, got {args.shape}")
    for m in args.mode:
        if m not in MODES:
            raise ConfigError(f"--mode must be one of {MODES}, got {m!r}")
    if any(not 0 <= p < 1 for p in args.p) or any(w < 1 for w in args.workers) or args.repeats < 1:
        raise ConfigError("--p must be in [0, 1), --workers >= 1, --repeats >= 1")
    rows = []
    for mode in args.mode:
        for n in args.n:
            for p in args.p:
                for w in args.workers:
                    r = bench_kernel(shape, n, p, mode, w, args.repeats, args.warmup, args.patches,
                                     args.seed, args.adversarial)
                    rows.append(r)
    if args.out:
        path = Path(args.out)
        fresh = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            write_csv(rows, fh, header=fresh)
    write_csv(rows, sys.stdout)
    return 0


def cmd_dataset(args) -> int:
    config = load_config(args.config)
    ds = config.dataset()
    save_raw(ds, args.out)
    print(f"wrote {args.out} ({len(ds.y_train)} train, {len(ds.y_val)} val)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subp", description="Soft uniform 1xN block pruning: train, export, infer, bench.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a key=value config")
    p.add_argument("config")
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="write a trained checkpoint as a .subp file")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="top-1 of a .subp model on the config's validation split")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--decoded", action="store_true", help="decode to dense weights instead of BSR kernels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time dense / uniform / non-uniform kernels")
    p.add_argument("--n", type=_csv_list(int), default=[16])
    p.add_argument("--p", type=_csv_list(float), default=[0.75])
    p.add_argument("--mode", type=_csv_list(str), default=["uniform"])
    p.add_argument("--workers", type=_csv_list(int), default=[1])
    p.add_argument("--shape", type=_csv_list(int), default=[256, 256, 3, 3], help="C_out,C_in,Kh,Kw")
    p.add_argument("--patches", type=int, default=784, help="im2col rows (batch * H_out * W_out)")
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adversarial", action="store_true",
                   help="non-uniform mode packs all kept blocks into the leading row groups")
    p.add_argument("--out", help="append rows to this CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dataset", help="write the config's dataset in the raw binary layout")
    p.add_argument("config")
    p.add_argument("out")
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except SubpError as exc:
        print(f"error:{exc.category}:{exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error:io:{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
