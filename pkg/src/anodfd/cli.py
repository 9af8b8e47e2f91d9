"""Command-line entry point: synth, train, eval, infer, bench, ablate.

Exit codes: 0 success, 2 usage/validation, 3 numeric failure, 4 partial
ablation failure. Progress goes to stderr; results go to files and stdout.
"""
import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import kernels
from .data import (GENERATOR_VERSION, REGIMES, SPLITS, SynthConfig, generate_pair, load_dataset,
                   read_pnm, resize_pair, save_dataset, stack_pairs, write_pnm)
from .errors import AnoDFDError, NumericError, UsageError
from .metrics import (confusion_counts, metrics_from_counts, roc_auc_eer, write_bench_csv, write_fmap,
                      write_metrics_csv, write_roc_csv, fps_benchmark, ablation_run)
from .model import AnoDFDNet, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger("anodfd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _int_list(text):
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return values


def _open_unit(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {v}")
    return v


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _size(text):
    try:
        parts = [int(t) for t in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 8:
        raise argparse.ArgumentTypeError(f"size must be N or HxW with sides >= 8, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def write_run_manifest(out_dir, command, values, seed):
    """Record the resolved invocation before any other output is written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}", f"seed={seed}",
             f"started={_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
             f"kernels={kernels.backend()}"]
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(map(str, v))
        lines.append(f"{k}={v}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_config(args, pairs=None):
    if args.config:
        cfg = ModelConfig.load(args.config)
    else:
        kw = {}
        if pairs:
            (h, w), c = pairs[0].size, pairs[0].channels
            kw = dict(input_h=h, input_w=w, input_c=c)
        cfg = ModelConfig(**kw)
    changes = {}
    for flag in ("layers", "embed_dim", "heads", "stages", "channels", "mlp_ratio"):
        v = getattr(args, flag, None)
        if v is not None:
            changes[flag] = tuple(v) if flag == "channels" else v
    if getattr(args, "seed", None) is not None and not args.config:
        changes["seed"] = args.seed
    return cfg.with_(**changes) if changes else cfg


def _fit_pairs(pairs, cfg):
    size = (cfg.input_h, cfg.input_w)
    out = []
    for p in pairs:
        if p.channels != cfg.input_c:
            raise UsageError(f"pair {p.id} has {p.channels} channels, model expects {cfg.input_c}")
        out.append(p if p.size == size else resize_pair(p, size))
    return out


def _load_model(checkpoint, config_path):
    checkpoint = Path(checkpoint)
    cfg_path = Path(config_path) if config_path else checkpoint.parent / "model.cfg"
    cfg = ModelConfig.load(cfg_path)
    model = AnoDFDNet(cfg)
    model.load(checkpoint)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    overrides = {}
    for flag, key in (("translation", "max_translation"), ("rotation", "max_rotation"),
                      ("illumination", "illumination"), ("noise", "noise_sigma"),
                      ("anomaly_prob", "anomaly_prob")):
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    cfg = SynthConfig.preset(args.regime, args.count, args.size, seed=args.seed, split=args.split,
                             channels=args.channels, **overrides)
    values = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    write_run_manifest(args.out, "synth", values, args.seed)
    pairs = []
    for i in range(cfg.count):
        pairs.append(generate_pair(cfg, i))
        if (i + 1) % 50 == 0:
            log.info("generated %d/%d pairs", i + 1, cfg.count)
    header = {"generator": GENERATOR_VERSION, "seed": cfg.seed, "regime": cfg.regime, "split": cfg.split,
              "size": f"{cfg.size[0]}x{cfg.size[1]}", "channels": cfg.channels}
    save_dataset(pairs, args.out, regime=cfg.regime, header=header)
    print(f"wrote {cfg.count} pairs to {args.out}")
    return EXIT_OK


def _train_config(args, out):
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       split_ratio=args.split_ratio, seed=args.seed, checkpoint_dir=str(out))


def cmd_train(args):
    pairs, _ = load_dataset(args.data)
    cfg = _model_config(args, pairs)
    tcfg = _train_config(args, args.out)
    values = {f"model.{k}": getattr(cfg, k) for k in cfg.__dataclass_fields__}
    values.update({f"train.{k}": getattr(tcfg, k) for k in tcfg.__dataclass_fields__})
    values["data"] = args.data
    values["resume"] = args.resume or ""
    write_run_manifest(args.out, "train", values, args.seed)
    pairs = _fit_pairs(pairs, cfg)
    model = AnoDFDNet(cfg)
    best, records = train(model, pairs, tcfg, resume_from=args.resume)
    for r in records:
        print(f"epoch {r.epoch} loss {r.loss:.6f} f1 {r.f1:.4f} iou {r.iou:.4f}")
    print(f"best checkpoint: {best}")
    return EXIT_OK


def cmd_eval(args):
    model = _load_model(args.checkpoint, args.config)
    pairs, manifest = load_dataset(args.data)
    if not manifest.has_masks():
        raise UsageError(f"ground truth required: {args.data} has pairs without masks")
    write_run_manifest(args.out, "eval", {"checkpoint": args.checkpoint, "data": args.data,
                                          "threshold": args.threshold}, model.config.seed)
    pairs = _fit_pairs(pairs, model.config)
    cur, his, masks = stack_pairs(pairs, model.dtype)
    maps = model.predict(cur, his)
    m = metrics_from_counts(confusion_counts(maps, masks, args.threshold))
    out = Path(args.out)
    write_metrics_csv(out / "metrics.csv", args.threshold, m)
    if masks.min() != masks.max():
        roc = roc_auc_eer(maps, masks)
        write_roc_csv(out / "roc.csv", roc)
        print(f"auc {roc.auc:.6f} eer {roc.eer:.6f}")
    else:
        log.warning("all evaluated pixels share one label; ROC skipped")
    print(" ".join(f"{k} {m[k]:.6f}" for k in ("pre", "re", "oa", "f1", "iou")))
    return EXIT_OK


def cmd_infer(args):
    model = _load_model(args.checkpoint, args.config)
    cfg = model.config
    cur, his = read_pnm(args.cur), read_pnm(args.his)
    if cur.shape != his.shape:
        raise UsageError(f"cur {args.cur} is {cur.shape} but his {args.his} is {his.shape}")
    if cur.shape != (cfg.input_h, cfg.input_w, cfg.input_c):
        raise UsageError(f"images are {cur.shape}, model expects {(cfg.input_h, cfg.input_w, cfg.input_c)}")
    out = Path(args.out)
    write_run_manifest(out.parent, "infer", {"checkpoint": args.checkpoint, "cur": args.cur,
                                             "his": args.his, "out": args.out}, cfg.seed)
    to_chw = lambda a: (a.transpose(2, 0, 1) / 255.0).astype(model.dtype)  # noqa: E731
    a = model.predict(to_chw(cur)[None], to_chw(his)[None])[0]
    write_pnm(out, np.round(a * 255.0).astype(np.uint8))
    write_fmap(out.with_suffix(".f32raw"), a)
    print(f"max score {float(a.max()):.6f}")
    return EXIT_OK


def cmd_bench(args):
    if args.checkpoint:
        model = _load_model(args.checkpoint, args.config)
        base = model.config
    else:
        base = ModelConfig.load(args.config) if args.config else ModelConfig()
        model = None
    layers = args.layers or [base.layers]
    write_run_manifest(args.out, "bench", {"checkpoint": args.checkpoint or "", "config": args.config or "",
                                           "layers": layers, "iters": args.iters, "warmup": args.warmup,
                                           "runs": args.runs}, args.seed)
    rng = np.random.default_rng(args.seed)
    shape = (base.input_c, base.input_h, base.input_w)
    frames = [(rng.random(shape), rng.random(shape)) for _ in range(4)]
    reports = []
    for L in layers:
        m = model if model is not None and L == base.layers else AnoDFDNet(base.with_(layers=L))
        runs = [fps_benchmark(m, frames, args.warmup, args.iters) for _ in range(args.runs)]
        rep = runs[0]
        rep.fps = float(np.mean([r.fps for r in runs]))
        rep.mean_ms = float(np.mean([r.mean_ms for r in runs]))
        rep.std_ms = float(np.mean([r.std_ms for r in runs]))
        reports.append(rep)
        print(f"layers {L} fps {rep.fps:.3f} mean_ms {rep.mean_ms:.3f} std_ms {rep.std_ms:.3f}")
    write_bench_csv(Path(args.out) / "bench.csv", reports)
    return EXIT_OK


def cmd_ablate(args):
    pairs, _ = load_dataset(args.data)
    test_pairs, test_manifest = load_dataset(args.test_data)
    if not test_manifest.has_masks():
        raise UsageError(f"ground truth required: {args.test_data} has pairs without masks")
    cfg = _model_config(args, pairs)
    tcfg = _train_config(args, args.out)
    seeds = args.seeds or [args.seed]
    values = {f"model.{k}": getattr(cfg, k) for k in cfg.__dataclass_fields__}
    values.update({f"train.{k}": getattr(tcfg, k) for k in tcfg.__dataclass_fields__})
    values.update({"layers": args.layer_list, "seeds": seeds, "data": args.data, "test_data": args.test_data})
    write_run_manifest(args.out, "ablate", values, args.seed)
    rows = ablation_run(cfg, args.layer_list, _fit_pairs(pairs, cfg), _fit_pairs(test_pairs, cfg), tcfg,
                        args.out, seeds=seeds)
    for r in rows:
        status = f"FAILED ({r.error})" if r.failed else f"f1 {r.f1:.4f} iou {r.iou:.4f} fps {r.fps:.2f}"
        print(f"layers {r.layers}: {status}")
    return EXIT_PARTIAL if any(r.failed for r in rows) else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--config", help="model config file (key=value)")
    p.add_argument("--layers", type=_non_negative_int, help="Transformer layer count")
    p.add_argument("--embed-dim", type=_positive_int)
    p.add_argument("--heads", type=_positive_int)
    p.add_argument("--stages", type=_positive_int)
    p.add_argument("--channels", type=_int_list, help="encoder channels per stage, e.g. 16,32,64")
    p.add_argument("--mlp-ratio", type=_positive_int)


def _add_train_flags(p):
    p.add_argument("--epochs", type=_positive_int, default=60)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--split-ratio", type=_open_unit, default=0.8)


def build_parser():
    parser = argparse.ArgumentParser(prog="anodfd", description="Paired-image anomaly detection.")
    parser.add_argument("--version", action="version", version=f"anodfd {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--regime", choices=REGIMES, default="fb-style")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--split", choices=SPLITS, default="trainval")
    p.add_argument("--anomaly-prob", type=_unit)
    p.add_argument("--translation", type=float, help="max viewpoint shift in pixels")
    p.add_argument("--rotation", type=float, help="max viewpoint rotation in degrees")
    p.add_argument("--illumination", type=float, help="max multiplicative gain delta")
    p.add_argument("--noise", type=float, help="sensor noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from a last.ckpt")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics and ROC of a checkpoint on a masked dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config (default: model.cfg next to the checkpoint)")
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=_open_unit, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="anomaly map for one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--cur", required=True)
    p.add_argument("--his", required=True)
    p.add_argument("--out", required=True, help="output .pnm; a .f32raw sidecar is written beside it")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="inference speed per Transformer layer count")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--layers", type=_int_list, help="comma list of layer counts to benchmark")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and evaluate one model per layer count")
    p.add_argument("--layers", dest="layer_list", type=_int_list, required=True,
                   help="comma list of layer counts, e.g. 0,1,2,4,8")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    for flag in ("--embed-dim", "--heads", "--stages", "--mlp-ratio"):
        p.add_argument(flag, type=_positive_int)
    p.add_argument("--channels", type=_int_list)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench" and args.iters < 30:
        parser.error(f"argument --iters: must be >= 30, got {args.iters}")
    if args.command == "bench" and args.warmup < 5:
        parser.error(f"argument --warmup: must be >= 5, got {args.warmup}")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"anodfd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AnoDFDError as exc:
        print(f"anodfd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
