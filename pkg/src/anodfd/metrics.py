"""Pixel-level evaluation, ROC/AUC/EER, inference speed, layer ablation, feature export.

Counts are micro-averaged: confusion counts are pooled over every pixel of
every evaluated pair before any ratio is taken.
"""
import csv
import logging
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataIOError, UsageError, ValidationError

log = logging.getLogger(__name__)

METRICS_HEADER = ("threshold", "pre", "re", "oa", "f1", "iou")
ROC_HEADER = ("threshold", "fpr", "tpr")
ABLATION_HEADER = ("layers", "pre", "re", "oa", "f1", "iou", "fps")
BENCH_HEADER = ("layers", "fps", "mean_ms", "std_ms", "warmup", "iters")
FMAP_MAGIC = b"FMAP"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion_counts(maps, masks, threshold=0.5):
    """Pool TP/FP/FN/TN over all pixels; a pixel is positive iff score >= threshold."""
    maps, masks = list(maps), list(masks)
    if not maps:
        raise UsageError("confusion_counts needs at least one map")
    if len(maps) != len(masks):
        raise UsageError(f"{len(maps)} maps but {len(masks)} masks")
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must lie in (0, 1), got {threshold}")
    tp = fp = fn = tn = 0
    for a, y in zip(maps, masks):
        a, y = np.asarray(a), np.asarray(y)
        if a.shape != y.shape:
            raise UsageError(f"map shape {a.shape} != mask shape {y.shape}")
        pred = a >= threshold
        truth = y > 0.5
        tp += int(np.count_nonzero(pred & truth))
        fp += int(np.count_nonzero(pred & ~truth))
        fn += int(np.count_nonzero(~pred & truth))
        tn += int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den, tp, fp, fn):
    if den == 0:
        # nothing to find and nothing found counts as perfect
        return 1.0 if tp == fp == fn == 0 else 0.0
    return num / den


def f1_from_pre_re(pre, re):
    return 0.0 if pre + re == 0 else 2.0 * pre * re / (pre + re)


def iou_from_pre_re(pre, re):
    """IoU from precision and recall: 1/IoU = 1/pre + 1/re - 1."""
    if pre == 0 or re == 0:
        return 0.0
    return pre * re / (pre + re - pre * re)


def metrics_from_counts(c):
    pre = _ratio(c.tp, c.tp + c.fp, c.tp, c.fp, c.fn)
    re = _ratio(c.tp, c.tp + c.fn, c.tp, c.fp, c.fn)
    oa = (c.tp + c.tn) / c.total if c.total else 1.0
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, c.tp, c.fp, c.fn)
    return {"pre": pre, "re": re, "oa": oa, "f1": f1_from_pre_re(pre, re), "iou": iou}


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

@dataclass
class RocCurve:
    thresholds: np.ndarray  # strictly decreasing, starts at +inf
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    eer: float
    eer_threshold: float


def roc_auc_eer(scores, labels):
    """ROC over every distinct score, trapezoidal AUC and interpolated EER."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0.5
    if s.shape != y.shape:
        raise UsageError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0:
        raise UsageError("ROC needs at least one positive label")
    if n_neg == 0:
        raise UsageError("ROC needs at least one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = last + 1 - tps
    thresholds = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    # fpr - (1 - tpr) rises from -1 to +1 along the curve
    gap = fpr - (1.0 - tpr)
    k = int(np.argmax(gap >= 0))
    if k == 0 or gap[k] == 0:
        eer, eer_thr = float(fpr[k]), float(thresholds[k])
    else:
        t = -gap[k - 1] / (gap[k] - gap[k - 1])
        eer = float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))
        lo = thresholds[k - 1] if np.isfinite(thresholds[k - 1]) else thresholds[k]
        eer_thr = float(lo + t * (thresholds[k] - lo))
    return RocCurve(thresholds, tpr, fpr, auc, eer, eer_thr)


# ---------------------------------------------------------------------------
# csv writers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows, append=False):
    path = Path(path)
    new = not (append and path.exists())
    try:
        with path.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_metrics_csv(path, threshold, m):
    _write_csv(path, METRICS_HEADER, [[_fmt(threshold)] + [_fmt(m[k]) for k in METRICS_HEADER[1:]]])


def write_roc_csv(path, roc):
    rows = [["inf" if np.isinf(t) else repr(float(t)), repr(float(f)), repr(float(p))]
            for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)]
    _write_csv(path, ROC_HEADER, rows)


# ---------------------------------------------------------------------------
# inference speed
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    config: str
    layers: int
    fps: float
    mean_ms: float
    std_ms: float
    warmup: int
    iters: int

    def row(self):
        return [self.layers, f"{self.fps:.4f}", f"{self.mean_ms:.4f}", f"{self.std_ms:.4f}", self.warmup, self.iters]


def _pair_arrays(pair, dtype):
    if hasattr(pair, "cur"):
        cur, his = pair.cur, pair.his
        return ((np.asarray(cur).transpose(2, 0, 1)[None] / 255.0).astype(dtype),
                (np.asarray(his).transpose(2, 0, 1)[None] / 255.0).astype(dtype))
    cur, his = pair
    cur, his = np.asarray(cur, dtype=dtype), np.asarray(his, dtype=dtype)
    return (cur[None] if cur.ndim == 3 else cur), (his[None] if his.ndim == 3 else his)


def fps_benchmark(model, pairs, warmup=5, iters=30):
    """Time tape-free forward passes, one pair per frame."""
    if iters < 30:
        raise UsageError(f"iters must be >= 30, got {iters}")
    if warmup < 5:
        raise UsageError(f"warmup must be >= 5, got {warmup}")
    frames = [_pair_arrays(p, model.dtype) for p in pairs]
    if not frames:
        raise UsageError("fps_benchmark needs at least one pair")
    times = []
    with T.no_grad():
        for i in range(warmup + iters):
            cur, his = frames[i % len(frames)]
            t0 = time.perf_counter()
            model.forward(cur, his)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
    times = np.asarray(times)
    mean = float(times.mean())
    cfg = model.config
    summary = (f"{cfg.input_h}x{cfg.input_w}x{cfg.input_c} stages={cfg.stages} "
               f"channels={','.join(map(str, cfg.channels))} d={cfg.embed_dim} heads={cfg.heads}")
    return BenchReport(summary, cfg.layers, 1000.0 / mean, mean, float(times.std()), warmup, iters)


def write_bench_csv(path, reports):
    _write_csv(path, BENCH_HEADER, [r.row() for r in reports], append=True)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    layers: int
    pre: float = float("nan")
    re: float = float("nan")
    oa: float = float("nan")
    f1: float = float("nan")
    iou: float = float("nan")
    fps: float = float("nan")
    failed: bool = False
    error: str = ""
    runs: list = field(default_factory=list)

    def row(self):
        return [self.layers] + [_fmt(getattr(self, k)) for k in ABLATION_HEADER[1:]]


def _dedupe_layers(layer_counts):
    out = []
    for L in layer_counts:
        if L in out:
            warnings.warn(f"layer count {L} requested more than once; running it once", stacklevel=3)
            continue
        out.append(L)
    return out


def ablation_run(base_config, layer_counts, dataset, test_pairs, train_cfg, out_dir, seeds=None, bench_iters=30):
    """Train one fresh model per layer count (and seed), evaluate on ``test_pairs``.

    Metrics are averaged over ``seeds`` (default: the base config's seed).
    A failure in one row is recorded and the remaining rows still run.
    Writes ``<out_dir>/ablation.csv`` and returns the rows.
    """
    from dataclasses import replace

    from .model import AnoDFDNet
    from .training import evaluate, train

    layer_counts = _dedupe_layers(list(layer_counts))
    if not layer_counts:
        raise UsageError("layer_counts must not be empty")
    seeds = list(seeds) if seeds else [base_config.seed]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for L in layer_counts:
        row = AblationRow(L)
        try:
            for seed in seeds:
                cfg = base_config.with_(layers=L, seed=seed)
                model = AnoDFDNet(cfg)
                tcfg = replace(train_cfg, seed=seed, checkpoint_dir=str(out_dir / f"L{L}_seed{seed}"))
                best, _ = train(model, dataset, tcfg)
                model.load(best)
                _, m = evaluate(model, test_pairs)
                m["fps"] = fps_benchmark(model, test_pairs[:4], iters=bench_iters).fps
                m["seed"] = seed
                row.runs.append(m)
                log.info("ablation L=%d seed=%d f1=%.4f iou=%.4f", L, seed, m["f1"], m["iou"])
            for k in ("pre", "re", "oa", "f1", "iou", "fps"):
                setattr(row, k, float(np.mean([r[k] for r in row.runs])))
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the others
            log.error("ablation row L=%d failed: %s", L, exc)
            row = AblationRow(L, failed=True, error=f"{type(exc).__name__}: {exc}", runs=row.runs)
        rows.append(row)
    _write_csv(out_dir / "ablation.csv", ABLATION_HEADER, [r.row() for r in rows])
    return rows


# ---------------------------------------------------------------------------
# feature export
# ---------------------------------------------------------------------------

def write_fmap(path, array):
    """Raw float32 sidecar: b'FMAP', u32 c, h, w, then row-major LE values."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValidationError(f"feature map must be (c, h, w), got {a.shape}")
    data = FMAP_MAGIC + struct.pack("<3I", *a.shape) + np.ascontiguousarray(a, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_fmap(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != FMAP_MAGIC or len(buf) < 16:
        raise ValidationError(f"{path}: not an FMAP file")
    c, h, w = struct.unpack_from("<3I", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=16).reshape(c, h, w).astype(np.float32)


def normalize_to_uint8(channel):
    """Min-max scale to 0..255; a constant channel maps to mid-grey 128."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi - lo <= 0:
        return np.full(channel.shape, 128, dtype=np.uint8)
    return np.round((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_features(model, pair, out_dir):
    """Write every decoder stage: one PNM per channel plus an ``.f32raw`` per stage."""
    from .data import write_pnm

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out_dir}: {exc}") from exc
    cur, his = _pair_arrays(pair, model.dtype)
    with T.no_grad():
        _, inter = model.forward(cur, his, return_intermediates=True)
    written = []
    for k, stage in enumerate(inter["decoder"]):
        fmap = stage.data[0]
        raw = out_dir / f"d{k}.f32raw"
        write_fmap(raw, fmap)
        written.append(raw)
        for j, channel in enumerate(fmap):
            path = out_dir / f"d{k}_c{j:03d}.pnm"
            write_pnm(path, normalize_to_uint8(channel))
            written.append(path)
    return written
