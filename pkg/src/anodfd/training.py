"""BCE objective, train/val split and the training loop with checkpointing."""
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .data import stack_pairs
from .errors import ConfigError, NumericError, UsageError
from .metrics import confusion_counts, metrics_from_counts
from .optim import Adam

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("epoch", "loss", "pre", "re", "f1", "iou", "seconds")
VAL_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 60
    batch_size: int = 4
    split_ratio: float = 0.8
    seed: int = 0
    checkpoint_dir: str = "runs/train"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    pre: float
    re: float
    f1: float
    iou: float
    seconds: float

    def row(self):
        return [self.epoch, repr(self.loss), f"{self.pre:.6f}", f"{self.re:.6f}",
                f"{self.f1:.6f}", f"{self.iou:.6f}", f"{self.seconds:.3f}"]


def bce_loss(a, y):
    """Mean per-pixel binary cross-entropy of anomaly map ``a`` against mask ``y``."""
    return T.bce(a, y)


def split_train_val(samples, ratio=0.8, seed=0):
    """Seeded shuffle, then the first floor(ratio * N) samples train, the rest validate."""
    samples = list(samples)
    if not samples:
        raise UsageError("cannot split an empty sample list")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = math.floor(ratio * len(samples))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def evaluate(model, pairs, threshold=VAL_THRESHOLD, batch_size=8):
    """Micro-averaged counts and metrics of ``model`` on masked ``pairs``."""
    cur, his, masks = stack_pairs(pairs, model.dtype)
    if masks is None:
        raise UsageError("ground truth required: some pairs have no mask")
    maps = model.predict(cur, his, batch_size)
    counts = confusion_counts(maps, masks, threshold)
    return counts, metrics_from_counts(counts)


def write_manifest(path, sections):
    lines = []
    for title, values in sections.items():
        lines.append(f"[{title}]")
        lines.extend(f"{k}={v}" for k, v in values.items())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_state(model, opt, epoch, best_f1):
    extra = opt.state_arrays()
    extra["train/epoch"] = np.asarray(epoch)
    extra["train/best_f1"] = np.asarray(best_f1)
    return extra


def train(model, dataset, cfg, resume_from=None, progress=None):
    """Fit ``model`` on ``dataset`` (list of ImagePair) and keep best/last checkpoints.

    Returns the path of the best-by-validation-F1 checkpoint and one
    ``TrainRecord`` per epoch run. With ``resume_from`` the parameters,
    optimizer moments and epoch counter are restored from that checkpoint and
    training continues with the following epoch.
    """
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = split_train_val(dataset, cfg.split_ratio, cfg.seed)
    if not train_set:
        raise UsageError(f"split left no training samples from {len(dataset)} pairs")
    size = train_set[0].size
    mc = model.config
    if size != (mc.input_h, mc.input_w) or train_set[0].channels != mc.input_c:
        raise ConfigError(f"dataset pairs are {size}x{train_set[0].channels}, model expects "
                          f"{(mc.input_h, mc.input_w)}x{mc.input_c}")
    cur, his, masks = stack_pairs(train_set, model.dtype)
    if masks is None:
        raise UsageError("ground truth required for training")

    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    start, best_f1 = 1, -1.0
    if resume_from is not None:
        arrays = model.load(resume_from)
        opt.load_state_arrays(arrays)
        start = int(round(float(arrays["train/epoch"]))) + 1
        best_f1 = float(arrays["train/best_f1"])

    manifest = {
        "train": {k: v for k, v in asdict(cfg).items()},
        "model": {k: (",".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in asdict(mc).items()},
        "defaults": {
            "dtype": model.dtype.name, "kernels": kernels.backend(), "val_metric": "f1@0.5",
            "weight_init": "uniform(+-1/sqrt(fan_in)), zero bias", "pos_embed_init": "normal(0, 0.02)",
            "layer_norm": "gamma=1 beta=0 eps=1e-5", "bce_clamp": T.BCE_CLAMP,
            "n_train": len(train_set), "n_val": len(val_set),
            "resumed_from": resume_from or "",
        },
    }
    write_manifest(out / "manifest.txt", manifest)
    mc.save(out / "model.cfg")

    log_path = out / "train_log.csv"
    if resume_from is None or not log_path.exists():
        with log_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(TRAIN_LOG_HEADER)

    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    if resume_from is not None and not best_path.exists():
        model.save(best_path, _train_state(model, opt, start - 1, best_f1))
    records = []
    n = len(train_set)
    for epoch in range(start, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            loss = bce_loss(model.forward(cur[idx], his[idx]), masks[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            total += value * len(idx)
        _, m = evaluate(model, val_set)
        rec = TrainRecord(epoch, total / n, m["pre"], m["re"], m["f1"], m["iou"], time.perf_counter() - t0)
        records.append(rec)
        if m["f1"] > best_f1:
            best_f1 = m["f1"]
            model.save(best_path, _train_state(model, opt, epoch, best_f1))
        model.save(last_path, _train_state(model, opt, epoch, best_f1))
        with log_path.open("a", newline="") as fh:
            csv.writer(fh).writerow(rec.row())
        log.info("epoch %d loss %.5f val f1 %.4f iou %.4f (%.1fs)", epoch, rec.loss, rec.f1, rec.iou, rec.seconds)
        if progress is not None:
            progress(rec)
    return best_path, records
