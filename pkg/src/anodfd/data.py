"""Paired-image datasets: synthetic generator, PNM storage, manifests, resizing.

The generator renders an analytic scene (graded background, plates, bolts,
pipes) and photographs it twice. The history image sees the scene through a
small random viewpoint change; both images get independent illumination and
sensor noise. With probability ``anomaly_prob`` the current image also gets
an injected anomaly whose pixels form the ground-truth mask.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataIOError, ValidationError

GENERATOR_VERSION = "anodfd-synth-1"
REGIMES = ("diff-style", "fb-style", "ol-style")
SPLITS = ("trainval", "test")

# viewpoint bounds as fractions of min(H, W); diff >= fb > ol
_PRESETS = {
    "diff-style": dict(max_translation=0.07, max_rotation=5.0, illumination=0.2, noise_sigma=0.02),
    "fb-style": dict(max_translation=0.04, max_rotation=2.5, illumination=0.15, noise_sigma=0.02),
    "ol-style": dict(max_translation=0.015, max_rotation=0.5, illumination=0.1, noise_sigma=0.015),
}


@dataclass
class ImagePair:
    id: str
    cur: np.ndarray
    his: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.cur = _as_image(self.cur, f"{self.id}/cur")
        self.his = _as_image(self.his, f"{self.id}/his")
        if self.cur.shape != self.his.shape:
            raise ValidationError(f"pair {self.id}: cur {self.cur.shape} and his {self.his.shape} differ")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != self.cur.shape[:2]:
                raise ValidationError(f"pair {self.id}: mask {mask.shape} does not match image {self.cur.shape[:2]}")
            if not np.isin(mask, (0, 1)).all():
                raise ValidationError(f"pair {self.id}: mask has non-binary values")
            self.mask = mask.astype(np.uint8)

    @property
    def size(self):
        return self.cur.shape[:2]

    @property
    def channels(self):
        return self.cur.shape[2]


def _as_image(a, what):
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.dtype != np.uint8:
        raise ValidationError(f"{what}: expected uint8 HxW or HxWxC image, got {a.dtype} {a.shape}")
    return a


@dataclass(frozen=True)
class SynthConfig:
    regime: str = "fb-style"
    count: int = 16
    size: tuple = (64, 64)
    channels: int = 1
    max_translation: float = 2.5
    max_rotation: float = 2.5
    illumination: float = 0.15
    noise_sigma: float = 0.02
    anomaly_prob: float = 0.75
    seed: int = 0
    split: str = "trainval"

    def __post_init__(self):
        size = self.size
        if isinstance(size, int):
            size = (size, size)
        object.__setattr__(self, "size", tuple(int(s) for s in size))
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if min(self.size) < 8:
            raise ConfigError(f"size must be at least 8x8, got {self.size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not 0 <= self.max_translation < min(self.size) / 4:
            raise ConfigError(f"max_translation must be in [0, {min(self.size) / 4}), got {self.max_translation}")
        if self.max_rotation < 0 or self.illumination < 0 or self.noise_sigma < 0:
            raise ConfigError("nuisance magnitudes must be non-negative")
        if self.illumination >= 1:
            raise ConfigError(f"illumination gain delta must be < 1, got {self.illumination}")
        if not 0.0 <= self.anomaly_prob <= 1.0:
            raise ConfigError(f"anomaly_prob must be in [0, 1], got {self.anomaly_prob}")

    @classmethod
    def preset(cls, regime, count, size=64, seed=0, **overrides):
        """Regime defaults scaled to the image size."""
        if regime not in _PRESETS:
            raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
        side = size if isinstance(size, int) else min(size)
        p = dict(_PRESETS[regime])
        p["max_translation"] = round(p["max_translation"] * side, 3)
        p.update(overrides)
        return cls(regime=regime, count=count, size=size, seed=seed, **p)


# ---------------------------------------------------------------------------
# analytic scene elements
# ---------------------------------------------------------------------------

@dataclass
class _Element:
    kind: str
    params: dict
    color: np.ndarray
    multiply: bool = False
    removable: bool = True

    def contains(self, X, Y):
        p = self.params
        if self.kind == "rect":
            c, s = np.cos(p["angle"]), np.sin(p["angle"])
            u = (X - p["cx"]) * c + (Y - p["cy"]) * s
            v = -(X - p["cx"]) * s + (Y - p["cy"]) * c
            return (np.abs(u) <= p["hw"]) & (np.abs(v) <= p["hh"])
        if self.kind == "ellipse":
            return ((X - p["cx"]) / p["rx"]) ** 2 + ((Y - p["cy"]) / p["ry"]) ** 2 <= 1.0
        if self.kind == "segment":
            x0, y0, x1, y1 = p["x0"], p["y0"], p["x1"], p["y1"]
            dx, dy = x1 - x0, y1 - y0
            t = np.clip(((X - x0) * dx + (Y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
            return (X - x0 - t * dx) ** 2 + (Y - y0 - t * dy) ** 2 <= (p["width"] / 2) ** 2
        if self.kind == "blob":
            radii = p["radii"]
            k = len(radii)
            ang = np.arctan2(Y - p["cy"], X - p["cx"]) % (2 * np.pi)
            pos = ang / (2 * np.pi) * k
            i0 = np.floor(pos).astype(int) % k
            frac = pos - np.floor(pos)
            r = radii[i0] * (1 - frac) + radii[(i0 + 1) % k] * frac
            return np.hypot(X - p["cx"], Y - p["cy"]) <= r
        raise ValueError(self.kind)


@dataclass
class _Scene:
    base: float
    gx: float
    gy: float
    tint: np.ndarray
    elements: list = field(default_factory=list)


def _color(rng, level, channels, tint_scale=0.2):
    if channels == 1:
        return np.array([level])
    return np.clip(level * (1 + rng.uniform(-tint_scale, tint_scale, channels)), 0.02, 0.98)


def _scene(rng, H, W, C):
    s = min(H, W) / 64.0
    base = rng.uniform(0.3, 0.5)
    scene = _Scene(base, rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), _color(rng, 1.0, C, 0.1))

    def level():
        while True:
            v = rng.uniform(0.15, 0.85)
            if abs(v - base) >= 0.15:
                return v

    for _ in range(rng.integers(1, 3)):
        # pipe spanning the frame, entering and leaving through opposite sides
        if rng.random() < 0.5:
            x0, y0, x1, y1 = -4.0, rng.uniform(0, H), W + 4.0, rng.uniform(0, H)
        else:
            x0, y0, x1, y1 = rng.uniform(0, W), -4.0, rng.uniform(0, W), H + 4.0
        scene.elements.append(_Element("segment", dict(x0=x0, y0=y0, x1=x1, y1=y1, width=rng.uniform(3, 6) * s),
                                       _color(rng, level(), C), removable=False))
    for _ in range(rng.integers(2, 5)):
        scene.elements.append(_Element("rect", dict(
            cx=rng.uniform(0.1, 0.9) * W, cy=rng.uniform(0.1, 0.9) * H,
            hw=rng.uniform(4, 12) * s, hh=rng.uniform(4, 12) * s, angle=rng.uniform(0, np.pi)),
            _color(rng, level(), C)))
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(3, 7) * s
        scene.elements.append(_Element("ellipse", dict(
            cx=rng.uniform(0.1, 0.9) * W, cy=rng.uniform(0.1, 0.9) * H, rx=r, ry=r * rng.uniform(0.8, 1.2)),
            _color(rng, level(), C)))
    return scene


def _render(scene, X, Y, H, W):
    bg = scene.base + scene.gx * (X / W - 0.5) + scene.gy * (Y / H - 0.5)
    img = bg[:, :, None] * scene.tint
    for el in scene.elements:
        m = el.contains(X, Y)
        if el.multiply:
            img[m] *= el.color
        else:
            img[m] = el.color
    return img


def _blob(rng, cx, cy, radius, k=7):
    return dict(cx=cx, cy=cy, radii=radius * rng.uniform(0.6, 1.3, size=k))


def _contrast_level(rng, local):
    """Anomaly intensity far from the local scene value."""
    return rng.uniform(0.0, 0.12) if local > 0.5 else rng.uniform(0.88, 1.0)


def _anomaly(rng, cfg, scene, X, Y, clean, force_blob=False):
    """Mutate ``scene`` in place with one regime-specific anomaly."""
    H, W = cfg.size
    C = cfg.channels
    s = min(H, W) / 64.0
    margin = 8 * s

    def spot():
        return rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)

    kind = "blob"
    if cfg.regime == "diff-style":
        kind = rng.choice(["blob", "missing", "scratch"], p=[0.4, 0.35, 0.25])
    elif cfg.regime == "ol-style":
        kind = "stain"
    if force_blob:
        kind = "blob"

    if kind == "missing":
        visible = []
        for i, el in enumerate(scene.elements):
            if not el.removable:
                continue
            on_top = el.contains(X, Y)
            for later in scene.elements[i + 1:]:
                on_top &= ~later.contains(X, Y)
            if on_top.sum() >= 12 * s * s:
                visible.append(i)
        if visible:
            del scene.elements[visible[rng.integers(len(visible))]]
            return
        kind = "blob"

    if kind == "scratch":
        cx, cy = spot()
        length, ang = rng.uniform(14, 28) * s, rng.uniform(0, np.pi)
        dx, dy = 0.5 * length * np.cos(ang), 0.5 * length * np.sin(ang)
        local = clean[int(cy), int(cx)].mean()
        scene.elements.append(_Element("segment", dict(x0=cx - dx, y0=cy - dy, x1=cx + dx, y1=cy + dy,
                                                       width=1.6 * s), _color(rng, _contrast_level(rng, local), C)))
        return

    if kind == "stain":
        cx, cy = spot()
        factor = rng.uniform(0.3, 0.45)
        for _ in range(rng.integers(2, 5)):
            ox, oy = rng.normal(0, 3 * s, 2)
            scene.elements.append(_Element("blob", _blob(rng, cx + ox, cy + oy, rng.uniform(3, 7) * s),
                                           np.full(C, factor), multiply=True))
        return

    cx, cy = spot()
    local = clean[int(cy), int(cx)].mean()
    scene.elements.append(_Element("blob", _blob(rng, cx, cy, rng.uniform(3, 7) * s),
                                   _color(rng, _contrast_level(rng, local), C)))


def _illumination(rng, delta, X, Y, H, W):
    gain = rng.uniform(1 - delta, 1 + delta)
    ax, ay = rng.uniform(-1, 1, 2)
    return gain * (1 + 0.5 * delta * (ax * (X / W - 0.5) + ay * (Y / H - 0.5)))


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _streams(cfg, index):
    # scene, history nuisance, current nuisance, anomaly
    key = [cfg.seed, REGIMES.index(cfg.regime), SPLITS.index(cfg.split), index]
    return [np.random.default_rng(np.random.SeedSequence(key + [k])) for k in range(4)]


def generate_pair(cfg, index, skip_injection=False):
    """Render pair ``index`` of the synthetic set described by ``cfg``.

    Deterministic in (cfg, index). ``skip_injection`` renders the same pair
    with the anomaly step left out, which is how mask soundness is checked.
    """
    if not 0 <= index < cfg.count:
        raise ConfigError(f"index {index} out of range for count {cfg.count}")
    H, W = cfg.size
    C = cfg.channels
    rs, rh, rc, ra = _streams(cfg, index)
    Y, X = np.mgrid[0:H, 0:W].astype(np.float64)
    scene = _scene(rs, H, W, C)

    # history frame: scene seen through a rotated, shifted viewpoint
    tx, ty = rh.uniform(-cfg.max_translation, cfg.max_translation, 2)
    theta = np.deg2rad(rh.uniform(-cfg.max_rotation, cfg.max_rotation))
    c, s = np.cos(theta), np.sin(theta)
    Xc, Yc = X - W / 2 + 0.5, Y - H / 2 + 0.5
    Xh = c * Xc - s * Yc + W / 2 - 0.5 + tx
    Yh = s * Xc + c * Yc + H / 2 - 0.5 + ty
    his = _render(scene, Xh, Yh, H, W) * _illumination(rh, cfg.illumination, X, Y, H, W)[:, :, None]
    his = _quantize(his + rh.normal(0.0, cfg.noise_sigma, his.shape))

    clean = _render(scene, X, Y, H, W)
    gain = _illumination(rc, cfg.illumination, X, Y, H, W)[:, :, None]
    noise = rc.normal(0.0, cfg.noise_sigma, clean.shape)
    cur = _quantize(clean * gain + noise)
    mask = np.zeros((H, W), dtype=np.uint8)

    if not skip_injection and ra.random() < cfg.anomaly_prob:
        for attempt in range(3):
            trial = _Scene(scene.base, scene.gx, scene.gy, scene.tint, list(scene.elements))
            _anomaly(ra, cfg, trial, X, Y, clean, force_blob=attempt == 2)
            clean_a = _render(trial, X, Y, H, W)
            cur_a = _quantize(clean_a * gain + noise)
            changed = (np.abs(clean_a - clean).max(axis=2) > 0.05) & (cur_a != cur).any(axis=2)
            if changed.any():
                cur, mask = cur_a, changed.astype(np.uint8)
                break
    return ImagePair(f"{index:05d}", cur, his, mask)


def generate_dataset(cfg):
    return [generate_pair(cfg, i) for i in range(cfg.count)]


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

def write_pnm(path, image):
    """Binary PNM: P5 for single-channel, P6 for three-channel uint8."""
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.dtype != np.uint8 or a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise ValidationError(f"{path}: PNM needs uint8 HxW or HxWx3, got {a.dtype} {a.shape}")
    try:
        Image.fromarray(a).save(path, format="PPM")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_pnm(path):
    """Read a PNM file to uint8 (H, W, C)."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode not in ("L", "RGB"):
                raise ValidationError(f"{path}: not an 8-bit P5/P6 image")
            a = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    return a[:, :, None] if a.ndim == 2 else a


def read_mask(path):
    a = read_pnm(path)[:, :, 0]
    if not np.isin(a, (0, 255)).all():
        raise ValidationError(f"{path}: mask has values other than 0 and 255")
    return (a // 255).astype(np.uint8)


@dataclass
class ManifestEntry:
    id: str
    cur: str
    his: str
    gt: str
    regime: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    header: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def entry(self, id):
        for e in self.entries:
            if e.id == id:
                return e
        raise KeyError(id)

    def has_masks(self):
        return all(e.gt != "-" for e in self.entries)


def save_pair(pair, root, regime="unknown"):
    """Write one pair under ``<root>/<id>/``; returns its manifest entry."""
    d = Path(root) / pair.id
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {d}: {exc}") from exc
    write_pnm(d / "cur.pnm", pair.cur)
    write_pnm(d / "his.pnm", pair.his)
    gt = "-"
    if pair.mask is not None:
        write_pnm(d / "gt.pnm", pair.mask * np.uint8(255))
        gt = "gt.pnm"
    return ManifestEntry(pair.id, "cur.pnm", "his.pnm", gt, regime)


def write_manifest(manifest):
    lines = ["# " + " ".join(f"{k}={v}" for k, v in manifest.header.items())]
    lines += [f"{e.id} {e.cur} {e.his} {e.gt} {e.regime}" for e in manifest.entries]
    path = Path(manifest.root) / "manifest.txt"
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    header, entries, seen = {}, [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    header[k] = v
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 'id cur his gt regime', got {line!r}")
        if parts[0] in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
        seen.add(parts[0])
        entries.append(ManifestEntry(*parts))
    return DatasetManifest(root, entries, header)


def save_dataset(pairs, root, regime="unknown", header=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [save_pair(p, root, regime) for p in pairs]
    manifest = DatasetManifest(root, entries, dict(header or {}))
    write_manifest(manifest)
    return manifest


def load_pair(manifest, id):
    e = manifest.entry(id)
    d = Path(manifest.root) / e.id
    files = [d / e.cur, d / e.his] + ([d / e.gt] if e.gt != "-" else [])
    for f in files:
        if not f.is_file():
            raise DataIOError(f"pair {id}: missing file {f}")
    mask = read_mask(d / e.gt) if e.gt != "-" else None
    return ImagePair(e.id, read_pnm(d / e.cur), read_pnm(d / e.his), mask)


def load_dataset(root):
    manifest = read_manifest(root)
    return [load_pair(manifest, i) for i in manifest.ids], manifest


def resize_pair(pair, target):
    """Bilinear resize of both images, nearest-neighbour resize of the mask."""
    H, W = (target, target) if isinstance(target, int) else tuple(target)
    if H < 1 or W < 1:
        raise ConfigError(f"resize target must be positive, got {(H, W)}")
    if (H, W) == pair.size:
        return ImagePair(pair.id, pair.cur.copy(), pair.his.copy(),
                         None if pair.mask is None else pair.mask.copy())

    def img(a):
        chans = [np.array(Image.fromarray(a[:, :, c]).resize((W, H), Image.Resampling.BILINEAR))
                 for c in range(a.shape[2])]
        return np.stack(chans, axis=2)

    mask = None
    if pair.mask is not None:
        m = np.array(Image.fromarray(pair.mask * np.uint8(255)).resize((W, H), Image.Resampling.NEAREST))
        mask = (m >= 128).astype(np.uint8)
    return ImagePair(pair.id, img(pair.cur), img(pair.his), mask)


def stack_pairs(pairs, dtype=np.float32):
    """Model-ready arrays: cur, his as (N, C, H, W) in [0, 1]; masks (N, H, W) or None."""
    cur = np.stack([p.cur for p in pairs]).transpose(0, 3, 1, 2).astype(dtype) / 255.0
    his = np.stack([p.his for p in pairs]).transpose(0, 3, 1, 2).astype(dtype) / 255.0
    masks = None
    if all(p.mask is not None for p in pairs):
        masks = np.stack([p.mask for p in pairs]).astype(dtype)
    return cur, his, masks
