"""Procedural captioned-shapes dataset.

Renders a single colored shape on a plain background with 4x supersampled
anti-aliasing, captions it from a closed grammar, and recovers the caption
attributes back from pixels (`detect_attributes`), which is what makes
text-image alignment objectively measurable here.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .rng import Rng, STREAM_DATA

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 70),
    "blue": (45, 90, 220),
    "yellow": (235, 220, 50),
    "orange": (240, 150, 40),
    "purple": (160, 70, 200),
    "cyan": (60, 200, 210),
    "pink": (235, 120, 180),
}
SHAPES = ("circle", "square", "triangle", "star")
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom", "center")
BACKGROUNDS = {
    "dark": (30, 30, 35),
    "light": (235, 235, 230),
    "gray": (128, 130, 132),
}
FILLER_WORDS = ("a", "the", "at", "on")

UNKNOWN = "unknown"

_SIZE_RADIUS = {"small": 0.13, "large": 0.26}
_POS_CENTER = {
    "left": (0.30, 0.5),
    "right": (0.70, 0.5),
    "top": (0.5, 0.30),
    "bottom": (0.5, 0.70),
    "center": (0.5, 0.5),
}
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    position: str
    background: str

    def as_dict(self):
        return asdict(self)


def vocabulary_words():
    """All caption words of the closed grammar (specials excluded)."""
    words = list(FILLER_WORDS) + list(SIZES) + list(COLORS) + list(SHAPES) + list(POSITIONS)
    return words


def caption_for(spec, variant=0):
    """Caption text for a scene.  Variants vary filler words and, for
    centered shapes, drop the position phrase to exercise shorter captions."""
    det = "the" if variant % 2 else "a"
    prep = "on" if (variant // 2) % 2 else "at"
    head = f"{det} {spec.size} {spec.color} {spec.shape}"
    if spec.position == "center" and variant % 4 == 3:
        return head
    return f"{head} {prep} the {spec.position}"


def parse_caption(caption):
    """Recover attribute words from a grammar caption; position defaults
    to center when the phrase is omitted."""
    toks = caption.lower().split()
    out = {"shape": None, "color": None, "size": None, "position": "center"}
    for t in toks:
        if t in SHAPES:
            out["shape"] = t
        elif t in COLORS:
            out["color"] = t
        elif t in SIZES:
            out["size"] = t
        elif t in POSITIONS:
            out["position"] = t
    if out["shape"] is None or out["color"] is None or out["size"] is None:
        raise DataError(f"caption not in grammar: {caption!r}")
    return out


def _shape_vertices(shape, cx, cy, r):
    if shape == "square":
        h = r * 0.82
        return [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
    if shape == "triangle":
        ang = np.deg2rad([90, 210, 330])
        return [(cx + r * np.cos(a), cy - r * np.sin(a)) for a in ang]
    if shape == "star":
        pts = []
        for i in range(10):
            rad = r if i % 2 == 0 else r * 0.45
            a = np.deg2rad(90 + i * 36)
            pts.append((cx + rad * np.cos(a), cy - rad * np.sin(a)))
        return pts
    raise DataError(f"unknown shape {shape!r}")


def _polygon_mask(verts, xs, ys):
    """Even-odd rule point-in-polygon over coordinate grids."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cond = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= cond & (xs < xcross)
    return inside


def _coverage(spec, res):
    ss = _SUPERSAMPLE
    n = res * ss
    c = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(c, c)
    cx, cy = _POS_CENTER[spec.position]
    r = _SIZE_RADIUS[spec.size]
    if spec.shape == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    else:
        mask = _polygon_mask(_shape_vertices(spec.shape, cx, cy, r), xs, ys)
    cov = mask.reshape(res, ss, res, ss).mean(axis=(1, 3))
    return cov.astype(np.float32)


def render_scene(spec, res):
    """Anti-aliased render as float32 (3, res, res) in [-1, 1]."""
    cov = _coverage(spec, res)[None]
    fg = np.asarray(COLORS[spec.color], np.float32).reshape(3, 1, 1) / 127.5 - 1.0
    bg = np.asarray(BACKGROUNDS[spec.background], np.float32).reshape(3, 1, 1) / 127.5 - 1.0
    return bg * (1.0 - cov) + fg * cov


def sample_spec(gen):
    return SceneSpec(
        shape=SHAPES[gen.integers(0, len(SHAPES))],
        color=list(COLORS)[gen.integers(0, len(COLORS))],
        size=SIZES[gen.integers(0, len(SIZES))],
        position=POSITIONS[gen.integers(0, len(POSITIONS))],
        background=list(BACKGROUNDS)[gen.integers(0, len(BACKGROUNDS))],
    )


class Dataset:
    """In-memory captioned images: images (N, 3, S, S) float32 in [-1, 1]."""

    def __init__(self, images, captions, specs):
        self.images = images
        self.captions = captions
        self.specs = specs

    def __len__(self):
        return len(self.captions)

    def split(self, holdout_frac=0.1):
        n_hold = max(1, int(len(self) * holdout_frac))
        n_train = len(self) - n_hold
        tr = Dataset(self.images[:n_train], self.captions[:n_train], self.specs[:n_train])
        ho = Dataset(self.images[n_train:], self.captions[n_train:], self.specs[n_train:])
        return tr, ho


def generate_dataset(n, seed, res, out_dir=None):
    """Deterministic per (seed, index); each sample uses its own RNG
    stream so generation order or parallel workers cannot change pixels."""
    if n < 1:
        raise DataError("dataset size must be >= 1")
    rng = Rng(seed, STREAM_DATA)
    images = np.empty((n, 3, res, res), np.float32)
    captions, specs = [], []
    for i in range(n):
        gen = rng.at(i)
        spec = sample_spec(gen)
        variant = int(gen.integers(0, 4))
        images[i] = render_scene(spec, res)
        captions.append(caption_for(spec, variant))
        specs.append(spec)
    ds = Dataset(images, captions, specs)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def to_uint8(img):
    """(3, S, S) [-1, 1] float -> (S, S, 3) uint8."""
    arr = np.clip((img.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8)


def from_uint8(arr):
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def write_png(img, path):
    Image.fromarray(to_uint8(img)).save(path)


def read_png(path):
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.jsonl")
    with open(index_path, "w") as f:
        for i in range(len(ds)):
            fname = f"{i:06d}.png"
            write_png(ds.images[i], os.path.join(out_dir, fname))
            rec = {"file": fname, "caption": ds.captions[i]}
            rec.update(ds.specs[i].as_dict())
            f.write(json.dumps(rec) + "\n")


def load_dataset(in_dir):
    index_path = os.path.join(in_dir, "index.jsonl")
    if not os.path.exists(index_path):
        raise DataError(f"no dataset index at {index_path}")
    captions, specs, imgs = [], [], []
    with open(index_path) as f:
        for line in f:
            rec = json.loads(line)
            imgs.append(read_png(os.path.join(in_dir, rec["file"])))
            captions.append(rec["caption"])
            specs.append(SceneSpec(rec["shape"], rec["color"], rec["size"],
                                   rec["position"], rec["background"]))
    return Dataset(np.stack(imgs), captions, specs)


# ---------------------------------------------------------------------------
# Attribute detection
# ---------------------------------------------------------------------------

_TEMPLATE_RES = 48


def _templates():
    global _TEMPLATE_CACHE
    try:
        return _TEMPLATE_CACHE
    except NameError:
        pass
    tpl = {}
    for shape in SHAPES:
        spec = SceneSpec(shape, "red", "large", "center", "dark")
        cov = _coverage(spec, _TEMPLATE_RES)
        m = cov > 0.5
        tpl[shape] = _normalized_crop(m)
    _TEMPLATE_CACHE = tpl
    return tpl


def _normalized_crop(mask, out=32):
    """Crop the mask bounding box and resize to a square template."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return np.zeros((out, out), np.float32)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    side = max(y1 - y0, x1 - x0)
    # pad crop to square before resizing so aspect is preserved
    crop = np.zeros((side, side), np.float32)
    sy, sx = (side - (y1 - y0)) // 2, (side - (x1 - x0)) // 2
    crop[sy : sy + y1 - y0, sx : sx + x1 - x0] = mask[y0:y1, x0:x1]
    idx = np.minimum((np.arange(out) + 0.5) * side / out, side - 1).astype(int)
    return crop[np.ix_(idx, idx)]


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 1e-9 else 0.0


def detect_attributes(img):
    """Estimate a SceneSpec from pixels; fields fall back to ``unknown``
    when the evidence is weak instead of guessing."""
    rgb = (np.asarray(img, np.float32) + 1.0) / 2.0  # (3, S, S) in [0,1]
    _, s, _ = rgb.shape
    border = np.concatenate([
        rgb[:, 0, :], rgb[:, -1, :], rgb[:, :, 0], rgb[:, :, -1]
    ], axis=1)
    bg = np.median(border, axis=1).reshape(3, 1, 1)
    dist = np.abs(rgb - bg).max(axis=0)
    fg = dist > 0.22
    area = fg.mean()
    unk = SceneSpec(UNKNOWN, UNKNOWN, UNKNOWN, UNKNOWN, UNKNOWN)
    if area < 0.01 or area > 0.62:
        return unk

    # color from the eroded interior, so AA edge blends don't bias it
    interior = fg.copy()
    interior[1:, :] &= fg[:-1, :]
    interior[:-1, :] &= fg[1:, :]
    interior[:, 1:] &= fg[:, :-1]
    interior[:, :-1] &= fg[:, 1:]
    region = interior if interior.sum() >= 8 else fg
    mean_rgb = rgb[:, region].mean(axis=1) * 255.0
    palette = np.asarray(list(COLORS.values()), np.float32)
    d = np.abs(palette - mean_rgb).sum(axis=1)
    color = list(COLORS)[int(d.argmin())] if d.min() < 150 else UNKNOWN

    ys, xs = np.nonzero(fg)
    cy, cx = ys.mean() / s, xs.mean() / s
    dx, dy = cx - 0.5, cy - 0.5
    if max(abs(dx), abs(dy)) < 0.10:
        position = "center"
    elif abs(dx) >= abs(dy):
        position = "right" if dx > 0 else "left"
    else:
        position = "bottom" if dy > 0 else "top"

    tpl = _templates()
    probe = _normalized_crop(fg)
    scores = {shape: _corr(probe, t) for shape, t in tpl.items()}
    shape = max(scores, key=scores.get)
    if scores[shape] < 0.55:
        shape = UNKNOWN

    if shape != UNKNOWN:
        # area scale factor 2 between small and large; compare against the
        # geometric mean of the two expected areas for this shape
        ref = _shape_area_fraction(shape)
        thresh = np.sqrt(ref["small"] * ref["large"])
        size = "large" if area > thresh else "small"
    else:
        size = UNKNOWN
    return SceneSpec(shape, color, size, position, UNKNOWN)


def _shape_area_fraction(shape):
    global _AREA_CACHE
    try:
        cache = _AREA_CACHE
    except NameError:
        cache = _AREA_CACHE = {}
    if shape not in cache:
        cache[shape] = {
            sz: float((_coverage(SceneSpec(shape, "red", sz, "center", "dark"),
                                 _TEMPLATE_RES) > 0.5).mean())
            for sz in SIZES
        }
    return cache[shape]


def spec_matches_caption(detected, caption):
    """True when every attribute stated by the caption is detected."""
    want = parse_caption(caption)
    return (detected.shape == want["shape"] and detected.color == want["color"]
            and detected.size == want["size"] and detected.position == want["position"])
