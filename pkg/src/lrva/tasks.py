"""Synthetic low-resource tasks and a loader for LITE-format directories.

Images are kept as uint8 (3, H, W) arrays, the same quantisation a PNG round
trip produces, and converted to float64 in [0, 1] at batch time.

* Glyph classification: wire-like Manhattan polylines with small motif
  stamps on them.  The class is the multiset of motifs; the layout is random,
  so memorising layouts does not transfer while reading motifs does.
* Map retrieval: one latent "coastline" rendered twice, as a thick textured
  stroke (domain A) and as a thin, slightly rotated/shifted geometric stroke
  (domain B).
"""

from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def split_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# ---------------------------------------------------------------------------
# drawing primitives
# ---------------------------------------------------------------------------


def draw_segment(canvas: np.ndarray, p0, p1, value: float, width: int = 1) -> None:
    """Rasterise a segment onto a (H, W) canvas with max-compositing."""
    H, W = canvas.shape
    (y0, x0), (y1, x1) = p0, p1
    n = int(max(abs(y1 - y0), abs(x1 - x0)) * 2) + 1
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    r = width // 2
    for dy in range(-r, width - r):
        for dx in range(-r, width - r):
            yy, xx = ys + dy, xs + dx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            np.maximum.at(canvas, (yy[ok], xx[ok]), value)


def stamp(canvas: np.ndarray, pattern: np.ndarray, center, value: float) -> None:
    H, W = canvas.shape
    k = pattern.shape[0]
    top, left = int(center[0]) - k // 2, int(center[1]) - k // 2
    for a in range(k):
        for b in range(k):
            y, x = top + a, left + b
            if 0 <= y < H and 0 <= x < W:
                # the motif's bounding box overwrites the wire underneath
                canvas[y, x] = value if pattern[a, b] else 0.0


def _pattern(rows: Sequence[str], scale: int = 2) -> np.ndarray:
    base = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
    return np.kron(base, np.ones((scale, scale), dtype=bool))


MOTIFS = [
    _pattern(["#####", "#...#", "#...#", "#...#", "#####"]),  # box
    _pattern(["#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),  # cross
    _pattern([".#.#.", ".#.#.", ".#.#.", ".#.#.", ".#.#."]),  # plates
    _pattern(["#....", "##...", "###..", "##...", "#...."]),  # arrow
]


def glyph_classes(n_classes: int, vocab: int = len(MOTIFS)) -> List[tuple]:
    """Fixed table of motif multisets, one per class."""
    k = 1
    while True:
        combos = list(itertools.combinations_with_replacement(range(vocab), k))
        if len(combos) >= n_classes:
            break
        k += 1
    return combos[:n_classes]


# ---------------------------------------------------------------------------
# glyph classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GlyphLatent:
    motifs: tuple  # sorted multiset of motif ids (class-defining)
    wires: tuple  # ((y0, x0), (y1, x1)) segments
    places: tuple  # (y, x) centre per motif
    tint: tuple  # per-channel ink colour


def _random_wires(rng: np.random.Generator, size: int, n_wires: int = 3) -> tuple:
    lo, hi = 4, size - 5
    segs = []
    for _ in range(n_wires):
        y0, x0, y1, x1 = rng.integers(lo, hi + 1, size=4)
        corner = (y0, x1) if rng.random() < 0.5 else (y1, x0)
        segs.append(((float(y0), float(x0)), (float(corner[0]), float(corner[1]))))
        segs.append(((float(corner[0]), float(corner[1])), (float(y1), float(x1))))
    return tuple(segs)


MARGIN = MOTIFS[0].shape[0] // 2


def _clip_place(v: float, size: int) -> float:
    return float(np.clip(v, MARGIN, size - MARGIN))


def _places_on_wires(rng: np.random.Generator, wires: tuple, k: int, size: int) -> tuple:
    out = []
    for _ in range(k):
        (y0, x0), (y1, x1) = wires[rng.integers(len(wires))]
        t = rng.random()
        out.append((_clip_place(y0 + t * (y1 - y0), size), _clip_place(x0 + t * (x1 - x0), size)))
    return tuple(out)


def random_glyph_latent(motifs: tuple, size: int, rng: np.random.Generator) -> GlyphLatent:
    wires = _random_wires(rng, size)
    places = _places_on_wires(rng, wires, len(motifs), size)
    tint = tuple(float(c) for c in rng.uniform(0.75, 1.0, size=3))
    return GlyphLatent(motifs=tuple(sorted(motifs)), wires=wires, places=places, tint=tint)


def render_glyph(lat: GlyphLatent, size: int) -> np.ndarray:
    canvas = np.zeros((size, size))
    for p0, p1 in lat.wires:
        draw_segment(canvas, p0, p1, 0.5)
    for m, c in zip(lat.motifs, lat.places):
        stamp(canvas, MOTIFS[m], (round(c[0]), round(c[1])), 1.0)
    img = canvas[None] * np.asarray(lat.tint)[:, None, None]
    return quantize(img)


def jitter_glyph(lat: GlyphLatent, severity: float, size: int, rng: np.random.Generator) -> GlyphLatent:
    """Move wires and motifs by an amount growing with ``severity``; the motif
    multiset is untouched, so the class is preserved."""
    amp = severity * size * 0.1
    wires = tuple(
        tuple((float(np.clip(y + rng.normal(0, amp), 2, size - 3)), float(np.clip(x + rng.normal(0, amp), 2, size - 3))) for y, x in seg)
        for seg in lat.wires
    )
    places = tuple((_clip_place(y + rng.normal(0, amp), size), _clip_place(x + rng.normal(0, amp), size))
                   for y, x in lat.places)
    tint = tuple(float(np.clip(c + rng.normal(0, 0.1 * severity), 0.5, 1.0)) for c in lat.tint)
    return replace(lat, wires=wires, places=places, tint=tint)


@dataclass
class ClassificationDataset:
    images: np.ndarray  # (n, 3, H, W) uint8
    labels: np.ndarray  # (n,) int
    n_classes: int
    split: str
    class_names: List[str] = field(default_factory=list)
    latents: Optional[list] = None
    stems: Optional[List[str]] = None

    kind = "classification"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"class index out of range [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def items(self):
        return list(zip(self.images, self.labels.tolist()))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


def glyph_label(lat: GlyphLatent, n_classes: int) -> int:
    """Generating rule: class index of the motif multiset, or -1 if none."""
    table = glyph_classes(n_classes)
    try:
        return table.index(tuple(sorted(lat.motifs)))
    except ValueError:
        return -1


def gen_glyph_task(n_classes: int = 8, per_class: int = 12, image_size: int = 64, seed: int = 0,
                   split: str = "train", n_items: Optional[int] = None) -> ClassificationDataset:
    """Balanced glyph split with ``per_class`` images per class, or ``n_items``
    images cycling through the classes."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = split_rng(seed, 101, SPLIT_CODES.get(split, 9))
    table = glyph_classes(n_classes)
    n = n_items if n_items is not None else n_classes * per_class
    labels = np.arange(n) % n_classes
    latents = [random_glyph_latent(table[c], image_size, rng) for c in labels]
    images = np.stack([render_glyph(l, image_size) for l in latents])
    names = ["-".join(map(str, m)) for m in table]
    return ClassificationDataset(images=images, labels=labels, n_classes=n_classes, split=split,
                                 class_names=names, latents=latents)


# ---------------------------------------------------------------------------
# map retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MapLatent:
    coast: tuple  # polyline points (y, x)
    roads: tuple  # extra segments
    angle: float  # domain-B rotation (radians)
    shift: tuple  # domain-B translation (dy, dx)
    texture: int = 0  # domain-A stroke texture seed


def random_map_latent(size: int, rng: np.random.Generator) -> MapLatent:
    n = 7
    xs = np.linspace(2, size - 3, n)
    base = rng.uniform(0.25, 0.75) * size
    ys = np.clip(base + np.cumsum(rng.normal(0, size * 0.12, n)), 3, size - 4)
    coast = tuple((float(y), float(x)) for y, x in zip(ys, xs))
    roads = tuple(
        ((float(a), float(b)), (float(c), float(d)))
        for a, b, c, d in rng.uniform(3, size - 4, size=(2, 4))
    )
    return MapLatent(coast=coast, roads=roads, angle=float(rng.uniform(-0.15, 0.15)),
                     shift=(float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3))),
                     texture=int(rng.integers(0, 2**31)))


def _transform(pt, angle: float, shift, size: int):
    c = (size - 1) / 2.0
    y, x = pt[0] - c, pt[1] - c
    ca, sa = np.cos(angle), np.sin(angle)
    return (ca * y - sa * x + c + shift[0], sa * y + ca * x + c + shift[1])


def render_map(lat: MapLatent, size: int, domain: str, texture_seed: int = 0) -> np.ndarray:
    canvas = np.zeros((size, size))
    if domain == "a":
        pts = lat.coast
        for p0, p1 in zip(pts[:-1], pts[1:]):
            draw_segment(canvas, p0, p1, 0.9, width=3)
        for p0, p1 in lat.roads:
            draw_segment(canvas, p0, p1, 0.6, width=2)
        tex = np.random.default_rng(texture_seed).uniform(0.0, 0.25, size=(size, size))
        canvas = np.clip(canvas + tex * (canvas > 0), 0, 1)
        tint = np.array([0.95, 0.8, 0.55])
    elif domain == "b":
        pts = [_transform(p, lat.angle, lat.shift, size) for p in lat.coast]
        for p0, p1 in zip(pts[:-1], pts[1:]):
            draw_segment(canvas, p0, p1, 1.0, width=1)
        for p0, p1 in lat.roads:
            draw_segment(canvas, _transform(p0, lat.angle, lat.shift, size),
                         _transform(p1, lat.angle, lat.shift, size), 0.7, width=1)
        tint = np.array([0.55, 0.8, 1.0])
    else:
        raise ValueError(f"unknown map domain {domain!r}")
    return quantize(canvas[None] * tint[:, None, None])


def jitter_map(lat: MapLatent, severity: float, size: int, rng: np.random.Generator) -> MapLatent:
    amp = severity * size * 0.15
    coast = tuple((float(np.clip(y + rng.normal(0, amp), 2, size - 3)), x) for y, x in lat.coast)
    roads = tuple(
        tuple((float(np.clip(y + rng.normal(0, amp), 2, size - 3)), float(np.clip(x + rng.normal(0, amp), 2, size - 3))) for y, x in seg)
        for seg in lat.roads
    )
    return replace(lat, coast=coast, roads=roads, texture=int(rng.integers(0, 2**31)))


@dataclass
class RetrievalDataset:
    queries: np.ndarray  # (n, 3, H, W) uint8, domain A
    gallery: np.ndarray  # (n, 3, H, W) uint8, domain B
    ground_truth: np.ndarray  # gallery index for each query
    split: str
    domains: tuple = ("domain_a", "domain_b")
    latents: Optional[list] = None
    stems: Optional[List[str]] = None

    kind = "retrieval"

    def __post_init__(self):
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        check_bijective(self.ground_truth, len(self.gallery))

    def __len__(self) -> int:
        return len(self.ground_truth)

    @property
    def pairs(self):
        return [(self.queries[i], self.gallery[g]) for i, g in enumerate(self.ground_truth)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.queries, self.gallery, self.ground_truth):
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


def check_bijective(ground_truth: np.ndarray, n_gallery: int) -> None:
    gt = np.asarray(ground_truth)
    if len(gt) != n_gallery or sorted(gt.tolist()) != list(range(n_gallery)):
        raise ValueError("pairing is not bijective: each query needs exactly one distinct gallery item")


def gen_map_pairs(n_pairs: int, image_size: int = 64, seed: int = 0, split: str = "train") -> RetrievalDataset:
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    rng = split_rng(seed, 202, SPLIT_CODES.get(split, 9))
    latents = [random_map_latent(image_size, rng) for _ in range(n_pairs)]
    queries = np.stack([render_map(l, image_size, "a", l.texture) for l in latents])
    gallery = np.stack([render_map(l, image_size, "b") for l in latents])
    return RetrievalDataset(queries=queries, gallery=gallery, ground_truth=np.arange(n_pairs), split=split,
                            latents=latents)


# ---------------------------------------------------------------------------
# LITE-format directories
# ---------------------------------------------------------------------------

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _decode(path: str, image_size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _image_files(d: str) -> List[str]:
    return sorted(f for f in os.listdir(d) if f.lower().endswith(IMAGE_EXTS))


def load_lite_directory(path: str, task_kind: str, split: str = "train", image_size: int = 64):
    """Load ``path/{split}`` laid out as class folders (classification) or as
    ``domain_a``/``domain_b`` folders with matching file stems (retrieval)."""
    root = os.path.join(path, split)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"missing split directory {root}")
    if task_kind == "classification":
        classes = sorted(c for c in os.listdir(root) if os.path.isdir(os.path.join(root, c)))
        images, labels, stems = [], [], []
        for ci, cname in enumerate(classes):
            files = _image_files(os.path.join(root, cname))
            if not files:
                raise ValueError(f"empty class directory {os.path.join(root, cname)}")
            for f in files:
                images.append(_decode(os.path.join(root, cname, f), image_size))
                labels.append(ci)
                stems.append(os.path.splitext(f)[0])
        return ClassificationDataset(images=np.stack(images), labels=np.array(labels), n_classes=len(classes),
                                     split=split, class_names=classes, stems=stems)
    if task_kind == "retrieval":
        da, db = os.path.join(root, "domain_a"), os.path.join(root, "domain_b")
        fa = {os.path.splitext(f)[0]: f for f in _image_files(da)}
        fb = {os.path.splitext(f)[0]: f for f in _image_files(db)}
        for stem, f in sorted(fa.items()):
            if stem not in fb:
                raise FileNotFoundError(f"missing counterpart for {f} in {db}")
        for stem, f in sorted(fb.items()):
            if stem not in fa:
                raise FileNotFoundError(f"missing counterpart for {f} in {da}")
        stems = sorted(fa)
        q = np.stack([_decode(os.path.join(da, fa[s]), image_size) for s in stems])
        g = np.stack([_decode(os.path.join(db, fb[s]), image_size) for s in stems])
        return RetrievalDataset(queries=q, gallery=g, ground_truth=np.arange(len(stems)), split=split, stems=stems)
    raise ConfigError(f"unknown task kind {task_kind!r}")


def save_png(arr: np.ndarray, path: str) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)


def write_lite_directory(path: str, dataset) -> None:
    root = os.path.join(path, dataset.split)
    if dataset.kind == "classification":
        for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
            d = os.path.join(root, dataset.class_names[lab] if dataset.class_names else str(lab))
            os.makedirs(d, exist_ok=True)
            save_png(img, os.path.join(d, f"{i:05d}.png"))
    else:
        for sub in ("domain_a", "domain_b"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
        for i, g in enumerate(dataset.ground_truth):
            save_png(dataset.queries[i], os.path.join(root, "domain_a", f"{i:05d}.png"))
            save_png(dataset.gallery[g], os.path.join(root, "domain_b", f"{i:05d}.png"))
