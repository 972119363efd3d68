"""Synthetic shapes-as-species data, label rasterization, cropping and I/O.

Coordinates are continuous pixel coordinates with pixel ``(row i, col j)``
centred at ``(x=j, y=i)``; an image of width W spans ``[-0.5, W - 0.5]``.
Bounding boxes are ``(x, y, w, h)`` in the same frame.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkit import rng as rngmod

log = logging.getLogger(__name__)

IMG_MAGIC = b"UAPIMG1"
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


# -- shape families ----------------------------------------------------------
# Vertices in canonical units (radius ~1, y pointing down); keypoints are the
# vertices in order followed by the area centroid.
FAMILIES: dict[str, np.ndarray] = {
    "triangle": np.array([[0.0, -1.0], [0.87, 0.5], [-0.87, 0.5]]),
    "square": np.array([[-0.75, -0.75], [0.75, -0.75], [0.75, 0.75], [-0.75, 0.75]]),
    "pentagon": np.array([[np.sin(a), -np.cos(a)] for a in np.linspace(0, 2 * np.pi, 6)[:-1]]),
    "kite": np.array([[0.0, -1.0], [0.6, -0.2], [0.0, 1.0], [-0.6, -0.2]]),
    "trapezoid": np.array([[-0.45, -0.7], [0.45, -0.7], [1.0, 0.7], [-1.0, 0.7]]),
    "arrow": np.array([[0.0, -1.0], [0.8, 0.0], [0.3, 0.0], [0.3, 1.0], [-0.3, 1.0], [-0.3, 0.0],
                       [-0.8, 0.0]]),
    "house": np.array([[0.0, -1.0], [0.8, -0.2], [0.8, 0.9], [-0.8, 0.9], [-0.8, -0.2]]),
}

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.2, 0.8),
    "cyan": (0.1, 0.85, 0.85),
    "orange": (0.95, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
}


def polygon_centroid(v: np.ndarray) -> np.ndarray:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * area)


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def rasterize_mask(poly: np.ndarray, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return points_in_polygon(xs, ys, poly)


# -- spec / records ------------------------------------------------------------
@dataclass(frozen=True)
class ClassSpec:
    family: str
    color: str
    split: str

    @property
    def name(self) -> str:
        return f"{self.family}-{self.color}"


@dataclass
class DataSpec:
    classes: list[ClassSpec]
    samples_per_class: int = 30
    canvas: int = 48
    image_size: int = 32
    rotation_deg: float = 20.0
    scale_range: tuple[float, float] = (9.0, 14.0)
    bbox_margin: tuple[float, float] = (0.05, 0.3)
    noise_std: float = 0.03

    def __post_init__(self):
        for c in self.classes:
            if c.family not in FAMILIES:
                raise ValueError(f"unknown shape family {c.family!r}")
            if c.color not in COLORS:
                raise ValueError(f"unknown color {c.color!r}")
            if c.split not in SPLITS:
                raise ValueError(f"unknown split {c.split!r}")
        if len(self.classes) < 2:
            raise ValueError("a dataset spec needs at least 2 classes")

    def to_dict(self) -> dict:
        return {
            "classes": [[c.family, c.color, c.split] for c in self.classes],
            "samples_per_class": self.samples_per_class,
            "canvas": self.canvas,
            "image_size": self.image_size,
            "rotation_deg": self.rotation_deg,
            "scale_range": list(self.scale_range),
            "bbox_margin": list(self.bbox_margin),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        d = dict(d)
        classes = [ClassSpec(*c) for c in d.pop("classes")]
        for k in ("scale_range", "bbox_margin"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(classes=classes, **d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def default_spec(train=4, val=0, test=2, samples_per_class=30) -> DataSpec:
    """Distinct family and color per class; held-out classes use unseen families."""
    pairs = [("triangle", "red"), ("square", "green"), ("pentagon", "blue"), ("trapezoid", "yellow"),
             ("kite", "magenta"), ("house", "cyan"), ("arrow", "orange")]
    splits = ["train"] * train + ["val"] * val + ["test"] * test
    if len(splits) > len(pairs):
        raise ValueError("not enough distinct classes")
    return DataSpec([ClassSpec(f, c, s) for (f, c), s in zip(pairs, splits)],
                    samples_per_class=samples_per_class)


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (3, H, W) in [0, 1]
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (K, 3): x, y, visible
    mask: np.ndarray | None  # (H, W) bool
    class_id: int
    split: str
    pose: dict = field(default_factory=dict)
    image_path: str | None = None


@dataclass
class DatasetManifest:
    samples: list[Sample]
    classes: dict[int, str]
    seed: int | None = None
    spec: DataSpec | None = None
    warnings: int = 0

    def class_splits(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {s: set() for s in SPLITS}
        for s in self.samples:
            out.setdefault(s.split, set()).add(s.class_id)
        return out

    def check_disjoint(self) -> None:
        cs = self.class_splits()
        names = list(cs)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                both = cs[a] & cs[b]
                if both:
                    raise ManifestError(f"class ids {sorted(both)} appear in both {a} and {b} splits")


# -- generation ----------------------------------------------------------------
def _render(spec: DataSpec, cls: ClassSpec, rng: np.random.Generator) -> tuple:
    S = spec.canvas
    angle = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    scale = rng.uniform(*spec.scale_range)
    canon = FAMILIES[cls.family]
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    local = canon @ rot.T * scale
    lo, hi = local.min(0), local.max(0)
    cx = rng.uniform(-lo[0] + 1.0, S - 2.0 - hi[0])
    cy = rng.uniform(-lo[1] + 1.0, S - 2.0 - hi[1])
    poly = local + np.array([cx, cy])
    mask = rasterize_mask(poly, S, S)
    bg = rng.uniform(0.05, 0.35, size=3)
    img = np.empty((3, S, S), np.float64)
    color = np.array(COLORS[cls.color]) * rng.uniform(0.85, 1.0)
    for c in range(3):
        img[c] = np.where(mask, color[c], bg[c])
    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    kps = np.vstack([poly, polygon_centroid(poly)[None]])
    kps = np.hstack([kps, np.ones((len(kps), 1))])
    # bbox: tight extent plus a random margin, clipped to the canvas
    w0, h0 = np.ptp(poly[:, 0]), np.ptp(poly[:, 1])
    mx = rng.uniform(*spec.bbox_margin, size=2) * w0
    my = rng.uniform(*spec.bbox_margin, size=2) * h0
    x0 = max(-0.5, poly[:, 0].min() - mx[0])
    y0 = max(-0.5, poly[:, 1].min() - my[0])
    x1 = min(S - 0.5, poly[:, 0].max() + mx[1])
    y1 = min(S - 0.5, poly[:, 1].max() + my[1])
    bbox = (float(x0), float(y0), float(x1 - x0), float(y1 - y0))
    pose = {"angle": angle, "scale": scale, "cx": cx, "cy": cy}
    return img, mask, kps, bbox, pose


def shape_polygon(family: str, pose: dict) -> np.ndarray:
    """Re-derive a sample's polygon from its stored pose."""
    a = pose["angle"]
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return FAMILIES[family] @ rot.T * pose["scale"] + np.array([pose["cx"], pose["cy"]])


def generate_dataset(spec: DataSpec, seed: int) -> DatasetManifest:
    """Deterministic dataset: every sample draws from its own named RNG stream."""
    n_train = sum(c.split == "train" for c in spec.classes)
    if n_train < 2:
        raise ValueError("the train split needs at least 2 classes")
    samples = []
    sid = 0
    for cid, cls in enumerate(spec.classes):
        for k in range(spec.samples_per_class):
            rng = rngmod.stream(seed, "sample", cid, k)
            img, mask, kps, bbox, pose = _render(spec, cls, rng)
            samples.append(Sample(sid, img, bbox, kps, mask, cid, cls.split, pose))
            sid += 1
    classes = {i: c.name for i, c in enumerate(spec.classes)}
    man = DatasetManifest(samples, classes, seed=seed, spec=spec)
    man.check_disjoint()
    return man


# -- labels --------------------------------------------------------------------
def rasterize_keypoint_heatmap(kp: Sequence[float], sigma_px: float, size: int) -> np.ndarray:
    """Gaussian peak (value 1 at the keypoint) sampled at pixel centres."""
    x, y = float(kp[0]), float(kp[1])
    if not (-0.5 <= x <= size - 0.5 and -0.5 <= y <= size - 0.5):
        raise ValueError(f"keypoint ({x}, {y}) outside a {size}x{size} image")
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    return np.clip(np.exp(-d2 / (2.0 * sigma_px ** 2)), 0.0, 1.0).astype(np.float32)


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at continuous coords (edge-clamped)."""
    _, H, W = img.shape
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (sx - x0)[None]
    fy = (sy - y0)[None]
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_and_resize(sample: Sample, size: int = 32) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Crop ``sample.bbox`` and resize to ``size`` x ``size``.

    Returns (image, keypoints, mask) in the crop frame; the crop frame's bbox is
    ``(-0.5, -0.5, size, size)``.
    """
    bx, by, bw, bh = sample.bbox
    if bw <= 0 or bh <= 0:
        raise ValueError("degenerate bounding box")
    c = (np.arange(size) + 0.5)
    src_x = bx + c * bw / size
    src_y = by + c * bh / size
    SX, SY = np.meshgrid(src_x, src_y)
    img = _bilinear(sample.image.astype(np.float64), SX, SY).astype(np.float32)
    kps = np.array(sample.keypoints, dtype=np.float64).copy()
    if len(kps):
        kps[:, 0] = (kps[:, 0] - bx) * size / bw - 0.5
        kps[:, 1] = (kps[:, 1] - by) * size / bh - 0.5
    mask = None
    if sample.mask is not None:
        H, W = sample.mask.shape
        ix = np.clip(np.rint(SX).astype(int), 0, W - 1)
        iy = np.clip(np.rint(SY).astype(int), 0, H - 1)
        mask = sample.mask[iy, ix]
    return img, kps, mask


# -- in-memory dataset -----------------------------------------------------------
@dataclass
class Dataset:
    """Cropped, model-ready arrays for every sample of a manifest."""

    images: np.ndarray  # (n, 3, S, S)
    keypoints: list[np.ndarray]  # per sample (K, 3), crop frame
    masks: np.ndarray  # (n, S, S) float32
    class_ids: np.ndarray
    splits: np.ndarray
    classes: dict[int, str]
    image_size: int
    sigma_px: float = 1.5

    @classmethod
    def from_manifest(cls, man: DatasetManifest, size: int = 32, sigma_px: float = 1.5) -> "Dataset":
        imgs, kps, masks = [], [], []
        for s in man.samples:
            im, kp, mk = crop_and_resize(s, size)
            imgs.append(im)
            kps.append(kp)
            masks.append(mk.astype(np.float32) if mk is not None else np.zeros((size, size), np.float32))
        return cls(np.stack(imgs), kps, np.stack(masks),
                   np.array([s.class_id for s in man.samples]),
                   np.array([s.split for s in man.samples]), dict(man.classes), size, sigma_px)

    def __len__(self) -> int:
        return len(self.images)

    def indices(self, split: str | None = None, class_id: int | None = None) -> np.ndarray:
        sel = np.ones(len(self), bool)
        if split is not None:
            sel &= self.splits == split
        if class_id is not None:
            sel &= self.class_ids == class_id
        return np.flatnonzero(sel)

    def classes_in(self, split: str) -> list[int]:
        return sorted(set(self.class_ids[self.splits == split].tolist()))

    def num_keypoints(self, class_id: int) -> int:
        return len(self.keypoints[int(self.indices(class_id=class_id)[0])])

    def heatmaps(self, idx: Sequence[int], k: int) -> np.ndarray:
        return np.stack([rasterize_keypoint_heatmap(self.keypoints[i][k], self.sigma_px, self.image_size)
                         for i in idx])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], [self.keypoints[i] for i in idx], self.masks[idx],
                       self.class_ids[idx], self.splits[idx], dict(self.classes), self.image_size,
                       self.sigma_px)


# -- file formats -----------------------------------------------------------------
def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """Raw image: magic, then width/height/channels (int32 LE), then HWC float32 LE."""
    c, h, w = img.shape
    with open(path, "wb") as f:
        f.write(IMG_MAGIC)
        f.write(struct.pack("<iii", w, h, c))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(IMG_MAGIC)] != IMG_MAGIC:
        raise ManifestError(f"{path}: not a UAPIMG1 file")
    w, h, c = struct.unpack_from("<iii", data, len(IMG_MAGIC))
    off = len(IMG_MAGIC) + 12
    arr = np.frombuffer(data, dtype="<f4", count=w * h * c, offset=off)
    return arr.reshape(h, w, c).transpose(2, 0, 1).astype(np.float32)


def _mask_to_str(mask: np.ndarray) -> str:
    return base64.b64encode(np.packbits(mask.astype(bool).reshape(-1)).tobytes()).decode()


def _mask_from_str(s: str, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(s), np.uint8))
    return bits[: shape[0] * shape[1]].reshape(shape).astype(bool)


def save_manifest(man: DatasetManifest, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    recs = []
    for s in man.samples:
        rel = f"images/{s.id:06d}.uapimg"
        write_image(out / rel, s.image)
        rec = {"id": s.id, "image": rel, "bbox": [float(v) for v in s.bbox],
               "keypoints": [[float(a) for a in kp] for kp in s.keypoints],
               "class_id": int(s.class_id), "split": s.split,
               "pose": {k: float(v) for k, v in s.pose.items()}}
        if s.mask is not None:
            rec["mask"] = {"shape": list(s.mask.shape), "bits": _mask_to_str(s.mask)}
        recs.append(rec)
    doc = {"format": "uap-manifest-1", "seed": man.seed,
           "spec": man.spec.to_dict() if man.spec else None,
           "spec_hash": man.spec.hash() if man.spec else None,
           "classes": {str(k): v for k, v in sorted(man.classes.items())},
           "splits": {sp: sorted(ids) for sp, ids in man.class_splits().items()},
           "samples": recs}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def load_manifest(path: str | os.PathLike, check: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON: {e}") from e
    for key in ("classes", "samples"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    samples = []
    for r in doc["samples"]:
        img = read_image(path.parent / r["image"])
        mask = None
        if "mask" in r:
            mask = _mask_from_str(r["mask"]["bits"], tuple(r["mask"]["shape"]))
        samples.append(Sample(r["id"], img, tuple(r["bbox"]), np.array(r["keypoints"], float).reshape(-1, 3),
                              mask, r["class_id"], r["split"], r.get("pose", {}), r["image"]))
    spec = DataSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    man = DatasetManifest(samples, {int(k): v for k, v in doc["classes"].items()}, doc.get("seed"), spec)
    if check:
        man.check_disjoint()
    return man


def load_coco_keypoints(path: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Read a COCO-style keypoint file (images, annotations, categories).

    Only label geometry is ingested; images are referenced by file name and
    not decoded.  Triplets with v == 0 are dropped; annotations without a bbox
    are skipped and counted in ``manifest.warnings``.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    images = {im["id"]: im for im in doc["images"]}
    classes = {int(c["id"]): str(c.get("name", c["id"])) for c in doc["categories"]}
    samples, skipped = [], 0
    for i, ann in enumerate(doc["annotations"]):
        if "category_id" not in ann:
            raise ManifestError(f"{path}: annotation {i} has no category_id")
        bbox = ann.get("bbox")
        if not bbox or len(bbox) != 4:
            skipped += 1
            continue
        trip = np.asarray(ann.get("keypoints", []), float).reshape(-1, 3)
        kps = trip[trip[:, 2] > 0]
        kps[:, 2] = 1.0
        im = images.get(ann.get("image_id"), {})
        bb = tuple(float(v) for v in bbox)
        samples.append(Sample(int(ann.get("id", i)), np.zeros((3, 0, 0), np.float32), bb, kps, None,
                              int(ann["category_id"]), split, {}, im.get("file_name")))
    if skipped:
        log.warning("skipped %d annotations without bbox", skipped)
    return DatasetManifest(samples, classes, warnings=skipped)
