"""Datasets: synthetic generation, directory loading, splitting, client
sharding and class balancing by geometric augmentation."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .pnm import ImageFormatError, read_pnm, write_pnm

__all__ = [
    "DatasetError",
    "EmptyClassError",
    "ClassTooSmallError",
    "InfeasibleShardingError",
    "Dataset",
    "generate_synthetic_dataset",
    "reference_dataset",
    "load_dataset",
    "save_dataset",
    "area_resize",
    "SplitSpec",
    "split_indices",
    "split_dataset",
    "largest_remainder",
    "ShardStrategy",
    "ShardPlan",
    "shard_to_clients",
    "AugmentSpec",
    "AugmentRecord",
    "plan_augmentation",
    "apply_augmentation",
    "balance_with_augmentation",
]


class DatasetError(ValueError):
    pass


class EmptyClassError(DatasetError):
    pass


class ClassTooSmallError(DatasetError):
    pass


class InfeasibleShardingError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    class_names: list[str]
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.class_names:
            raise DatasetError("class_names is empty")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label out of range of class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), self.provenance)

    def manifest(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "counts": {n: int(c) for n, c in zip(self.class_names, self.class_counts())},
            "image_shape": list(self.image_shape),
            "provenance": self.provenance,
            "total": len(self),
        }


# ---------------------------------------------------------------------------
# synthetic data


def _quantize(img: np.ndarray) -> np.ndarray:
    # keep pixels on the 8-bit grid so PNM round trips are bit-exact
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255)


def generate_synthetic_dataset(n_classes: int, n_per_class: int, height: int = 32,
                               width: int = 32, seed: int = 0, channels: int = 1,
                               noise: float = 0.05) -> Dataset:
    """Procedural leaf-like images with class-dependent structure.

    Classes come in groups that share a blob position around the image
    centre: class ``k`` sits at position ``k % P`` with ``P = ceil(C / 2)``, and
    classes at the same position differ only in blob size and in the
    frequency/orientation of the lesion stripes inside the blob. Per-sample
    jitter and pixel noise come from ``seed``. Samples are ordered class by
    class.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    leaf_rgb = np.array([0.25, 0.65, 0.2])
    lesion_rgb = np.array([0.55, 0.35, 0.1])
    images = np.empty((n_classes * n_per_class, height, width, channels), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    positions = math.ceil(n_classes / 2)
    for k in range(n_classes):
        variant = k // positions
        theta = 2 * math.pi * (k % positions) / positions
        base_cy = 0.5 + 0.24 * math.sin(theta)
        base_cx = 0.5 + 0.24 * math.cos(theta)
        base_r = 0.17 + 0.04 * variant
        freq = 3.0 + 4.0 * variant
        stripe_angle = math.pi * variant / 2
        for j in range(n_per_class):
            cy = base_cy + rng.normal(0, 0.025)
            cx = base_cx + rng.normal(0, 0.025)
            r = base_r * (1 + rng.normal(0, 0.06))
            aspect = 1.3 + rng.normal(0, 0.05)
            phase = rng.uniform(0, 2 * math.pi)
            d2 = ((yy - cy) / r) ** 2 + ((xx - cx) / (r * aspect)) ** 2
            leaf = np.clip(1.5 * (1 - d2), 0, 1)
            coord = yy * math.sin(stripe_angle) + xx * math.cos(stripe_angle)
            stripe = 0.5 + 0.5 * np.sin(2 * math.pi * freq * coord + phase)
            lesion = leaf * (stripe > 0.6)
            if channels == 1:
                img = 0.1 + 0.7 * leaf - 0.35 * lesion
                img = img[:, :, None]
            else:
                img = 0.1 + leaf[:, :, None] * leaf_rgb + lesion[:, :, None] * (lesion_rgb - leaf_rgb)
            img = img + rng.normal(0, noise, size=img.shape)
            images[k * n_per_class + j] = _quantize(img)
    names = [f"class_{k:02d}" for k in range(n_classes)]
    return Dataset(images, labels, names, "synthetic")


def reference_dataset(seed: int = 42) -> Dataset:
    """The desk benchmark set: 8 classes x 150 images, 32x32 grayscale."""
    return generate_synthetic_dataset(8, 150, 32, 32, seed=seed)


# ---------------------------------------------------------------------------
# directory layout


_IMAGE_SUFFIXES = (".pgm", ".ppm")


def area_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (H, W, C) by area averaging: each output pixel is the mean of the
    input area it covers, with fractional overlaps weighted."""
    h, w, _ = image.shape
    if (h, w) == (height, width):
        return image

    def weights(src: int, dst: int) -> np.ndarray:
        A = np.zeros((dst, src))
        scale = src / dst
        for i in range(dst):
            lo, hi = i * scale, (i + 1) * scale
            for j in range(int(math.floor(lo)), min(src, int(math.ceil(hi)))):
                A[i, j] = min(hi, j + 1) - max(lo, j)
        return A / scale

    Ah, Aw = weights(h, height), weights(w, width)
    out = np.einsum("ih,hwc,jw->ijc", Ah, image.astype(np.float64), Aw)
    return out.astype(np.float32)


def load_dataset(root: str | os.PathLike, height: int | None = None,
                 width: int | None = None) -> Dataset:
    """Read ``root/<class_name>/*.pgm|*.ppm``; labels follow sorted class names.

    Without a target size every image must already share one shape.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} has no class directories")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise EmptyClassError(f"class directory {cdir.name!r} contains no PGM/PPM images")
        for f in files:
            try:
                img = read_pnm(f)
            except ImageFormatError as exc:
                raise type(exc)(f"{f}: {exc}") from exc
            if height is not None and width is not None:
                img = area_resize(img, height, width)
            if images and img.shape != images[0].shape:
                raise DatasetError(f"{f}: shape {img.shape} differs from {images[0].shape}")
            images.append(img)
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], "directory")


def save_dataset(ds: Dataset, root: str | os.PathLike) -> Path:
    """Write the directory layout plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    suffix = ".pgm" if ds.image_shape[2] == 1 else ".ppm"
    for name in ds.class_names:
        (root / name).mkdir(exist_ok=True)
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        write_pnm(root / ds.class_names[label] / f"{i:06d}{suffix}", img)
    (root / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True) + "\n")
    return root


# ---------------------------------------------------------------------------
# splitting


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total``; leftover units go to the largest
    fractional parts, earlier entries first on ties."""
    quotas = [total * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError(f"fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")


def split_indices(labels: np.ndarray, spec: SplitSpec,
                  class_names: Sequence[str] | None = None) -> tuple[np.ndarray, ...]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.stratified:
        groups = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if len(idx) < 10:
                name = class_names[c] if class_names is not None else str(c)
                raise ClassTooSmallError(f"class {name!r} has {len(idx)} samples; stratified split needs >= 10")
            groups.append(idx)
    else:
        groups = [np.arange(len(labels))]
    for idx in groups:
        idx = rng.permutation(idx)
        counts = largest_remainder(len(idx), spec.fractions)
        bounds = np.cumsum(counts)[:-1]
        for part, chunk in zip(parts, np.split(idx, bounds)):
            part.append(chunk)
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split_dataset(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/validation/test subsets (default 70:10:20)."""
    train, val, test = split_indices(ds.labels, spec, ds.class_names)
    return ds.subset(train), ds.subset(val), ds.subset(test)


# ---------------------------------------------------------------------------
# client sharding


@dataclass(frozen=True)
class ShardStrategy:
    kind: str = "iid"
    alpha: float = 0.5
    classes_per_client: int = 2

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "label_skew"):
            raise ValueError(f"unknown sharding strategy {self.kind!r}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise InfeasibleShardingError(f"dirichlet alpha must be > 0, got {self.alpha}")
        if self.kind == "label_skew" and self.classes_per_client < 1:
            raise InfeasibleShardingError("classes_per_client must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "ShardStrategy":
        """``iid``, ``dirichlet:<alpha>`` or ``label_skew:<classes>``."""
        kind, _, arg = text.partition(":")
        if kind == "dirichlet":
            return cls(kind, alpha=float(arg or 0.5))
        if kind == "label_skew":
            return cls(kind, classes_per_client=int(arg or 2))
        return cls(kind)


@dataclass
class ShardPlan:
    shards: list[np.ndarray]
    strategy: ShardStrategy

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def shard_to_clients(labels: np.ndarray, n_clients: int,
                     strategy: ShardStrategy = ShardStrategy(), seed: int = 0,
                     max_retries: int = 100) -> ShardPlan:
    """Partition sample indices ``0..len(labels)-1`` among clients."""
    labels = np.asarray(labels)
    n = len(labels)
    if n_clients < 1:
        raise InfeasibleShardingError(f"need at least one client, got {n_clients}")
    if n < n_clients:
        raise InfeasibleShardingError(f"{n} samples cannot fill {n_clients} nonempty shards")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)

    if strategy.kind == "iid":
        shards = np.array_split(rng.permutation(n), n_clients)
    elif strategy.kind == "dirichlet":
        for _ in range(max_retries):
            buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
            for c in classes:
                idx = rng.permutation(np.flatnonzero(labels == c))
                p = rng.dirichlet(np.full(n_clients, strategy.alpha))
                cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
                for k, chunk in enumerate(np.split(idx, cuts)):
                    buckets[k].append(chunk)
            shards = [np.concatenate(b) for b in buckets]
            if all(len(s) for s in shards):
                break
        else:
            raise InfeasibleShardingError(
                f"dirichlet(alpha={strategy.alpha}) left an empty shard after {max_retries} draws")
    else:
        c = strategy.classes_per_client
        C = len(classes)
        if c > C:
            raise InfeasibleShardingError(f"{c} classes per client but only {C} classes present")
        if n_clients * c < C:
            raise InfeasibleShardingError(
                f"{n_clients} clients x {c} classes cannot cover all {C} classes")
        holders: dict[int, list[int]] = {int(cls): [] for cls in classes}
        for k in range(n_clients):
            for j in range(c):
                holders[int(classes[(k * c + j) % C])].append(k)
        buckets = [[] for _ in range(n_clients)]
        for cls, owners in holders.items():
            idx = rng.permutation(np.flatnonzero(labels == cls))
            if len(idx) < len(owners):
                raise InfeasibleShardingError(
                    f"class {cls} has {len(idx)} samples for {len(owners)} clients")
            for k, chunk in zip(owners, np.array_split(idx, len(owners))):
                buckets[k].append(chunk)
        shards = [np.concatenate(b) for b in buckets]
    return ShardPlan([np.sort(s) for s in shards], strategy)


# ---------------------------------------------------------------------------
# balancing


TRANSFORMS = ("horizontal_flip", "rotation", "translation")


@dataclass(frozen=True)
class AugmentSpec:
    transforms: tuple[str, ...] = TRANSFORMS
    target: int | None = None          # None: the largest current class count
    seed: int = 0
    max_rotation: float = 15.0         # degrees
    max_shift: float = 0.1             # fraction of image size

    def __post_init__(self):
        bad = set(self.transforms) - set(TRANSFORMS)
        if bad or not self.transforms:
            raise ValueError(f"transforms must be a nonempty subset of {TRANSFORMS}, got {self.transforms}")


@dataclass(frozen=True)
class AugmentRecord:
    source: int                    # index of the original sample
    transform: str
    params: tuple = field(default=())


def plan_augmentation(ds: Dataset, spec: AugmentSpec) -> list[AugmentRecord]:
    counts = ds.class_counts()
    target = int(counts.max()) if spec.target is None else int(spec.target)
    if target < counts.max():
        raise DatasetError(f"target {target} below the largest class count {counts.max()}")
    rng = np.random.default_rng(spec.seed)
    h, w = ds.image_shape[:2]
    max_dy, max_dx = int(spec.max_shift * h), int(spec.max_shift * w)
    plan = []
    for c, name in enumerate(ds.class_names):
        members = np.flatnonzero(ds.labels == c)
        if len(members) == 0:
            raise EmptyClassError(f"class {name!r} has no samples to augment from")
        for _ in range(target - len(members)):
            src = int(members[rng.integers(len(members))])
            kind = spec.transforms[rng.integers(len(spec.transforms))]
            if kind == "rotation":
                params = (float(rng.uniform(-spec.max_rotation, spec.max_rotation)),)
            elif kind == "translation":
                params = (int(rng.integers(-max_dy, max_dy + 1)), int(rng.integers(-max_dx, max_dx + 1)))
            else:
                params = ()
            plan.append(AugmentRecord(src, kind, params))
    return plan


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    # out(p) = in(c + R(-theta) (p - c)): bilinear, zero outside the image
    h, w, ch = img.shape
    t = math.radians(degrees)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sy = cy + math.cos(t) * dy + math.sin(t) * dx
    sx = cx - math.sin(t) * dy + math.cos(t) * dx
    out = np.empty_like(img)
    for k in range(ch):
        out[:, :, k] = ndimage.map_coordinates(img[:, :, k].astype(np.float64), [sy, sx],
                                               order=1, mode="grid-constant", cval=0.0)
    return out


def _translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w, _ = img.shape
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def apply_augmentation(image: np.ndarray, record: AugmentRecord) -> np.ndarray:
    if record.transform == "horizontal_flip":
        out = image[:, ::-1, :].copy()
    elif record.transform == "rotation":
        out = _rotate(image, *record.params)
    elif record.transform == "translation":
        out = _translate(image, *record.params)
    else:
        raise ValueError(f"unknown transform {record.transform!r}")
    return _quantize(out)


def balance_with_augmentation(ds: Dataset, spec: AugmentSpec = AugmentSpec()) -> Dataset:
    """Append augmented copies until every class holds ``spec.target`` samples.

    Originals are kept unchanged and in place; new samples follow them in the
    order given by :func:`plan_augmentation`.
    """
    plan = plan_augmentation(ds, spec)
    if not plan:
        return Dataset(ds.images.copy(), ds.labels.copy(), list(ds.class_names), ds.provenance)
    extra = np.stack([apply_augmentation(ds.images[r.source], r) for r in plan])
    labels = np.array([ds.labels[r.source] for r in plan])
    return Dataset(np.concatenate([ds.images, extra]), np.concatenate([ds.labels, labels]),
                   list(ds.class_names), ds.provenance)
