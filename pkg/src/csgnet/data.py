"""Datasets: a synthetic shape generator with exact masks, and a directory loader.

The generator draws one colored shape per image over a textured noise
background and emits the exact binary foreground mask, which is what the
localization metrics score against.  Shape area is drawn from one shared
distribution for all classes, so pixel count carries (almost) no label
information; only shape identity does.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SHAPE_PROTOTYPES = (
    "circle", "square", "triangle", "cross", "ring", "bar", "ell", "dots",
)

# Extent factor: shape fits inside a disc of radius extent*size_param.
_AREA_COEFF = {
    # indicator-area = coeff * r^2 (r = size parameter in image units)
    "circle": np.pi,
    "square": 4.0,
    "triangle": 3.0 * np.sqrt(3.0) / 4.0,
    "cross": 20.0 / 9.0,
    "ring": np.pi * (1.0 - 0.55 ** 2),
    "bar": 2.0,
    "ell": 1.75,
    "dots": 4.0 * np.pi * 0.45 ** 2,
}


@dataclass
class DatasetBundle:
    """Images in [0,1], integer labels, optional exact masks, and a split."""

    images: np.ndarray          # (N, C, H, W) float32
    labels: np.ndarray          # (N,) int64
    masks: np.ndarray | None    # (N, H, W) bool, or None
    train_idx: np.ndarray
    test_idx: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if self.masks is not None and self.masks.shape[0] != self.images.shape[0]:
            raise ValueError("masks must align 1:1 with images")
        for name, idx in (("train", self.train_idx), ("test", self.test_idx)):
            present = np.unique(self.labels[idx])
            if present.size != self.num_classes:
                raise ValueError(f"every class must appear in the {name} split")

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def train_images(self):
        return self.images[self.train_idx]

    @property
    def train_labels(self):
        return self.labels[self.train_idx]

    @property
    def test_images(self):
        return self.images[self.test_idx]

    @property
    def test_labels(self):
        return self.labels[self.test_idx]

    @property
    def test_masks(self):
        return None if self.masks is None else self.masks[self.test_idx]


def _shape_indicator(name, u, v):
    """Boolean membership of points (u, v) in the unit-size prototype."""
    if name == "circle":
        return u * u + v * v <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if name == "triangle":
        # Equilateral triangle with circumradius 1, one vertex up.
        a = v <= 0.5
        b = (np.sqrt(3.0) * u + v) >= -1.0
        c = (-np.sqrt(3.0) * u + v) >= -1.0
        return a & b & c
    if name == "cross":
        w = 1.0 / 3.0
        arm1 = (np.abs(u) <= w) & (np.abs(v) <= 1.0)
        arm2 = (np.abs(v) <= w) & (np.abs(u) <= 1.0)
        return arm1 | arm2
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if name == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.5)
    if name == "ell":
        t = 0.5
        vert = (u >= -1.0) & (u <= -1.0 + t) & (np.abs(v) <= 1.0)
        horz = (np.abs(u) <= 1.0) & (v >= -1.0) & (v <= -1.0 + t)
        return vert | horz
    if name == "dots":
        d, rho = 0.55, 0.45
        hit = np.zeros(u.shape, dtype=bool)
        for su in (-d, d):
            for sv in (-d, d):
                hit |= (u - su) ** 2 + (v - sv) ** 2 <= rho * rho
        return hit
    raise ValueError(f"unknown shape prototype {name!r}")


def _render_sample(name, size, rng, area_range):
    """One image/mask pair: a rotated, scaled shape over textured noise."""
    area = rng.uniform(*area_range)
    r = float(np.sqrt(area / _AREA_COEFF[name]))
    cx, cy = rng.uniform(0.30, 0.70, size=2)
    theta = rng.uniform(0.0, 2.0 * np.pi)

    # Background: coarse smooth texture plus per-pixel noise.
    coarse = rng.uniform(0.05, 0.45, size=(3, 4, 4)).astype(np.float32)
    reps = size // 4
    bg = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)
    bg += rng.normal(0.0, 0.04, size=(3, size, size)).astype(np.float32)

    # Pixel-center coordinates in image units, rotated into shape frame.
    axis = (np.arange(size, dtype=np.float64) + 0.5) / size
    gy, gx = np.meshgrid(axis, axis, indexing="ij")
    dx, dy = gx - cx, gy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * dx + st * dy) / r
    v = (-st * dx + ct * dy) / r
    mask = _shape_indicator(name, u, v)
    if not mask.any():
        return None

    color = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
    jitter = rng.normal(0.0, 0.05, size=(3, size, size)).astype(np.float32)
    img = bg
    fill = color[:, None, None] + jitter
    img[:, mask] = fill[:, mask]
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32), mask


def generate_synthetic_shapes(num_classes, per_class=500, image_size=32, seed=0,
                              test_per_class=None, area_range=(0.08, 0.16)):
    """Deterministic shape-classification dataset with exact masks.

    ``per_class`` is the training count per class; the test split holds
    ``test_per_class`` (default per_class // 5) fresh samples per class.
    """
    if num_classes > len(SHAPE_PROTOTYPES):
        raise ValueError(
            f"at most {len(SHAPE_PROTOTYPES)} classes available; "
            f"prototypes: {', '.join(SHAPE_PROTOTYPES)}"
        )
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if image_size % 4:
        raise ValueError("image_size must be a multiple of 4")
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)
    rng = np.random.default_rng(seed)
    names = SHAPE_PROTOTYPES[:num_classes]

    images, labels, masks = [], [], []
    for count in (per_class, test_per_class):
        for cls, name in enumerate(names):
            made = 0
            while made < count:
                sample = _render_sample(name, image_size, rng, area_range)
                if sample is None:
                    continue
                images.append(sample[0])
                masks.append(sample[1])
                labels.append(cls)
                made += 1
    n_train = per_class * num_classes
    n_total = len(images)
    return DatasetBundle(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        masks=np.stack(masks),
        train_idx=np.arange(n_train),
        test_idx=np.arange(n_train, n_total),
        class_names=list(names),
    )


def load_directory_dataset(path, image_size=32, split_ratio=0.8, seed=0):
    """Load a one-subdirectory-per-class image tree with a stratified split."""
    from pathlib import Path

    from PIL import Image

    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    images, labels = [], []
    for cls, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file())
        if not files:
            raise ValueError(f"class directory {d} is empty")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize(
                        (image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                raise ValueError(f"cannot decode image file {f}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(cls)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)

    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for cls in range(len(class_dirs)):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        cut = int(round(split_ratio * idx.size))
        cut = min(max(cut, 1), idx.size - 1)
        train_parts.append(np.sort(idx[:cut]))
        test_parts.append(np.sort(idx[cut:]))
    return DatasetBundle(
        images=images,
        labels=labels,
        masks=None,
        train_idx=np.concatenate(train_parts),
        test_idx=np.concatenate(test_parts),
        class_names=[d.name for d in class_dirs],
    )


def save_dataset(bundle, path):
    """Persist a bundle as .npz (images/labels/masks/split/class names)."""
    payload = {
        "images": bundle.images,
        "labels": bundle.labels,
        "train_idx": bundle.train_idx,
        "test_idx": bundle.test_idx,
        "class_names": np.asarray(bundle.class_names),
    }
    if bundle.masks is not None:
        payload["masks"] = bundle.masks
    np.savez_compressed(path, **payload)


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        return DatasetBundle(
            images=z["images"],
            labels=z["labels"],
            masks=z["masks"] if "masks" in z.files else None,
            train_idx=z["train_idx"],
            test_idx=z["test_idx"],
            class_names=[str(s) for s in z["class_names"]],
        )
