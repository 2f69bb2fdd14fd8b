"""Dataset ingestion and continual task sequences.

Input sources are classic IDX image/label files (optionally gzipped) or a
self-contained synthetic generator for machines without the real data.  A
task sequence applies per-task transforms to one base dataset: seeded pixel
permutations, evenly spaced rotations, or disjoint class subsets.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DatasetError
from .seeding import rng_for

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801

TASK_KINDS = ("permutation", "rotation", "class_subset")


@dataclass
class Dataset:
    """A base classification dataset with flattened [0,1] float64 pixels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    image_hw: tuple
    num_classes: int

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


@dataclass(frozen=True)
class TaskSpec:
    """One task's transform over the base dataset."""

    task_id: int
    kind: str
    n_train: int
    n_test: int
    num_classes: int
    permutation: tuple = ()
    angle: float = 0.0
    classes: tuple = ()

    def describe(self) -> str:
        if self.kind == "permutation":
            tag = "identity" if not self.permutation else "permuted"
        elif self.kind == "rotation":
            tag = f"{self.angle:g}deg"
        else:
            tag = "+".join(str(c) for c in self.classes)
        return f"task {self.task_id} ({self.kind}: {tag})"


@dataclass
class TaskData:
    """Materialized train/test arrays for one task."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int


# -- IDX files ---------------------------------------------------------------


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DatasetError(
            f"{path}: truncated {what} (wanted {count} bytes, got {len(data)})"
        )
    return data


def load_idx_images(path) -> np.ndarray:
    """IDX image file -> (n, rows*cols) float64 scaled to [0, 1]."""
    with _open_maybe_gzip(path) as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, path, "header"))
        if magic != _IMAGE_MAGIC:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{_IMAGE_MAGIC:08x} "
                "for an image file"
            )
        raw = _read_exact(fh, n * rows * cols, path, "pixel payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        magic, n = struct.unpack(">ii", _read_exact(fh, 8, path, "header"))
        if magic != _LABEL_MAGIC:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{_LABEL_MAGIC:08x} "
                "for a label file"
            )
        raw = _read_exact(fh, n, path, "label payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path):
    """Paired image/label IDX files -> (x, y) with matching counts."""
    x = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise DatasetError(
            f"count mismatch: {images_path} has {x.shape[0]} images but "
            f"{labels_path} has {y.shape[0]} labels"
        )
    return x, y


_MNIST_FILES = {
    "x_train": "train-images-idx3-ubyte",
    "y_train": "train-labels-idx1-ubyte",
    "x_test": "t10k-images-idx3-ubyte",
    "y_test": "t10k-labels-idx1-ubyte",
}


def _find_file(root, stem) -> str:
    for name in (stem, stem + ".gz"):
        path = os.path.join(root, name)
        if os.path.exists(path):
            return path
    raise DatasetError(f"dataset file {stem}[.gz] not found under {root}")


def load_mnist_dir(root) -> Dataset:
    """Standard four-file handwritten-digit layout under one directory."""
    x_train, y_train = load_idx_dataset(
        _find_file(root, _MNIST_FILES["x_train"]), _find_file(root, _MNIST_FILES["y_train"])
    )
    x_test, y_test = load_idx_dataset(
        _find_file(root, _MNIST_FILES["x_test"]), _find_file(root, _MNIST_FILES["y_test"])
    )
    hw = int(round(np.sqrt(x_train.shape[1])))
    return Dataset(x_train, y_train, x_test, y_test, (hw, hw), int(y_train.max()) + 1)


# -- synthetic data ----------------------------------------------------------


def synthetic_dataset(
    n_train: int,
    n_test: int,
    seed: int = 0,
    image_hw: tuple = (14, 14),
    num_classes: int = 10,
    template_hw: tuple = (5, 5),
    contrast: float = 0.62,
    noise: float = 0.1,
    styles: int = 80,
    style_px: int = 40,
    sig_px: int = 8,
    sig_zone: int = 100,
) -> Dataset:
    """Style-clutter images: bright shared patterns plus class signatures.

    A fixed ``sig_zone``-pixel region carries the class evidence: each class
    lights its own ``sig_px``-pixel signature mask there at ``contrast``
    brightness.  The remaining pixels show one of ``styles`` full-brightness
    clutter patterns drawn independently of the label, so a classifier must
    pick out moderate-contrast signatures amid brighter label-free clutter.
    Every mask is the top slice of a smooth low-resolution random field
    (``template_hw``) upsampled to the working resolution, giving blobs
    rather than salt-and-pepper.  Gaussian pixel noise is added and samples
    clip to [0, 1].  Class counts are balanced (round-robin remainder),
    rows shuffled.
    """
    h, w = image_hw
    d = h * w
    if not 0 < sig_zone < d:
        raise DatasetError(f"sig_zone must lie in (0, {d}), got {sig_zone}")
    if sig_px > sig_zone or style_px > d - sig_zone:
        raise DatasetError(
            f"mask sizes exceed their zones: sig {sig_px}/{sig_zone}, "
            f"style {style_px}/{d - sig_zone}"
        )
    rng = rng_for(seed, "synthetic")
    zone_sig = rng.choice(d, size=sig_zone, replace=False)
    zone_style = np.setdiff1d(np.arange(d), zone_sig)

    def blob_masks(count, zone, px):
        out = np.zeros((count, d))
        for row in out:
            field = _upsample_bilinear(rng.normal(size=template_hw), (h, w)).ravel()
            row[zone[np.argsort(-field[zone])[:px]]] = 1.0
        return out

    style_m = blob_masks(styles, zone_style, style_px)
    sig_m = blob_masks(num_classes, zone_sig, sig_px) * contrast

    def draw(count, stream):
        y = np.arange(count) % num_classes
        stream.shuffle(y)
        x = style_m[stream.integers(styles, size=count)] + sig_m[y]
        x = np.clip(x + noise * stream.normal(size=x.shape), 0.0, 1.0)
        return x, y

    x_train, y_train = draw(n_train, rng_for(seed, "synthetic", "train"))
    x_test, y_test = draw(n_test, rng_for(seed, "synthetic", "test"))
    return Dataset(x_train, y_train, x_test, y_test, (h, w), num_classes)


def _upsample_bilinear(small: np.ndarray, out_hw: tuple) -> np.ndarray:
    sh, sw = small.shape
    oh, ow = out_hw
    ys = np.linspace(0.0, sh - 1.0, oh)
    xs = np.linspace(0.0, sw - 1.0, ow)
    y0 = np.clip(np.floor(ys).astype(int), 0, sh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, sw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = small[np.ix_(y0, x0)]
    b = small[np.ix_(y0, x0 + 1)]
    c = small[np.ix_(y0 + 1, x0)]
    d = small[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def downscale_dataset(ds: Dataset, factor: int = 2) -> Dataset:
    """Average-pool images by an integer factor (e.g. 28x28 -> 14x14)."""
    h, w = ds.image_hw
    if h % factor or w % factor:
        raise DatasetError(f"image size {h}x{w} not divisible by {factor}")

    def shrink(x):
        n = x.shape[0]
        img = x.reshape(n, h // factor, factor, w // factor, factor)
        return img.mean(axis=(2, 4)).reshape(n, -1)

    return replace(
        ds,
        x_train=shrink(ds.x_train),
        x_test=shrink(ds.x_test),
        image_hw=(h // factor, w // factor),
    )


# -- transforms --------------------------------------------------------------


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the center with bilinear sampling, zero outside the frame.

    The convention matches ``np.rot90`` at 90 degrees.
    """
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    sin, cos = np.sin(th), np.cos(th)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = cy + sin * (xs - cx) + cos * (ys - cy)
    sx = cx + cos * (xs - cx) - sin * (ys - cy)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((h, w))
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out[inside] += wgt[inside] * img[yy[inside], xx[inside]]
    return out


def rotate_batch(x: np.ndarray, angle_deg: float, image_hw: tuple) -> np.ndarray:
    h, w = image_hw
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = rotate_image(x[i].reshape(h, w), angle_deg).reshape(-1)
    return out


# -- task sequences ----------------------------------------------------------


def make_task_sequence(
    kind: str,
    num_tasks: int,
    seed: int,
    dataset: Dataset,
    n_train: int,
    n_test: int,
) -> list:
    """Ordered task specs over one base dataset.

    Permutation sequences start with the identity task; rotation sequences
    use ``num_tasks`` evenly spaced angles in [0, 180) shuffled by seed;
    class-subset sequences deal a seeded shuffle of the classes into
    disjoint groups, remainder round-robin.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; known: {TASK_KINDS}")
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    rng = rng_for(seed, "tasks", kind)
    specs = []
    if kind == "permutation":
        d = dataset.n_features
        for t in range(1, num_tasks + 1):
            perm = () if t == 1 else tuple(int(v) for v in rng.permutation(d))
            specs.append(
                TaskSpec(
                    task_id=t, kind=kind, n_train=n_train, n_test=n_test,
                    num_classes=dataset.num_classes, permutation=perm,
                )
            )
    elif kind == "rotation":
        angles = 180.0 * np.arange(num_tasks) / num_tasks
        rng.shuffle(angles)
        for t, angle in enumerate(angles, start=1):
            specs.append(
                TaskSpec(
                    task_id=t, kind=kind, n_train=n_train, n_test=n_test,
                    num_classes=dataset.num_classes, angle=float(angle),
                )
            )
    else:
        classes = np.array(rng.permutation(dataset.num_classes))
        base, rem = divmod(dataset.num_classes, num_tasks)
        if base == 0:
            raise ValueError(
                f"cannot split {dataset.num_classes} classes into {num_tasks} tasks"
            )
        start = 0
        for t in range(1, num_tasks + 1):
            size = base + (1 if t <= rem else 0)
            group = tuple(int(c) for c in np.sort(classes[start : start + size]))
            start += size
            specs.append(
                TaskSpec(
                    task_id=t, kind=kind, n_train=n_train, n_test=n_test,
                    num_classes=size, classes=group,
                )
            )
    return specs


def materialize_task(spec: TaskSpec, dataset: Dataset, rng: np.random.Generator) -> TaskData:
    """Apply the task transform and draw the task's train/test subsets."""

    def pick(x, y, want):
        take = min(want, x.shape[0])
        idx = rng.choice(x.shape[0], size=take, replace=False)
        return x[idx], y[idx]

    if spec.kind == "class_subset":
        relabel = {c: i for i, c in enumerate(spec.classes)}
        tr_mask = np.isin(dataset.y_train, spec.classes)
        te_mask = np.isin(dataset.y_test, spec.classes)
        xtr, ytr = pick(dataset.x_train[tr_mask], dataset.y_train[tr_mask], spec.n_train)
        xte, yte = pick(dataset.x_test[te_mask], dataset.y_test[te_mask], spec.n_test)
        ytr = np.array([relabel[c] for c in ytr], dtype=np.int64)
        yte = np.array([relabel[c] for c in yte], dtype=np.int64)
        return TaskData(xtr, ytr, xte, yte, spec.num_classes)

    xtr, ytr = pick(dataset.x_train, dataset.y_train, spec.n_train)
    xte, yte = pick(dataset.x_test, dataset.y_test, spec.n_test)
    if spec.kind == "permutation":
        if spec.permutation:
            perm = np.array(spec.permutation)
            xtr = xtr[:, perm]
            xte = xte[:, perm]
    else:
        xtr = rotate_batch(xtr, spec.angle, dataset.image_hw)
        xte = rotate_batch(xte, spec.angle, dataset.image_hw)
    return TaskData(xtr, ytr, xte, yte, spec.num_classes)
