"""Datasets: synthetic generators, CSV and IDX reading/writing, MNIST samples."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.array(self.points, dtype=float)
        y = np.array(self.labels, dtype=int)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValidationError(f"points must be an (n, d) array with d >= 1, got {X.shape}")
        if y.shape != (X.shape[0],) or X.shape[0] < 1:
            raise ValidationError(f"{X.shape[0]} points but {y.shape[0] if y.ndim else 0} labels")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValidationError(f"labels must lie in 0..{self.n_classes - 1}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def in_box(self) -> bool:
        return bool(self.points.min() >= 0.0 and self.points.max() <= 1.0)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.points[idx], self.labels[idx], self.n_classes)

    def select_classes(self, classes) -> "LabeledDataset":
        """Keep only ``classes`` and relabel them ``0..len(classes)-1`` in the given order."""
        classes = list(classes)
        if not classes:
            raise ValidationError("class subset is empty")
        if len(set(classes)) != len(classes):
            raise ValidationError("class subset has duplicates")
        remap = {c: i for i, c in enumerate(classes)}
        keep = np.isin(self.labels, classes)
        if not keep.any():
            raise ValidationError(f"no points carry any of the classes {classes}")
        y = np.array([remap[c] for c in self.labels[keep]], dtype=int)
        return LabeledDataset(self.points[keep], y, len(classes))

    def subsample(self, size: int, seed: int = 0) -> "LabeledDataset":
        if size > self.n:
            raise ValidationError(f"subsample of {size} requested from {self.n} points")
        idx = np.sort(np.random.default_rng(seed).permutation(self.n)[:size])
        return self.subset(idx)

    def split(self, n_train: int, seed: int = 0) -> tuple["LabeledDataset", "LabeledDataset"]:
        perm = np.random.default_rng(seed).permutation(self.n)
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# synthetic data


def generate(kind: str, n: int, d: int = 2, n_classes: int = 3, seed: int = 0,
             noise: float = 0.05) -> LabeledDataset:
    """Deterministic toy datasets inside ``[0, 1]^d``.

    ``blobs``  isotropic clusters around random centres (``n_classes`` classes)
    ``moons``  two interleaved half circles in the first two coordinates
    ``xor``    four quadrant clusters with XOR labels in the first two coordinates
    Extra coordinates of ``moons`` and ``xor`` carry uniform noise in ``[0.45, 0.55]``.
    """
    rng = np.random.default_rng(seed)
    if noise < 0:
        raise ValidationError("noise must be >= 0")
    if d < 1:
        raise ValidationError("d must be >= 1")
    if kind == "blobs":
        K = n_classes
        if K < 2 or n < K:
            raise ValidationError("blobs need n >= n_classes >= 2")
        centres = rng.uniform(0.2, 0.8, size=(K, d))
        y = np.arange(n) % K
        X = centres[y] + noise * rng.standard_normal((n, d))
    elif kind in ("moons", "xor"):
        if d < 2:
            raise ValidationError(f"{kind} needs d >= 2")
        K = 2
        if n < K:
            raise ValidationError("need n >= 2")
        y = np.arange(n) % 2
        X = rng.uniform(0.45, 0.55, size=(n, d))
        if kind == "moons":
            t = rng.uniform(0.0, np.pi, n)
            px = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
            py = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
            # map [-1, 2] x [-0.5, 1] into the unit square
            X[:, 0] = (px + 1.0) / 3.0
            X[:, 1] = (py + 0.5) / 1.5
        else:
            quad = rng.integers(0, 2, size=(n,))
            sx = np.where(y == 0, quad, 1 - quad)
            sy = quad
            X[:, 0] = 0.25 + 0.5 * sx
            X[:, 1] = 0.25 + 0.5 * sy
        X[:, :2] += noise * rng.standard_normal((n, 2))
    else:
        raise ValidationError(f"unknown dataset kind {kind!r}; choose blobs, moons or xor")
    return LabeledDataset(np.clip(X, 0.0, 1.0), y, K)


# ---------------------------------------------------------------------------
# CSV: header "label,x0,...", one row per point


def dumps_csv(ds: LabeledDataset) -> str:
    head = "label," + ",".join(f"x{i}" for i in range(ds.d))
    rows = [head]
    for lab, row in zip(ds.labels, ds.points):
        rows.append(f"{lab}," + ",".join(f"{v:.17g}" for v in row))
    return "\n".join(rows) + "\n"


def save_csv(ds: LabeledDataset, path) -> None:
    Path(path).write_text(dumps_csv(ds))


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty file")
    start = 1 if lines[0].split(",")[0].strip().lower() == "label" else 0
    width = None
    labels, rows = [], []
    for lineno, line in enumerate(lines[start:], start + 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ValidationError(f"{path}:{lineno}: row has {len(parts)} fields, expected {width}")
        try:
            labels.append(int(float(parts[0])))
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    X = np.array(rows, dtype=float)
    y = np.array(labels, dtype=int)
    X = scale_to_unit_box(X, source=str(path))
    K = n_classes or int(y.max()) + 1
    return LabeledDataset(X, y, K)


def scale_to_unit_box(X: np.ndarray, source: str = "data") -> np.ndarray:
    if X.size == 0 or (X.min() >= 0.0 and X.max() <= 1.0):
        return X
    lo, hi = float(X.min()), float(X.max())
    if lo >= 0 and hi <= 255 and np.all(X == np.round(X)):
        logger.warning("%s: integer features in [0, 255], dividing by 255", source)
        return X / 255.0
    logger.warning("%s: features outside [0, 1], min-max scaling globally", source)
    return (X - lo) / (hi - lo) if hi > lo else np.zeros_like(X)


# ---------------------------------------------------------------------------
# IDX


def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array."""
    buf = _open_bytes(path)
    if len(buf) < 4:
        raise ValidationError(f"{path}: truncated at byte offset {len(buf)} (need 4-byte magic)")
    zero, dtype_code, ndim = buf[0:2], buf[2], buf[3]
    if zero != b"\x00\x00" or dtype_code not in IDX_DTYPES:
        raise ValidationError(f"{path}: bad magic number 0x{buf[:4].hex()} at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise ValidationError(f"{path}: truncated at byte offset {len(buf)} inside the dimension header")
    shape = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = np.dtype(IDX_DTYPES[dtype_code])
    need = header_end + int(np.prod(shape)) * dtype.itemsize
    if len(buf) < need:
        raise ValidationError(
            f"{path}: truncated at byte offset {len(buf)}, expected {need} bytes for shape {shape}"
        )
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=header_end).reshape(shape)


def write_idx(arr, path) -> None:
    arr = np.ascontiguousarray(arr)
    code = {np.dtype(np.uint8): 0x08}.get(arr.dtype)
    if code is None:
        raise ValidationError("only uint8 IDX files are written")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], -1).astype(float)
    if images.dtype == np.uint8:
        X /= 255.0
    else:
        X = scale_to_unit_box(X, str(images_path))
    y = labels.astype(int)
    return LabeledDataset(X, y, n_classes or int(y.max()) + 1)


def _idx_label_path(path: Path) -> Path:
    name = path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return path.with_name(name.replace(a, b))
    raise ValidationError(f"cannot infer the label file for {path}; pass 'images.idx:labels.idx'")


def load_dataset(path, fmt: str = "csv", n_classes: int | None = None) -> LabeledDataset:
    """Load ``csv`` or ``idx`` data.  For IDX, ``path`` is ``images[:labels]``."""
    if fmt == "csv":
        return load_csv(path, n_classes)
    if fmt == "idx":
        spec = str(path)
        if ":" in spec and not Path(spec).exists():
            img, lab = spec.split(":", 1)
            return load_idx(img, lab, n_classes)
        return load_idx(spec, _idx_label_path(Path(spec)), n_classes)
    raise ValidationError(f"unknown dataset format {fmt!r}; choose csv or idx")


# ---------------------------------------------------------------------------
# MNIST


def mnist_sample() -> LabeledDataset:
    """Real MNIST digits available offline.

    Uses IDX files in ``$CERTILIP_MNIST_DIR`` (``train-images-idx3-ubyte[.gz]``
    and the matching labels) when set, otherwise the 5000-digit sample bundled
    with ``mlxtend`` (500 per class).
    """
    root = os.environ.get("CERTILIP_MNIST_DIR")
    if root:
        for suffix in ("", ".gz"):
            img = Path(root) / f"train-images-idx3-ubyte{suffix}"
            if img.exists():
                return load_idx(img, Path(root) / f"train-labels-idx1-ubyte{suffix}", 10)
        raise ValidationError(f"no train-images-idx3-ubyte file in {root}")
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        raise ValidationError(
            "no MNIST source: set CERTILIP_MNIST_DIR to a folder with IDX files or install mlxtend"
        ) from None
    X, y = mnist_data()
    return LabeledDataset(np.asarray(X, dtype=float) / 255.0, np.asarray(y, dtype=int), 10)
