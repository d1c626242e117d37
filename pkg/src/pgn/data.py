"""Datasets: synthetic shape images, normalisation, and on-disk formats.

Two on-disk layouts are supported:

``idx_binary``
    ``{split}-images.idx`` / ``{split}-labels.idx`` for split in train/test.
    Header: two zero bytes, a dtype code (0x08 uint8, 0x0D float32), the
    number of dims, then each dim as a big-endian uint32; payload is
    big-endian.  uint8 images are scaled to [0, 1] on load.

``raw_tensor_dir``
    ``manifest.txt`` (one ``name dtype dim0 dim1 ...`` line per array plus a
    ``num_classes K`` line) next to little-endian ``{name}.bin`` payloads.
"""

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from pgn.diffcore import make_rng

VANILLA = "vanilla_01"
STANDARDIZED = "zero_mean_unit_var"
NORMALIZATIONS = (VANILLA, STANDARDIZED)
FORMATS = ("idx_binary", "raw_tensor_dir")


class DatasetError(ValueError):
    pass


class CorruptHeaderError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class DegenerateChannelError(DatasetError):
    pass


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    normalization: str = VANILLA
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        for split in ("train", "test"):
            images, labels = self.split(split)
            if images.ndim != 4:
                raise DatasetError(f"{split} images must be N x C x H x W, got {images.shape}")
            if labels.shape != (images.shape[0],):
                raise DatasetError(f"{split}: {images.shape[0]} images but labels shaped {labels.shape}")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                bad = labels[(labels < 0) | (labels >= self.num_classes)][0]
                raise LabelRangeError(f"{split}: label {bad} outside [0, {self.num_classes})")

    def split(self, name):
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise DatasetError(f"unknown split {name!r}")

    @property
    def image_shape(self):
        return tuple(self.train_images.shape[1:])


# ---------------------------------------------------------------- synthetic shapes

SHAPE_NAMES = (
    "disk", "square", "triangle", "plus", "ring",
    "hbar", "vbar", "diamond", "cross", "frame",
)


def _shape_mask(kind, dx, dy, r):
    ax, ay = np.abs(dx), np.abs(dy)
    cheb = np.maximum(ax, ay)
    dist2 = dx * dx + dy * dy
    if kind == 0:
        return dist2 <= r * r
    if kind == 1:
        return cheb <= 0.8 * r
    if kind == 2:
        h = 0.85 * r
        return (dy >= -h) & (dy <= h) & (ax <= (dy + h) * 0.6)
    if kind == 3:
        return ((ax <= 0.3 * r) & (ay <= r)) | ((ay <= 0.3 * r) & (ax <= r))
    if kind == 4:
        return (dist2 <= r * r) & (dist2 >= (0.55 * r) ** 2)
    if kind == 5:
        return (ay <= 0.35 * r) & (ax <= r)
    if kind == 6:
        return (ax <= 0.35 * r) & (ay <= r)
    if kind == 7:
        return ax + ay <= r
    if kind == 8:
        return ((np.abs(dx - dy) <= 0.4 * r) | (np.abs(dx + dy) <= 0.4 * r)) & (cheb <= 0.8 * r)
    return (cheb <= 0.85 * r) & (cheb >= 0.5 * r)


def synthetic_images(n, rng, size=32, num_classes=10, noise=0.08, contrast=(1.0, 1.0)):
    """``n`` colored-shape images in [0, 1] with balanced labels (class = shape).

    Each image draws a contrast factor from ``contrast``; foreground and
    background colours are pulled towards their midpoint by that factor, so
    low-contrast images are the hard ones.
    """
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise DatasetError(f"synthetic generator supports 2..{len(SHAPE_NAMES)} classes")
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, 3, size, size), dtype=np.float32)
    lo, hi = 0.3 * size, 0.7 * size
    for i in range(n):
        cx, cy = rng.uniform(lo, hi, size=2)
        r = rng.uniform(0.16, 0.28) * size
        bg = rng.uniform(0.0, 0.45, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        if rng.random() < 0.5:
            bg, fg = fg, bg
        c = rng.uniform(*contrast)
        mid = 0.5 * (fg + bg)
        bg, fg = mid + c * (bg - mid), mid + c * (fg - mid)
        mask = _shape_mask(labels[i], xx - cx, yy - cy, r)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def make_synthetic(
    n_train=2000, n_test=1000, seed=0, size=32, num_classes=10, noise=0.08, contrast=(1.0, 1.0)
):
    """Deterministic synthetic 10-class dataset (vanilla [0, 1] pixels)."""
    rng = make_rng(seed)
    tr_x, tr_y = synthetic_images(n_train, rng, size, num_classes, noise, contrast)
    te_x, te_y = synthetic_images(n_test, rng, size, num_classes, noise, contrast)
    return Dataset(tr_x, tr_y, te_x, te_y, num_classes)


# ---------------------------------------------------------------- normalisation


def normalize(ds, mode=STANDARDIZED):
    """Per-channel standardisation with train-split statistics (vanilla input only)."""
    if mode not in NORMALIZATIONS:
        raise DatasetError(f"unknown normalization {mode!r}")
    if ds.normalization != VANILLA:
        raise DatasetError("normalize expects a vanilla_01 dataset")
    if mode == VANILLA:
        return ds
    mean = ds.train_images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = ds.train_images.std(axis=(0, 2, 3), dtype=np.float64)
    if np.any(std == 0):
        raise DegenerateChannelError(f"channel(s) {np.flatnonzero(std == 0).tolist()} have zero variance")

    def apply(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)

    return replace(
        ds,
        train_images=apply(ds.train_images),
        test_images=apply(ds.test_images),
        normalization=STANDARDIZED,
        mean=mean,
        std=std,
    )


def denormalize(ds):
    if ds.normalization == VANILLA:
        return ds

    def undo(x):
        return (x * ds.std[None, :, None, None] + ds.mean[None, :, None, None]).astype(np.float32)

    return replace(
        ds,
        train_images=undo(ds.train_images),
        test_images=undo(ds.test_images),
        normalization=VANILLA,
        mean=None,
        std=None,
    )


# ---------------------------------------------------------------- idx_binary

_IDX_CODES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, payload = 0x08, array.astype(">u1")
    else:
        code, payload = 0x0D, array.astype(">f4")
    header = struct.pack(">BBBB", 0, 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_idx(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise CorruptHeaderError(f"{path}: bad idx magic")
    code, ndim = blob[2], blob[3]
    if code not in _IDX_CODES:
        raise CorruptHeaderError(f"{path}: unsupported idx dtype code 0x{code:02X}")
    if ndim == 0 or len(blob) < 4 + 4 * ndim:
        raise CorruptHeaderError(f"{path}: truncated idx header")
    dims = struct.unpack(f">{ndim}I", blob[4 : 4 + 4 * ndim])
    dtype = _IDX_CODES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = blob[4 + 4 * ndim :]
    if len(body) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise CorruptHeaderError(f"{path}: {len(body) - expected} trailing bytes after payload")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


# ---------------------------------------------------------------- raw_tensor_dir

_RAW_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8")}


def _write_raw_dir(path, arrays, num_classes):
    lines = [f"num_classes {num_classes}"]
    for name, arr in arrays.items():
        kind = "float32" if arr.dtype.kind == "f" else "int64"
        arr.astype(_RAW_DTYPES[kind]).tofile(os.path.join(path, f"{name}.bin"))
        lines.append(" ".join([name, kind] + [str(d) for d in arr.shape]))
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_raw_dir(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise CorruptHeaderError(f"{path}: missing manifest.txt")
    arrays, num_classes = {}, None
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "num_classes":
                    num_classes = int(parts[1])
                    continue
                name, kind, dims = parts[0], parts[1], tuple(int(d) for d in parts[2:])
                dtype = _RAW_DTYPES[kind]
            except (IndexError, ValueError, KeyError):
                raise CorruptHeaderError(f"{manifest}:{lineno}: malformed entry {line.strip()!r}") from None
            blob = np.fromfile(os.path.join(path, f"{name}.bin"), dtype=np.uint8)
            expected = int(np.prod(dims)) * dtype.itemsize
            if blob.size < expected:
                raise TruncatedPayloadError(f"{path}/{name}.bin: {blob.size} bytes, expected {expected}")
            if blob.size > expected:
                raise CorruptHeaderError(f"{path}/{name}.bin: {blob.size - expected} trailing bytes")
            arrays[name] = blob.view(dtype).reshape(dims)
    if num_classes is None:
        raise CorruptHeaderError(f"{manifest}: missing num_classes line")
    return arrays, num_classes


# ---------------------------------------------------------------- save / load


def save_dataset(ds, path, format="idx_binary"):
    if ds.normalization != VANILLA:
        ds = denormalize(ds)
    os.makedirs(path, exist_ok=True)
    if format == "idx_binary":
        for split in ("train", "test"):
            images, labels = ds.split(split)
            write_idx(os.path.join(path, f"{split}-images.idx"), images.astype(np.float32))
            write_idx(os.path.join(path, f"{split}-labels.idx"), labels.astype(np.uint8))
        with open(os.path.join(path, "num_classes.txt"), "w") as fh:
            fh.write(f"{ds.num_classes}\n")
    elif format == "raw_tensor_dir":
        _write_raw_dir(
            path,
            {
                "train_images": ds.train_images,
                "train_labels": ds.train_labels,
                "test_images": ds.test_images,
                "test_labels": ds.test_labels,
            },
            ds.num_classes,
        )
    else:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")


def load_dataset(path, format="idx_binary", num_classes=None):
    if not os.path.isdir(path):
        raise DatasetError(f"dataset directory {path!r} does not exist")
    if format == "idx_binary":
        parts = {}
        for split in ("train", "test"):
            images = read_idx(os.path.join(path, f"{split}-images.idx"))
            if images.dtype == np.dtype(">u1"):
                images = images.astype(np.float32) / 255.0
            if images.ndim == 3:
                images = images[:, None]
            parts[split] = (images.astype(np.float32), read_idx(os.path.join(path, f"{split}-labels.idx")))
        if num_classes is None:
            meta = os.path.join(path, "num_classes.txt")
            if os.path.exists(meta):
                with open(meta) as fh:
                    num_classes = int(fh.read().strip())
            else:
                num_classes = int(max(parts["train"][1].max(), parts["test"][1].max())) + 1
        (tr_x, tr_y), (te_x, te_y) = parts["train"], parts["test"]
    elif format == "raw_tensor_dir":
        arrays, k = _read_raw_dir(path)
        num_classes = num_classes or k
        try:
            tr_x, tr_y = arrays["train_images"], arrays["train_labels"]
            te_x, te_y = arrays["test_images"], arrays["test_labels"]
        except KeyError as exc:
            raise CorruptHeaderError(f"{path}: manifest lacks {exc.args[0]}") from None
    else:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    return Dataset(
        np.ascontiguousarray(tr_x, dtype=np.float32),
        np.asarray(tr_y, dtype=np.int64),
        np.ascontiguousarray(te_x, dtype=np.float32),
        np.asarray(te_y, dtype=np.int64),
        int(num_classes),
    )
