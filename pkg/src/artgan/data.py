"""Labeled image sets: CIFAR-10 binaries, class-per-directory image trees,
synthetic shapes, PPM I/O and the stratified train/test split."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
CIFAR_RECORD = 3073
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck"]
SHAPES = ["circle", "square", "triangle", "cross", "ring", "bar"]
HUES = [(0.95, 0.2, 0.15), (0.2, 0.85, 0.25), (0.2, 0.35, 0.95),
        (0.95, 0.85, 0.15), (0.85, 0.2, 0.85), (0.15, 0.85, 0.9)]


class FormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray          # (N, 3, H, W) in [0, 1]
    labels: np.ndarray          # (N,) int, 1..K
    class_names: list[str]
    provenance: str = ""
    skipped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.K):
            raise ValueError(f"labels must lie in 1..{self.K}")

    @property
    def K(self):
        return len(self.class_names)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.class_names),
                               provenance or self.provenance)


# -- PPM ------------------------------------------------------------------------

def to_bytes(img):
    """[0, 1] float image (3, H, W) -> (H, W, 3) uint8, round half up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, img):
    img = np.asarray(img)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(to_bytes(img)).tobytes())


def _ppm_tokens(data):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos, n = 0, len(data)
    while True:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        yield data[start:pos], pos


def read_ppm(path):
    """Binary PPM (P6, maxval 255) -> float array (3, H, W) in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = _ppm_tokens(data)
    try:
        magic, _ = next(tokens)
        w, _ = next(tokens)
        h, _ = next(tokens)
        maxval, end = next(tokens)
    except StopIteration:
        raise FormatError(f"{path}: truncated PPM header") from None
    if magic != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pixels = data[end + 1:end + 1 + 3 * w * h]
    if len(pixels) != 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(DTYPE) / 255.0


def _read_other(path):
    from PIL import Image  # optional: only needed for non-PPM files
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(DTYPE) / 255.0


def read_image(path):
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    return _read_other(path)


# -- resizing ---------------------------------------------------------------------

def center_crop_square(img):
    _, h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[:, top:top + s, left:left + s]


def resize_nearest(img, size):
    _, h, w = img.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[:, rows][:, :, cols]


def fit_to_square(img, size=IMAGE_SIZE):
    return np.ascontiguousarray(resize_nearest(center_crop_square(img), size))


# -- loaders --------------------------------------------------------------------

def parse_cifar_records(raw: bytes, name="<bytes>"):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{name}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{name}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / 255.0
    return images, labels + 1


def load_cifar10(root, split="train"):
    """CIFAR-10 binary batches, labels remapped to 1..10, each pixel replicated 2x2 to 64x64."""
    root = Path(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files = [root / n for n in names if (root / n).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches under {root}")
    images, labels = [], []
    for f in files:
        im, lab = parse_cifar_records(f.read_bytes(), str(f))
        images.append(im)
        labels.append(lab)
    images = np.concatenate(images)
    images = np.repeat(np.repeat(images, 2, axis=2), 2, axis=3)
    class_names = list(CIFAR_CLASSES)
    meta = root / "batches.meta.txt"
    if meta.exists():
        found = [line.strip() for line in meta.read_text().splitlines() if line.strip()]
        if len(found) == 10:
            class_names = found
    return LabeledImageSet(images, np.concatenate(labels), class_names, f"cifar10:{root}:{split}")


def load_image_dir(root, size=IMAGE_SIZE):
    """One subdirectory per class; classes numbered by sorted directory name."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    images, labels, skipped = [], [], 0
    for k, cdir in enumerate(class_dirs, start=1):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"class directory {cdir} is empty")
        for f in files:
            try:
                img = read_image(f)
            except Exception as e:  # unreadable files are skipped, not fatal
                log.warning("skipping %s: %s", f, e)
                skipped += 1
                continue
            images.append(fit_to_square(img, size))
            labels.append(k)
    empty = [c.name for k, c in enumerate(class_dirs, start=1) if k not in labels]
    if empty:
        raise ValueError(f"no readable images in class directories: {', '.join(empty)}")
    return LabeledImageSet(np.stack(images), np.array(labels), [c.name for c in class_dirs],
                           f"dir:{root}", skipped)


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        arm = r / 4
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.6 * r) ** 2)
    if kind == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r / 4)
    raise ValueError(kind)


def synth_shapes(K=3, per_class=500, size=IMAGE_SIZE, seed=0):
    """Class c is a fixed shape in a fixed hue on a dark noisy background,
    with seeded jitter of position, scale and brightness."""
    if not 1 <= K <= len(SHAPES):
        raise ValueError(f"synth_shapes supports 1..{len(SHAPES)} classes")
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    images = np.empty((K * per_class, 3, size, size), dtype=DTYPE)
    labels = np.repeat(np.arange(1, K + 1), per_class)
    for n, k in enumerate(labels):
        r = size * rng.uniform(0.18, 0.3)
        cy, cx = size / 2 + size * rng.uniform(-0.15, 0.15, size=2)
        mask = _shape_mask(SHAPES[k - 1], yy, xx, cy, cx, r)
        bright = rng.uniform(0.8, 1.0)
        bg = rng.uniform(0.0, 0.12, size=(3, size, size))
        color = np.asarray(HUES[k - 1])[:, None, None] * bright
        images[n] = np.where(mask[None], color, bg)
    return LabeledImageSet(images, labels, SHAPES[:K], f"synth:K={K},per_class={per_class},seed={seed}")


def split_train_test(ds: LabeledImageSet, test_frac=0.3, seed=0):
    """Stratified seeded split; each class contributes round(test_frac * n_c) test images."""
    if not 0 < test_frac < 1:
        raise ValueError("test_frac must lie strictly between 0 and 1")
    rng = Rng(seed)
    train, test = [], []
    for k in range(1, ds.K + 1):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size < 2:
            raise ValueError(f"class {k} ({ds.class_names[k - 1]}) has fewer than 2 samples")
        idx = idx[rng.permutation(idx.size)]
        n_test = min(max(int(round(test_frac * idx.size)), 1), idx.size - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return (ds.subset(np.sort(train), ds.provenance + ":train"),
            ds.subset(np.sort(test), ds.provenance + ":test"))


def parse_dataset_spec(spec: str) -> LabeledImageSet:
    """``synth:K=3,per_class=500,seed=0`` | ``cifar10:<dir>`` | ``dir:<root>``."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        kw = {"K": 3, "per_class": 500, "seed": 0}
        for item in filter(None, rest.split(",")):
            key, eq, value = item.partition("=")
            if not eq or key.strip() not in kw:
                raise ValueError(f"bad synth option {item!r}")
            kw[key.strip()] = int(value)
        return synth_shapes(**kw)
    if kind == "cifar10":
        return load_cifar10(rest)
    if kind == "dir":
        return load_image_dir(rest)
    if os.path.isdir(spec):
        return load_image_dir(spec)
    raise ValueError(f"unknown dataset spec {spec!r}")
