"""Image corpora: CIFAR-style binary records, image directories, and a tiny
built-in corpus cut from natural photographs that ship with scikit-image and
scikit-learn (no download needed).

Pixels are scaled to [0, 1] and standardized per channel with statistics
computed once per file and cached for the life of the process.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

RECORD_BYTES = 1 + 3 * 32 * 32
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------ cifar binary
def write_cifar_binary(path, images: np.ndarray, labels) -> None:
    """Write (N, 3, 32, 32) uint8 images as 1 label byte + 3072 pixel bytes each."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise DatasetError(f"expected uint8 (N, 3, 32, 32) images, got {images.dtype} {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if labels.shape[0] != images.shape[0]:
        raise DatasetError("one label per image required")
    rec = np.concatenate([labels, images.reshape(len(images), -1)], axis=1)
    Path(path).write_bytes(rec.tobytes())


def read_cifar_binary(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise DatasetError(f"{path}: empty file")
    if len(data) % RECORD_BYTES:
        offset = (len(data) // RECORD_BYTES) * RECORD_BYTES
        raise DatasetError(f"{path}: truncated record at byte offset {offset} "
                           f"({len(data) - offset} of {RECORD_BYTES} bytes)")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), rec[:, 0].copy()


def _cifar_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir() if p.suffix == ".bin")
    if not files:
        raise DatasetError(f"{path}: no .bin files")
    return files


# ---------------------------------------------------------------- raw dir
def read_raw_dir(path) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"{path}: no images found")
    imgs = []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if imgs and arr.shape != imgs[0].shape:
            raise DatasetError(f"{f}: size {arr.shape[:2]} differs from {imgs[0].shape[:2]}")
        imgs.append(arr)
    return np.stack(imgs).transpose(0, 3, 1, 2).copy(), np.zeros(len(files), dtype=np.uint8)


# ---------------------------------------------------------------- dataset
@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) float32, standardized
    labels: np.ndarray
    mean: np.ndarray  # per-channel, on the [0, 1] scale
    std: np.ndarray
    source: str

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ImageDataset":
        idx = np.atleast_1d(np.asarray(idx))
        return ImageDataset(self.images[idx], self.labels[idx], self.mean, self.std, f"{self.source}[subset]")

    def batches(self, batch_size: int, seed: int, steps: int | None = None):
        """Yield index arrays; reshuffles every pass; deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        n = len(self)
        step = 0
        while steps is None or step < steps:
            order = rng.permutation(n)
            if batch_size > n:
                reps = -(-batch_size // n)
                order = np.concatenate([order] + [rng.permutation(n) for _ in range(reps - 1)])
            for s in range(0, len(order) - batch_size + 1, batch_size):
                if steps is not None and step >= steps:
                    return
                yield order[s:s + batch_size]
                step += 1

    def to_uint8(self, images: np.ndarray | None = None) -> np.ndarray:
        imgs = self.images if images is None else images
        raw = imgs * self.std[None, :, None, None] + self.mean[None, :, None, None]
        return np.clip(np.round(raw * 255.0), 0, 255).astype(np.uint8)


@lru_cache(maxsize=16)
def _load_cached(path: str, fmt: str, mtime: float, size: int):
    p = Path(path)
    if fmt == "cifar-binary":
        parts = [read_cifar_binary(f) for f in _cifar_files(p)]
        raw = np.concatenate([a for a, _ in parts])
        labels = np.concatenate([b for _, b in parts])
    elif fmt == "raw-dir":
        raw, labels = read_raw_dir(p)
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    scaled = raw.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    images = ((scaled - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    images.setflags(write=False)
    return images, labels, mean, std


def load_dataset(path, format: str = "cifar-binary") -> ImageDataset:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"{path}: no such file or directory")
    if p.is_dir() and not any(p.iterdir()):
        raise DatasetError(f"{path}: empty directory")
    st = p.stat()
    images, labels, mean, std = _load_cached(str(p.resolve()), format, st.st_mtime, st.st_size)
    return ImageDataset(images, labels, mean, std, str(p))


# ------------------------------------------------------------ tiny corpus
def _photo_sources() -> list[np.ndarray]:
    import skimage.data as skd
    from sklearn.datasets import load_sample_images

    srcs = []
    for name in ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
                 "hubble_deep_field", "retina", "camera"):
        img = getattr(skd, name)()
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        srcs.append(np.ascontiguousarray(img[..., :3]))
    srcs.extend(load_sample_images().images)
    return srcs


def build_tiny_corpus(path, n_images: int = 512, seed: int = 0, size: int = 32) -> Path:
    """Random crops of bundled photographs, resized to ``size`` and written as cifar-binary.

    The label byte is the index of the source photograph.
    """
    from PIL import Image

    if size != 32:
        raise DatasetError("cifar-binary records are 32x32")
    rng = np.random.default_rng(seed)
    sources = _photo_sources()
    out = np.empty((n_images, 3, size, size), dtype=np.uint8)
    labels = np.empty(n_images, dtype=np.uint8)
    for i in range(n_images):
        s = int(rng.integers(len(sources)))
        src = sources[s]
        H, W = src.shape[:2]
        side = int(rng.integers(48, min(H, W) // 2 + 1))
        y = int(rng.integers(0, H - side + 1))
        x = int(rng.integers(0, W - side + 1))
        crop = Image.fromarray(src[y:y + side, x:x + side]).resize((size, size), Image.BOX)
        arr = np.asarray(crop, dtype=np.uint8)
        if rng.random() < 0.5:
            arr = arr[:, ::-1]
        out[i] = arr.transpose(2, 0, 1)
        labels[i] = s
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    write_cifar_binary(path, out, labels)
    return path


def default_corpus_path() -> Path:
    root = os.environ.get("LCMAE_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "lcmae"))
    return Path(root) / "tiny_corpus_512.bin"


def tiny_corpus(path=None, n_images: int = 512, seed: int = 0) -> ImageDataset:
    """Load the tiny corpus, building it on first use."""
    path = Path(path) if path else default_corpus_path()
    if not path.exists():
        build_tiny_corpus(path, n_images, seed)
    return load_dataset(path, "cifar-binary")
