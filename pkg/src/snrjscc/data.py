"""CIFAR-10 acquisition and batching.

Cache layout: ``<cache_dir>/cifar-10-python.tar.gz``, the canonical archive,
verified by MD5 before every parse. The cache directory defaults to
``$JSCC_DATA_DIR`` and falls back to ``~/.cache/snrjscc``.
"""

from __future__ import annotations

import functools
import hashlib
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_ARCHIVE = "cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"
_TRAIN_MEMBERS = [f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)]
_TEST_MEMBER = "cifar-10-batches-py/test_batch"


class IntegrityError(RuntimeError):
    pass


class FetchError(RuntimeError):
    pass


@dataclass
class ImageBatch:
    pixels: np.ndarray  # (N, 32, 32, 3) float32 in [0, 1]
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.pixels)


def default_cache_dir() -> Path:
    return Path(os.environ.get("JSCC_DATA_DIR", Path.home() / ".cache" / "snrjscc"))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_cifar10(cache_dir: str | Path | None = None, url: str = CIFAR10_URL, md5: str = CIFAR10_MD5) -> Path:
    """Download the archive into the cache unless a verified copy is already there."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    target = cache / CIFAR10_ARCHIVE
    if target.exists() and _md5(target) == md5:
        return target
    cache.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(".part")
    try:
        urllib.request.urlretrieve(url, tmp)
    except OSError as e:
        raise FetchError(f"could not download {url}: {e}") from e
    if _md5(tmp) != md5:
        tmp.unlink()
        raise IntegrityError(f"checksum mismatch for download from {url}")
    tmp.replace(target)
    return target


def _read_batch(tar: tarfile.TarFile, member: str) -> np.ndarray:
    f = tar.extractfile(member)
    if f is None:
        raise IntegrityError(f"archive member {member} missing")
    d = pickle.load(f, encoding="bytes")
    data = np.asarray(d[b"data"], dtype=np.uint8)
    # rows are 1024 R, 1024 G, 1024 B values, each plane row-major
    return data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()


def load_cifar10(cache_dir: str | Path | None = None, md5: str = CIFAR10_MD5) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(train, test)`` uint8 arrays of shape ``(N, 32, 32, 3)``; labels are dropped.

    Never touches the network: run ``fetch_cifar10`` (or ``snrjscc fetch-data``) first.
    """
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    archive = cache / CIFAR10_ARCHIVE
    if not archive.exists():
        raise FetchError(f"CIFAR-10 archive not found at {archive}; run `snrjscc fetch-data` first")
    if _md5(archive) != md5:
        raise IntegrityError(f"{archive} does not match the pinned checksum {md5}")
    with tarfile.open(archive, "r:gz") as tar:
        train = np.concatenate([_read_batch(tar, m) for m in _TRAIN_MEMBERS])
        test = _read_batch(tar, _TEST_MEMBER)
    return train, test


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map integer pixels in [0, 255] to float32 ``v / 255``."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return (raw.astype(np.float64) / 255.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def batches(
    images: np.ndarray,
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
    drop_last: bool = True,
) -> Iterator[ImageBatch]:
    """Yield normalized batches covering one epoch.

    With ``shuffle_seed`` the order is a permutation fixed by ``(shuffle_seed, epoch)``.
    Training drops the final partial batch; evaluation passes ``drop_last=False``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(images)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        chunk = images[idx]
        pixels = normalize(chunk) if chunk.dtype == np.uint8 else np.asarray(chunk, dtype=np.float32)
        yield ImageBatch(pixels, idx)


# ---------------------------------------------------------------------------
# offline stand-in data
# ---------------------------------------------------------------------------

_PATCH_SOURCES = {
    "train": ["astronaut", "rocket", "immunohistochemistry", "hubble_deep_field", "retina", "coffee"],
    "test": ["chelsea", "color", "motorcycle_left"],
}


@functools.lru_cache(maxsize=2)
def _pyramids(split: str) -> tuple[list[np.ndarray], ...]:
    import skimage.data
    from skimage.io import imread
    from skimage.transform import rescale

    out = []
    for name in _PATCH_SOURCES[split]:
        loader = getattr(skimage.data, name, None)
        img = loader() if loader is not None else imread(Path(skimage.data.__file__).parent / f"{name}.png")
        img = np.asarray(img)[..., :3].astype(np.float64) / 255.0
        levels = [img] + [rescale(img, f, channel_axis=-1, anti_aliasing=True) for f in (0.5, 0.25, 0.125)]
        out.append([lv for lv in levels if min(lv.shape[:2]) >= 32])
    return tuple(out)


def natural_patches(n: int, split: str = "train", seed: int = 0) -> np.ndarray:
    """Random 32x32 RGB crops of the photographs bundled with scikit-image.

    A CIFAR-sized stand-in for machines that cannot download CIFAR-10. Train
    and test crops come from disjoint photographs; each crop is taken at a
    random scale in {1, 1/2, 1/4, 1/8} so it holds object-level structure.
    """
    if split not in _PATCH_SOURCES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    pyramids = _pyramids(split)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    out = np.empty((n, 32, 32, 3), dtype=np.uint8)
    for i in range(n):
        levels = pyramids[rng.integers(len(pyramids))]
        lv = levels[rng.integers(len(levels))]
        r = rng.integers(lv.shape[0] - 31)
        c = rng.integers(lv.shape[1] - 31)
        out[i] = np.clip(np.rint(lv[r : r + 32, c : c + 32] * 255), 0, 255).astype(np.uint8)
    return out


def load_dataset(
    name: str,
    cache_dir: str | Path | None = None,
    train_subset: int | None = None,
    test_subset: int | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """``cifar10`` (first ``*_subset`` images of each split) or ``patches``."""
    if name == "cifar10":
        train, test = load_cifar10(cache_dir)
        return train[:train_subset], test[:test_subset]
    if name == "patches":
        return natural_patches(train_subset or 5000, "train", seed), natural_patches(test_subset or 1000, "test", seed)
    raise ValueError(f"unknown dataset {name!r}")
