"""Dataset ingestion and batching: synthetic generators (two moons,
Gaussian blobs), IDX and CIFAR-10 binary loaders, crop/flip augmentation
and seeded batch iteration. All pixel/feature values live in [0, 1]."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

Array = np.ndarray

# raw two-moons domain, padded so typical noise stays inside [0, 1]
_MOON_X0, _MOON_XS = -1.5, 4.0
_MOON_Y0, _MOON_YS = -1.0, 2.5


@dataclass
class Dataset:
    xs: Array
    ys: Array
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise FormatError("xs/ys length mismatch")
        if len(self.ys) and (self.ys.min() < 0 or self.ys.max() >= self.num_classes):
            raise FormatError("label out of range")

    def __len__(self) -> int:
        return len(self.xs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.xs[idx], self.ys[idx], self.num_classes, self.name)


@dataclass(frozen=True)
class AugmentConfig:
    crop_pad: int = 4
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.crop_pad < 0:
            raise ParameterError("crop_pad must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ParameterError("hflip_prob must lie in [0, 1]")


def moon_arcs(t: Array) -> tuple[Array, Array]:
    """Raw (pre-rescale) coordinates of the two interleaving arcs."""
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return outer, inner


def moons_to_unit(raw: Array) -> Array:
    out = np.empty_like(raw)
    out[:, 0] = (raw[:, 0] - _MOON_X0) / _MOON_XS
    out[:, 1] = (raw[:, 1] - _MOON_Y0) / _MOON_YS
    return out


def moons_from_unit(unit: Array) -> Array:
    raw = np.empty_like(unit)
    raw[:, 0] = unit[:, 0] * _MOON_XS + _MOON_X0
    raw[:, 1] = unit[:, 1] * _MOON_YS + _MOON_Y0
    return raw


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving half-circles rescaled into [0, 1]^2, n/2 per class."""
    if n % 2:
        raise ParameterError("n must be even")
    if noise < 0:
        raise ParameterError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = rng.uniform(0.0, np.pi, size=half)
    outer, inner = moon_arcs(t)
    raw = np.concatenate([outer, inner], axis=0)
    raw += rng.normal(0.0, noise, size=raw.shape)
    xs = np.clip(moons_to_unit(raw), 0.0, 1.0).astype(np.float32)
    ys = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return Dataset(xs=xs, ys=ys, num_classes=2, name="two-moons")


def gen_blobs(n: int, num_classes: int = 4, spread: float = 0.06, seed: int = 0) -> Dataset:
    """Gaussian blobs on a circle in [0, 1]^2; covers C > 2 testing."""
    if n % num_classes:
        raise ParameterError("n must be divisible by num_classes")
    rng = np.random.default_rng(seed)
    per = n // num_classes
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    xs = np.concatenate([rng.normal(c, spread, size=(per, 2)) for c in centers], axis=0)
    xs = np.clip(xs, 0.0, 1.0).astype(np.float32)
    ys = np.repeat(np.arange(num_classes, dtype=np.int64), per)
    return Dataset(xs=xs, ys=ys, num_classes=num_classes, name="blobs")


def load_idx(images_path, labels_path) -> Dataset:
    """IDX image/label pair (big-endian headers); pixels scaled by /255."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    if len(img_raw) < 16 or struct.unpack(">I", img_raw[:4])[0] != 0x00000803:
        raise FormatError("bad IDX image magic")
    if len(lab_raw) < 8 or struct.unpack(">I", lab_raw[:4])[0] != 0x00000801:
        raise FormatError("bad IDX label magic")
    n_img, rows, cols = struct.unpack(">III", img_raw[4:16])
    (n_lab,) = struct.unpack(">I", lab_raw[4:8])
    if n_img != n_lab:
        raise FormatError("image/label count mismatch")
    if len(img_raw) != 16 + n_img * rows * cols or len(lab_raw) != 8 + n_lab:
        raise FormatError("IDX payload size mismatch")
    xs = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n_img, rows, cols)
    xs = (xs.astype(np.float32) / 255.0).reshape(n_img, 1, rows, cols)
    ys = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(xs=xs, ys=ys, num_classes=int(ys.max()) + 1 if len(ys) else 10, name="idx")


def load_cifar10_bin(paths) -> Dataset:
    """CIFAR-10 binary batches: 3073-byte records, label byte + CHW pixels."""
    xs_parts, ys_parts = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % 3073:
            raise FormatError(f"{path}: size not a multiple of 3073")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        ys_parts.append(rec[:, 0].astype(np.int64))
        xs_parts.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    xs = np.concatenate(xs_parts, axis=0)
    ys = np.concatenate(ys_parts, axis=0)
    if len(ys) and ys.max() >= 10:
        raise FormatError("label byte out of range")
    return Dataset(xs=xs, ys=ys, num_classes=10, name="cifar10")


def augment(x: Array, cfg: AugmentConfig, epoch: int = 0, batch_index: int = 0) -> Array:
    """Random zero-pad crop + horizontal flip for image batches; vector
    batches pass through unchanged. Deterministic per (seed, epoch, batch)."""
    if x.ndim != 4:
        return x
    B, C, H, W = x.shape
    if cfg.crop_pad >= min(H, W):
        raise ParameterError("crop_pad must be smaller than the image side")
    rng = np.random.default_rng((cfg.seed, epoch, batch_index))
    out = x
    if cfg.crop_pad:
        pad = cfg.crop_pad
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(x)
        offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
        for i in range(B):
            r, c = offs[i]
            out[i] = padded[i, :, r : r + H, c : c + W]
    flips = rng.random(B) < cfg.hflip_prob
    out = out.copy() if out is x else out
    out[flips] = out[flips, :, :, ::-1]
    return out


def batches(dataset: Dataset, batch_size: int = 64, shuffle: bool = False, seed: int = 0):
    """Yield (x, y) covering every sample once; final partial batch kept."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.xs[idx], dataset.ys[idx]


def save_dataset(dataset: Dataset, out_dir) -> None:
    """xs.npy / ys.npy plus a small manifest; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "xs.npy", dataset.xs)
    np.save(out / "ys.npy", dataset.ys)
    manifest = (
        f"name {dataset.name}\nnum_classes {dataset.num_classes}\n"
        f"n {len(dataset)}\nshape {','.join(str(s) for s in dataset.xs.shape[1:])}\n"
    )
    (out / "manifest.txt").write_text(manifest)


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    try:
        lines = dict(line.split(" ", 1) for line in (d / "manifest.txt").read_text().splitlines())
        xs = np.load(d / "xs.npy")
        ys = np.load(d / "ys.npy")
    except (OSError, ValueError) as e:
        raise FormatError(f"unreadable dataset directory {in_dir}") from e
    return Dataset(xs=xs, ys=ys, num_classes=int(lines["num_classes"]), name=lines.get("name", ""))
