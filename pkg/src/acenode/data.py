"""Synthetic tasks and IDX image ingestion."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ConfigurationError


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    splits: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.targets) != n:
            raise ConfigurationError(f"{n} inputs but {len(self.targets)} targets")
        seen = np.concatenate([np.asarray(v, dtype=np.int64) for v in self.splits.values()]) \
            if self.splits else np.array([], dtype=np.int64)
        if len(seen) != n or len(np.unique(seen)) != n or (n and (seen.min() < 0 or seen.max() >= n)):
            raise ConfigurationError("splits must be disjoint and cover every index")

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.inputs[idx], self.targets[idx]

    def __len__(self) -> int:
        return len(self.inputs)


def _split_sizes(n: int, fractions) -> list[int]:
    sizes = [int(round(n * f)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def _shuffled_splits(n: int, names, fractions, rng) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    bounds = np.cumsum([0] + _split_sizes(n, fractions))
    return {name: np.sort(order[bounds[i]:bounds[i + 1]]) for i, name in enumerate(names)}


def synth_crossing(n: int, noise: float, seed: int, fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """1-d points near -1 must move to +1 and points near +1 to -1.

    Inputs are ``[n, 1]``; targets are the swapped positions (+1 / -1).
    """
    if n % 2:
        raise ConfigurationError("synth_crossing needs an even number of samples")
    rng = np.random.default_rng(seed)
    centers = np.repeat([-1.0, 1.0], n // 2)
    x = centers + noise * rng.standard_normal(n)
    targets = -centers
    # interleave the two classes so every split is balanced
    order = np.argsort(np.tile(np.arange(n // 2), 2), kind="stable")
    x, targets = x[order], targets[order]
    splits = {}
    start = 0
    for name, size in zip(("train", "val", "test"), _split_sizes(n // 2, fractions)):
        splits[name] = np.arange(2 * start, 2 * (start + size))
        start += size
    return Dataset(x[:, None], targets, splits, {"task": "crossing", "noise": noise, "seed": seed})


def spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m)))) if m.size else 0.0


def var_series(coupling: np.ndarray, length: int, noise: float, rng: np.random.Generator,
               burn_in: int = 200, x0: np.ndarray | None = None) -> np.ndarray:
    """``x_{t+1} = coupling @ x_t + noise * eps``, started at ``x0`` (default 0) and run ``burn_in`` steps first."""
    d = coupling.shape[0]
    x = np.zeros(d) if x0 is None else np.asarray(x0, dtype=np.float64)
    out = np.empty((length, d))
    for i in range(burn_in + length):
        x = coupling @ x + noise * rng.standard_normal(d)
        if i >= burn_in:
            out[i - burn_in] = x
    return out


def structured_coupling(d: int, strength: float = 0.95) -> np.ndarray:
    """Each dimension follows its cyclic predecessor with the opposite sign."""
    return -strength * np.roll(np.eye(d), 1, axis=0)


def synth_var_series(d: int, length: int, coupling, noise: float, seed: int, window: int = 8,
                     fractions=(0.7, 0.15, 0.15)) -> Dataset:
    """First-order vector autoregression cut into (window -> next step) samples.

    Splits are chronological. The series is standardized with train-split
    statistics only; ``meta["series"]`` keeps the standardized series.
    """
    coupling = np.asarray(coupling, dtype=np.float64)
    if coupling.shape != (d, d):
        raise ConfigurationError(f"coupling must be {d}x{d}, got {coupling.shape}")
    rho = spectral_radius(coupling)
    if rho >= 1:
        raise ConfigurationError(f"coupling spectral radius {rho:.3f} >= 1 (non-stationary)")
    if length <= window + 1:
        raise ConfigurationError("series too short for the window")
    rng = np.random.default_rng(seed)
    series = var_series(coupling, length, noise, rng)
    n = length - window
    sizes = _split_sizes(n, fractions)
    bounds = np.cumsum([0] + sizes)
    train_rows = series[: bounds[1] + window]
    mu = train_rows.mean(axis=0)
    sd = train_rows.std(axis=0)
    sd[sd == 0] = 1.0
    z = (series - mu) / sd
    idx = np.arange(n)[:, None] + np.arange(window)[None, :]
    inputs = z[idx]
    targets = z[window:]
    splits = {name: np.arange(bounds[i], bounds[i + 1]) for i, name in enumerate(("train", "val", "test"))}
    meta = {"task": "var_forecast", "d": d, "window": window, "noise": noise, "seed": seed,
            "mean": mu, "std": sd, "coupling": coupling, "series": z}
    return Dataset(inputs, targets, splits, meta)


def export_series_csv(path, series: np.ndarray) -> None:
    series = np.asarray(series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(series.shape[1])])
        for t, row in enumerate(series):
            w.writerow([t] + [repr(float(v)) for v in row])


# IDX -----------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated magic at offset 0")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad magic {raw[:4].hex()} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated payload at offset {len(raw)} (expected {need} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes[array.dtype.newbyteorder("=")]
    big = array.astype(np.dtype(_IDX_TYPES[code]))
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + big.tobytes())


def append_split(base: Dataset, other: Dataset, name: str = "test") -> Dataset:
    """``base`` plus every item of ``other`` as a new split called ``name``."""
    if name in base.splits:
        raise ConfigurationError(f"split {name!r} already present")
    if base.inputs.shape[1:] != other.inputs.shape[1:]:
        raise ConfigurationError(f"item shapes differ: {base.inputs.shape[1:]} vs {other.inputs.shape[1:]}")
    n = len(base)
    splits = dict(base.splits)
    splits[name] = np.arange(n, n + len(other))
    return Dataset(np.concatenate([base.inputs, other.inputs]), np.concatenate([base.targets, other.targets]),
                   splits, dict(base.meta))


def downsample2(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes."""
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def load_idx_images(images_path, labels_path, limit: int | None = None, seed: int = 0,
                    downsample: bool = False, val_fraction: float = 0.1) -> Dataset:
    """Images scaled to [0, 1] as ``[N, 1, H, W]`` with integer labels.

    Items are shuffled with ``seed`` before ``limit`` is applied; the first
    ``val_fraction`` of the retained items forms the validation split.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IdxFormatError(f"image/label files disagree: {images.shape} vs {labels.shape}")
    order = np.random.default_rng(seed).permutation(len(images))
    if limit is not None:
        order = order[:limit]
    x = images[order].astype(np.float64) / 255.0
    if downsample:
        x = downsample2(x)
    y = labels[order].astype(np.int64)
    n = len(order)
    n_val = int(round(n * val_fraction))
    splits = {"val": np.arange(n_val), "train": np.arange(n_val, n)}
    return Dataset(x[:, None], y, splits, {"task": "mnist", "side": x.shape[-1], "seed": seed})
