"""Synthetic imbalanced multimodal data and evaluation-time noise injectors.

Noise degree ``eps`` maps to intensity as follows:

* gaussian: additive N(0, (0.1 * eps)^2)
* salt:     fraction min(0.05 * eps, 1) of entries set to their column max
* mask:     fraction min(0.05 * eps, 1) of entries set to 0
* snr:      additive Gaussian at a per-row SNR of (20 - 2 * eps) dB

``eps == 0`` returns an unmodified copy for every kind.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mnl.numerics import RngStream

NOISE_KINDS = ("gaussian", "salt", "mask", "snr")
GAUSS_STD_PER_EPS = 0.1
FRACTION_PER_EPS = 0.05
SNR_BASE_DB = 20.0
SNR_DB_PER_EPS = 2.0

_MNLD_MAGIC = b"MNLD"
_MNLD_VERSION = 1


@dataclass
class MultimodalBatch:
    X: list[np.ndarray]
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = [np.ascontiguousarray(x, dtype=np.float64) for x in self.X]
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) < 2:
            raise ValueError("a multimodal batch needs at least 2 modalities")
        n = len(self.y)
        for m, x in enumerate(self.X):
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"modality {m} has shape {x.shape}, expected ({n}, d)")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")

    @property
    def n_modalities(self) -> int:
        return len(self.X)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.X)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "MultimodalBatch":
        return MultimodalBatch([x[idx] for x in self.X], self.y[idx], self.n_classes)

    def with_modality(self, m: int, Xm: np.ndarray) -> "MultimodalBatch":
        X = list(self.X)
        X[m] = Xm
        return MultimodalBatch(X, self.y.copy(), self.n_classes)


@dataclass
class SynthConfig:
    n_classes: int = 4
    dims: tuple[int, ...] = (16, 16)
    separations: tuple[float, ...] = (3.0, 0.8)
    sigma: float = 1.0
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.separations = tuple(float(s) for s in self.separations)
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if len(self.dims) < 2 or len(self.dims) != len(self.separations):
            raise ValueError("dims and separations need one entry per modality (>= 2)")
        if any(d < self.n_classes for d in self.dims):
            raise ValueError("each modality dimension must be >= n_classes")
        if any(s < 0 for s in self.separations):
            raise ValueError("separations must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("sample counts must be >= 0")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    eps: float
    modality: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("noise degree must be >= 0")


def class_means(n_classes: int, dim: int, separation: float, rng: RngStream) -> np.ndarray:
    """Class means on a randomly rotated regular simplex with pairwise distance ``separation``."""
    Q, _ = np.linalg.qr(rng.normal(size=(dim, n_classes)))
    return (separation / np.sqrt(2.0)) * Q.T


def gen_synthetic(cfg: SynthConfig, rng: RngStream | None = None):
    """Draw (train, val, test) batches from class-conditional Gaussians."""
    if rng is None:
        rng = RngStream(cfg.seed)
    n = cfg.n_train + cfg.n_val + cfg.n_test
    y = rng.child("labels").integers(0, cfg.n_classes, size=n)
    X = []
    for m, (d, s) in enumerate(zip(cfg.dims, cfg.separations)):
        r = rng.child(f"modality-{m}")
        mu = class_means(cfg.n_classes, d, s, r)
        X.append(mu[y] + cfg.sigma * r.normal(size=(n, d)))
    full = MultimodalBatch(X, y, cfg.n_classes)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return full.subset(slice(0, a)), full.subset(slice(a, b)), full.subset(slice(b, n))


def add_gaussian_noise(X, eps: float, rng: RngStream) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return X.copy()
    return X + rng.normal(0.0, GAUSS_STD_PER_EPS * eps, size=X.shape)


def _replace_fraction(X, eps, rng, values) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    out = X.copy()
    if eps == 0 or X.size == 0:
        return out
    frac = min(FRACTION_PER_EPS * eps, 1.0)
    k = int(round(frac * X.size))
    flat_idx = rng.choice(X.size, size=k, replace=False)
    rows, cols = np.unravel_index(flat_idx, X.shape)
    out[rows, cols] = values[cols] if np.ndim(values) else values
    return out


def add_salt_noise(X, eps: float, rng: RngStream) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    colmax = X.max(axis=0) if X.size else np.zeros(X.shape[1])
    return _replace_fraction(X, eps, rng, colmax)


def add_mask_noise(X, eps: float, rng: RngStream) -> np.ndarray:
    return _replace_fraction(X, eps, rng, 0.0)


def add_snr_noise_db(X, snr_db: float, rng: RngStream) -> np.ndarray:
    """Additive Gaussian noise at a per-row signal-to-noise ratio (dB)."""
    X = np.asarray(X, dtype=np.float64)
    power = np.mean(X**2, axis=1, keepdims=True)
    if np.any(power == 0):
        raise ValueError("cannot set an SNR on an all-zero row")
    std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return X + std * rng.normal(size=X.shape)


def add_snr_noise(X, eps: float, rng: RngStream) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return np.array(X, dtype=np.float64, copy=True)
    return add_snr_noise_db(X, SNR_BASE_DB - SNR_DB_PER_EPS * eps, rng)


INJECTORS = {
    "gaussian": add_gaussian_noise,
    "salt": add_salt_noise,
    "mask": add_mask_noise,
    "snr": add_snr_noise,
}


def apply_noise(batch: MultimodalBatch, spec: NoiseSpec, rng: RngStream) -> MultimodalBatch:
    """Return a noised copy of ``batch``; only ``spec.modality`` is touched."""
    if not 0 <= spec.modality < batch.n_modalities:
        raise ValueError(f"modality {spec.modality} out of range")
    noisy = INJECTORS[spec.kind](batch.X[spec.modality], spec.eps, rng)
    return batch.with_modality(spec.modality, noisy)


# -- containers ---------------------------------------------------------------


def save_batch(batch: MultimodalBatch, path) -> None:
    M = batch.n_modalities
    header = _MNLD_MAGIC + struct.pack(
        f"<IIII{M}I", _MNLD_VERSION, M, batch.n_classes, len(batch), *batch.dims
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for x in batch.X:
            fh.write(x.astype("<f8").tobytes(order="C"))
        fh.write(batch.y.astype("<u4").tobytes())


def load_batch(path) -> MultimodalBatch:
    buf = Path(path).read_bytes()
    if buf[:4] != _MNLD_MAGIC:
        raise ValueError(f"{path}: not an MNLD file")
    version, M, C, rows = struct.unpack_from("<IIII", buf, 4)
    if version != _MNLD_VERSION:
        raise ValueError(f"{path}: unsupported MNLD version {version}")
    off = 20
    dims = struct.unpack_from(f"<{M}I", buf, off)
    off += 4 * M
    X = []
    for d in dims:
        n = rows * d
        X.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(rows, d).astype(np.float64))
        off += 8 * n
    y = np.frombuffer(buf, dtype="<u4", count=rows, offset=off).astype(np.int64)
    if off + 4 * rows != len(buf):
        raise ValueError(f"{path}: trailing or missing bytes")
    return MultimodalBatch(X, y, C)


def export_csv(batch: MultimodalBatch, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, x in enumerate(batch.X):
        p = directory / f"modality{m}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{k}" for k in range(x.shape[1])])
            w.writerows([[repr(float(v)) for v in row] for row in x])
        paths.append(p)
    p = directory / "labels.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"])
        w.writerows([[int(v)] for v in batch.y])
    paths.append(p)
    return paths
