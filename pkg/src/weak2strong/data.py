"""Synthetic datasets and the CIFAR-10 binary reader."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None

    def __len__(self):
        return len(self.X)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.X).tobytes())
        h.update(str(self.X.shape).encode())
        if self.y is not None:
            h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], None if self.y is None else self.y[idx])


def gaussian_mixture_classes(n_samples: int = 10_000, n_classes: int = 10, dim: int = 16,
                             clusters_per_class: int = 3, separation: float = 3.0,
                             cluster_std: float = 1.0, label_noise: float = 0.0,
                             seed: int = 0, centers_seed: int | None = None) -> Dataset:
    """Classes made of several isotropic Gaussian clusters each.

    Labels are drawn with uniform priors. ``centers_seed`` fixes the cluster
    geometry independently of the sampling seed so train and validation
    splits share the same underlying task.
    """
    if n_samples <= 0 or n_classes < 2 or dim <= 0 or clusters_per_class <= 0:
        raise ValueError("invalid mixture parameters")
    if separation < 0 or cluster_std <= 0 or not 0 <= label_noise < 1:
        raise ValueError("invalid mixture parameters")
    geo = np.random.default_rng(seed if centers_seed is None else centers_seed)
    centers = geo.normal(size=(n_classes, clusters_per_class, dim))
    centers *= separation / np.sqrt(dim)
    rng = np.random.default_rng([seed, 1])
    y = rng.integers(0, n_classes, size=n_samples)
    k = rng.integers(0, clusters_per_class, size=n_samples)
    X = centers[y, k] + cluster_std / np.sqrt(dim) * rng.normal(size=(n_samples, dim))
    if label_noise:
        flip = rng.random(n_samples) < label_noise
        y = np.where(flip, rng.integers(0, n_classes, size=n_samples), y)
    return Dataset(X, y.astype(np.int64))


def swirl_2d(n_samples: int = 4000, noise: float = 0.05, turns: float = 1.5, seed: int = 0) -> Dataset:
    """Points on a noisy 2-D spiral, roughly unit scale."""
    if n_samples <= 0 or noise < 0 or turns <= 0:
        raise ValueError("invalid swirl parameters")
    rng = np.random.default_rng(seed)
    theta = np.sqrt(rng.random(n_samples)) * turns * 2 * np.pi
    r = theta / (turns * 2 * np.pi)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts = pts + noise * rng.normal(size=pts.shape)
    return Dataset(pts / pts.std())


def synthetic_anchors(n_anchors: int = 512, n_classes: int = 8, disagreement: float = 0.5,
                      background_fraction: float = 0.7, seed: int = 0) -> dict:
    """Paired teacher/student detection-head outputs.

    Background anchors get uniformly low teacher logits; the rest have one
    confident class. Student outputs are teacher outputs plus Gaussian noise
    of scale ``disagreement``.
    """
    if n_anchors <= 0 or n_classes < 2 or disagreement < 0 or not 0 <= background_fraction <= 1:
        raise ValueError("invalid anchor parameters")
    rng = np.random.default_rng(seed)
    t_cls = rng.normal(-4.0, 1.0, size=(n_anchors, n_classes))
    fg = rng.random(n_anchors) >= background_fraction
    cls_idx = rng.integers(0, n_classes, size=n_anchors)
    t_cls[fg, cls_idx[fg]] = rng.normal(1.5, 1.0, size=int(fg.sum()))
    t_box = rng.normal(0.0, 0.5, size=(n_anchors, 4))
    s_cls = t_cls + disagreement * rng.normal(size=t_cls.shape)
    s_box = t_box + disagreement * rng.normal(size=t_box.shape)
    return {"teacher_cls": t_cls, "teacher_box": t_box, "student_cls": s_cls,
            "student_box": s_box, "foreground": fg}


def synth_dataset(kind: str, seed: int = 0, **params):
    kinds = {
        "gaussian_mixture": gaussian_mixture_classes,
        "swirl": swirl_2d,
        "anchors": synthetic_anchors,
    }
    if kind not in kinds:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](seed=seed, **params)


def read_cifar10(path) -> Dataset:
    """Parse a CIFAR-10 binary batch into ``(n, 3, 32, 32)`` floats in [0, 1]."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0
    return Dataset(images, labels)


def write_cifar10(path, images_uint8: np.ndarray, labels: np.ndarray) -> Path:
    """Write records in the CIFAR-10 binary layout (label byte then R, G, B planes)."""
    images_uint8 = np.asarray(images_uint8)
    labels = np.asarray(labels)
    if images_uint8.dtype != np.uint8 or images_uint8.shape[1:] != CIFAR_SHAPE:
        raise ValueError("images must be uint8 with shape (n, 3, 32, 32)")
    if labels.shape != (images_uint8.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
        raise ValueError("labels must be a vector of integers in [0, 9]")
    records = np.empty((labels.size, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images_uint8.reshape(labels.size, -1)
    path = Path(path)
    records.tofile(path)
    return path


def read_cifar10_files(paths) -> Dataset:
    parts = [read_cifar10(p) for p in paths]
    return Dataset(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]))
