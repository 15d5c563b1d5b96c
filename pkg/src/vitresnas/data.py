"""Datasets, the sub-train / sub-validation split and token-labeling
augmentation (patch-wise CutMix switched with Mixup)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "data.bin"
CIFAR_FORMAT = "cifar-binary"


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int


@dataclass
class LabeledBatch:
    images: np.ndarray  # [B, 3, H, W]
    image_labels: np.ndarray  # [B, classes], rows sum to 1
    patch_labels: np.ndarray | None  # [B, K, classes]
    labels: np.ndarray | None = None  # hard labels, for reporting only

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class AugConfig:
    cutmix_enabled: bool = True
    mixup_enabled: bool = True
    switch_prob: float = 0.5
    mixup_beta: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ContractError("switch_prob must lie in [0, 1]")
        if self.mixup_beta <= 0:
            raise ContractError("mixup_beta must be positive")


def one_hot(label: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float64)
    y[label] = 1.0
    return y


# --- token labeling -------------------------------------------------------------


def _patch_side(k: int) -> int:
    s = math.isqrt(k)
    if s * s != k:
        raise ContractError(f"K={k} is not a perfect square")
    return s


def split_patches(image: np.ndarray, k: int) -> np.ndarray:
    """[C, H, W] -> [K, C, H/s, W/s] row-major patches (s = sqrt(K))."""
    s = _patch_side(k)
    c, h, w = image.shape
    if h % s or w % s:
        raise ContractError(f"image {h}x{w} does not split into a {s}x{s} patch grid")
    ph, pw = h // s, w // s
    return image.reshape(c, s, ph, s, pw).transpose(1, 3, 0, 2, 4).reshape(k, c, ph, pw)


def merge_patches(patches: np.ndarray) -> np.ndarray:
    k, c, ph, pw = patches.shape
    s = _patch_side(k)
    return patches.reshape(s, s, c, ph, pw).transpose(2, 0, 3, 1, 4).reshape(c, s * ph, s * pw)


def patchwise_cutmix(s1: Sample, s2: Sample, k: int, rng: np.random.Generator, num_classes: int, mask=None):
    """Compose an image patch by patch from two samples.

    Returns (image, image_label, patch_labels, lam) with lam = mean(mask).
    """
    _patch_side(k)
    m = rng.integers(0, 2, size=k).astype(bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != (k,):
        raise ContractError(f"mask must have {k} entries")
    p1, p2 = split_patches(s1.image, k), split_patches(s2.image, k)
    image = merge_patches(np.where(m[:, None, None, None], p1, p2))
    y1, y2 = one_hot(s1.label, num_classes), one_hot(s2.label, num_classes)
    lam = int(m.sum()) / k
    patch_labels = np.where(m[:, None], y1[None, :], y2[None, :])
    return image, lam * y1 + (1.0 - lam) * y2, patch_labels, lam


def mixup_tokens(s1: Sample, s2: Sample, lam: float, k: int, num_classes: int):
    """Pixel-wise blend; every patch receives the blended image label."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda {lam} outside [0, 1]")
    image = (lam * s1.image + (1.0 - lam) * s2.image).astype(s1.image.dtype)
    label = lam * one_hot(s1.label, num_classes) + (1.0 - lam) * one_hot(s2.label, num_classes)
    return image, label, np.repeat(label[None, :], k, axis=0), lam


def switch_augment(s1: Sample, s2: Sample, cfg: AugConfig, rng: np.random.Generator, k: int, num_classes: int):
    """Choose patch-wise CutMix with probability ``switch_prob``, else Mixup.

    Returns (image, image_label, patch_labels, branch) with branch in
    {"cutmix", "mixup", "none"}.
    """
    use_cutmix = cfg.cutmix_enabled and (not cfg.mixup_enabled or rng.random() < cfg.switch_prob)
    if use_cutmix:
        img, y, py, _ = patchwise_cutmix(s1, s2, k, rng, num_classes)
        return img, y, py, "cutmix"
    if cfg.mixup_enabled:
        lam = float(rng.beta(cfg.mixup_beta, cfg.mixup_beta))
        img, y, py, _ = mixup_tokens(s1, s2, lam, k, num_classes)
        return img, y, py, "mixup"
    y = one_hot(s1.label, num_classes)
    return s1.image, y, np.repeat(y[None, :], k, axis=0), "none"


def element_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (epoch, example) so workers can split a batch freely."""
    return np.random.default_rng([seed, epoch, index, 0xA5])


def make_batch(
    samples: Sequence[Sample],
    indices: Sequence[int],
    cfg: AugConfig | None,
    k: int,
    num_classes: int,
    seed: int,
    epoch: int,
) -> LabeledBatch:
    """Assemble a token-labeled batch; each element is paired with a random
    partner from the dataset."""
    imgs, ys, pys = [], [], []
    for i in indices:
        s1 = samples[i]
        if cfg is None:
            y = one_hot(s1.label, num_classes)
            imgs.append(s1.image)
            ys.append(y)
            pys.append(np.repeat(y[None, :], k, axis=0))
            continue
        r = element_rng(seed, epoch, i)
        s2 = samples[int(r.integers(len(samples)))]
        img, y, py, _ = switch_augment(s1, s2, cfg, r, k, num_classes)
        imgs.append(img)
        ys.append(y)
        pys.append(py)
    return LabeledBatch(
        np.stack(imgs).astype(np.float32),
        np.stack(ys),
        np.stack(pys),
        np.array([samples[i].label for i in indices]),
    )


# --- datasets -------------------------------------------------------------------------


def synthetic_dataset(num_classes: int = 10, count: int = 100, size: int = 56, seed: int = 0) -> list[Sample]:
    """Class-dependent Gaussian blobs on noise; labels are balanced
    (``count // num_classes`` per class, remainder to the first classes)."""
    rng = np.random.default_rng(seed)
    proto = np.random.default_rng([seed, 1])
    centers = proto.uniform(0.25, 0.75, size=(num_classes, 2)) * size
    colors = proto.uniform(0.2, 1.0, size=(num_classes, 3))
    widths = proto.uniform(0.08, 0.2, size=num_classes) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.arange(count) % num_classes
    out = []
    for lab in labels:
        cy, cx = centers[lab] + rng.normal(0, 0.05 * size, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[lab] ** 2))
        img = colors[lab][:, None, None] * blob[None] + rng.normal(0, 0.08, size=(3, size, size))
        img = np.clip(img, 0.0, 1.0)
        # quantize so the binary record format round-trips exactly
        img = np.round(img * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)
        out.append(Sample(img, int(lab)))
    return out


def write_dataset(path: str | Path, samples: Sequence[Sample], num_classes: int) -> Path:
    """Write CIFAR-style records (1 label byte + 3*H*W bytes) plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ContractError("cannot write an empty dataset")
    _, h, w = samples[0].image.shape
    if num_classes > 256:
        raise ContractError("the binary record format stores labels in one byte")
    with open(path / RECORDS_NAME, "wb") as f:
        for s in samples:
            if s.image.shape != (3, h, w):
                raise ContractError("all images must share one shape")
            f.write(bytes([s.label]))
            f.write(np.round(np.clip(s.image, 0, 1) * 255.0).astype(np.uint8).tobytes())
    manifest = {"format": CIFAR_FORMAT, "height": h, "width": w, "num_classes": num_classes, "count": len(samples)}
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        m = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as e:
        raise FormatError(f"no {MANIFEST_NAME} in {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest in {path}: {e}") from e
    for key in ("format", "height", "width", "num_classes", "count"):
        if key not in m:
            raise FormatError(f"manifest is missing {key!r}")
    return m


def load_dataset(path: str | Path | None, format: str = CIFAR_FORMAT, **synthetic) -> list[Sample]:
    """Read a record directory, or generate a synthetic set when
    ``format == "synthetic"`` (keyword arguments go to the generator)."""
    if format == "synthetic":
        return synthetic_dataset(**synthetic)
    if format != CIFAR_FORMAT:
        raise FormatError(f"unsupported dataset format {format!r}")
    m = read_manifest(path)
    if m["format"] != CIFAR_FORMAT:
        raise FormatError(f"manifest declares format {m['format']!r}")
    h, w, n = int(m["height"]), int(m["width"]), int(m["count"])
    rec = 1 + 3 * h * w
    raw = (Path(path) / RECORDS_NAME).read_bytes()
    if len(raw) % rec:
        off = (len(raw) // rec) * rec
        raise FormatError(f"truncated record at byte offset {off}: {len(raw) - off} of {rec} bytes")
    if len(raw) // rec != n:
        raise FormatError(f"manifest count {n} but file holds {len(raw) // rec} records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    labels = arr[:, 0]
    if np.any(labels >= int(m["num_classes"])):
        bad = int(np.argmax(labels >= int(m["num_classes"])))
        raise FormatError(f"label {labels[bad]} out of range at byte offset {bad * rec}")
    images = arr[:, 1:].reshape(n, 3, h, w).astype(np.float32) / np.float32(255.0)
    return [Sample(images[i], int(labels[i])) for i in range(n)]


def split_indices(samples: Sequence[Sample], per_class_val: int, seed: int = 0) -> tuple[list[int], list[int]]:
    """Hold out exactly ``per_class_val`` indices of every class by seeded shuffle."""
    labels = np.array([s.label for s in samples])
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) <= per_class_val:
            raise ContractError(f"class {c} has {len(idx)} samples, needs more than {per_class_val}")
        val.extend(rng.permutation(idx)[:per_class_val].tolist())
    held = set(val)
    return [i for i in range(len(samples)) if i not in held], sorted(val)


def subtrain_subval_split(samples: Sequence[Sample], per_class_val: int, seed: int = 0):
    """(subtrain, subval) sample lists; both keep the original order."""
    train_idx, val_idx = split_indices(samples, per_class_val, seed)
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]
