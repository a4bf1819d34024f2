"""Dataset ingestion: procedural shapes for CI scale, CIFAR-style binaries
for desk scale.

The shapes generator draws one of {disk, square, triangle} per image on a
noisy colored background; class identity is carried by geometry only, colors
and positions are jittered.  The CIFAR-style reader consumes the classic
binary layout (per record: 1 label byte + 3072 channel-major pixel bytes) in
``data_batch_*.bin`` / ``test_batch.bin``, with optional per-file SHA-256
verification against a ``checksums.json`` manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ImageBatch
from .seeding import derive_rng

SHAPE_NAMES = ("disk", "square", "triangle")


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    train: ImageBatch
    test: ImageBatch
    num_classes: int
    spec: dict

    def batches(self, split: str, batch_size: int, seed: int, shuffle: bool = True):
        batch = self.train if split == "train" else self.test
        order = np.arange(batch.n)
        if shuffle:
            order = derive_rng(seed, "batch-order", split).permutation(batch.n)
        for start in range(0, batch.n, batch_size):
            idx = order[start : start + batch_size]
            yield ImageBatch(batch.images[idx], batch.labels[idx])


def _draw_shape_mask(kind: int, cx, cy, size, grid):
    xx, yy = grid
    if kind == 0:  # disk
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    if kind == 1:  # axis-aligned square, area-matched half-side
        half = size * 0.82
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= half
    # equilateral triangle, apex up
    v = np.array([[cx, cy - size], [cx - 0.9 * size, cy + 0.62 * size], [cx + 0.9 * size, cy + 0.62 * size]])
    mask = np.ones_like(xx, dtype=bool)
    for i in range(3):
        ax, ay = v[i]
        bx, by = v[(i + 1) % 3]
        cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        mask &= cross >= 0
    return mask


def generate_shapes(
    n: int,
    num_classes: int,
    seed: int,
    noise: float = 0.06,
    hw: int = 32,
    distractors: bool = True,
) -> ImageBatch:
    """Procedural K-class shape dataset; exactly balanced class counts.

    The label is carried by the large central shape.  With `distractors` a
    small off-center shape of a random class is added, so images contain
    partial evidence for other classes the way natural images do.
    """
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise DatasetError(f"shapes dataset supports 2..{len(SHAPE_NAMES)} classes, got {num_classes}")
    rng = derive_rng(seed, "shapes", n, num_classes)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    ys, xs = np.mgrid[0:hw, 0:hw].astype(np.float64)
    grid = (xs, ys)
    images = np.empty((n, 3, hw, hw), dtype=np.float32)
    for i in range(n):
        # colors are jittered but keep a luminance gap so geometry, not
        # palette, carries the class signal; the main shape is large so class
        # structure dominates the feature content
        if rng.uniform() < 0.5:
            bg = rng.uniform(0.7, 0.9, size=3)
            fg = rng.uniform(0.1, 0.35, size=3)
        else:
            bg = rng.uniform(0.1, 0.3, size=3)
            fg = rng.uniform(0.65, 0.9, size=3)
        cx, cy = rng.uniform(hw * 0.42, hw * 0.58, size=2)
        size = rng.uniform(hw * 0.22, hw * 0.32)
        mask = _draw_shape_mask(int(labels[i]), cx, cy, size, grid)
        img = np.empty((3, hw, hw))
        img[:] = bg[:, None, None]
        img[:, mask] = fg[:, None]
        if distractors:
            kind = int(rng.integers(num_classes))
            corner = rng.integers(4)
            dx = hw * (0.16 if corner % 2 == 0 else 0.84) + rng.uniform(-2, 2)
            dy = hw * (0.16 if corner // 2 == 0 else 0.84) + rng.uniform(-2, 2)
            dsize = rng.uniform(hw * 0.09, hw * 0.14)
            dmask = _draw_shape_mask(kind, dx, dy, dsize, grid)
            dcolor = 0.5 * (bg + fg) + rng.uniform(-0.1, 0.1, size=3)
            img[:, dmask] = dcolor[:, None]
        img += rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageBatch(images, labels)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size % 3073 != 0:
        raise DatasetError(f"{path.name}: size {raw.size} is not a whole number of records")
    records = raw.reshape(-1, 3073)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar_layout(root: Path, spec: dict) -> Dataset:
    train_files = spec.get("train_files") or [f"data_batch_{i}.bin" for i in range(1, 6)]
    test_files = spec.get("test_files") or ["test_batch.bin"]
    manifest = root / "checksums.json"
    checksums = json.loads(manifest.read_text()) if manifest.exists() else {}
    parts = {"train": ([], []), "test": ([], [])}
    for split, files in (("train", train_files), ("test", test_files)):
        for name in files:
            path = root / name
            if not path.exists():
                raise DatasetError(f"missing dataset file: {path}")
            if name in checksums:
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                if digest != checksums[name]:
                    raise DatasetError(f"checksum failure for {path}")
            images, labels = _read_cifar_file(path)
            parts[split][0].append(images)
            parts[split][1].append(labels)
    train = ImageBatch(np.concatenate(parts["train"][0]), np.concatenate(parts["train"][1]))
    test = ImageBatch(np.concatenate(parts["test"][0]), np.concatenate(parts["test"][1]))
    k = int(max(train.labels.max(), test.labels.max())) + 1
    return Dataset(train, test, k, dict(spec))


def load_dataset(spec) -> Dataset:
    """Load from a spec dict, or from a directory holding either a
    ``shapes.json`` generator spec or the CIFAR-style binary layout."""
    if isinstance(spec, (str, Path)):
        root = Path(spec)
        if (root / "shapes.json").exists():
            spec = json.loads((root / "shapes.json").read_text())
        elif any(root.glob("*.bin")):
            spec = {"kind": "cifar", "root": str(root)}
        else:
            raise DatasetError(f"{root}: no shapes.json and no CIFAR-style .bin files found")
    spec = dict(spec)
    kind = spec.get("kind", "shapes")
    if kind == "shapes":
        k = int(spec.get("k", 3))
        seed = int(spec.get("seed", 0))
        noise = float(spec.get("noise", 0.06))
        distractors = bool(spec.get("distractors", True))
        n_train = int(spec.get("n_train", 512))
        n_test = int(spec.get("n_test", 512))
        train = generate_shapes(n_train, k, derive_seed_split(seed, "train"), noise=noise, distractors=distractors)
        test = generate_shapes(n_test, k, derive_seed_split(seed, "test"), noise=noise, distractors=distractors)
        return Dataset(train, test, k, spec)
    if kind == "cifar":
        return _load_cifar_layout(Path(spec["root"]), spec)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def derive_seed_split(seed: int, split: str) -> int:
    from .seeding import derive_seed

    return derive_seed(seed, "dataset", split)
