"""Input-domain visualization of feature conjunctions via unconstrained
feature inversion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import _inference_attack_mode
from .autodiff import Tensor
from .models import FeatureMap, SplitClassifier
from .seeding import derive_rng


@dataclass
class VizConfig:
    steps: int = 200
    step_size: float = 0.05
    tv_weight: float = 1e-3
    init: str = "noise"  # noise | natural
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        if self.init not in ("noise", "natural"):
            raise ValueError("init must be 'noise' or 'natural'")


def _total_variation(x: Tensor) -> Tensor:
    dh = x[:, :, 1:, :] - x[:, :, :-1, :]
    dw = x[:, :, :, 1:] - x[:, :, :, :-1]
    return (dh * dh).sum() + (dw * dw).sum()


def invert_feature(
    model: SplitClassifier,
    target: FeatureMap | np.ndarray,
    cfg: VizConfig,
    natural: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Gradient descent on ‖f_l(x') - target‖² + tv·TV(x') over x' in [0,1].

    Returns the best iterate and the loss trace.
    """
    tvals = target.values if isinstance(target, FeatureMap) else np.asarray(target)
    if tvals.shape[1:] != model.feature_shape:
        raise ValueError(f"target shape {tvals.shape[1:]} != feature shape {model.feature_shape}")
    n = tvals.shape[0]
    rng = derive_rng(cfg.seed, "feature-viz")
    if cfg.init == "noise":
        x = rng.uniform(0.35, 0.65, size=(n, 3, 32, 32)).astype(np.float32)
    else:
        if natural is None:
            raise ValueError("init 'natural' needs the natural images")
        x = natural.astype(np.float32).copy()

    best = x.copy()
    best_loss = np.inf
    trace: list[float] = []
    with _inference_attack_mode(model):
        for _ in range(cfg.steps):
            sy = sx = 0
            if cfg.jitter:
                sy, sx = (int(v) for v in rng.integers(-cfg.jitter, cfg.jitter + 1, size=2))
            x_in = np.roll(x, (sy, sx), axis=(2, 3)) if cfg.jitter else x
            x_t = Tensor(x_in, requires_grad=True)
            feats = model.features_t(x_t)
            diff = feats - tvals
            loss = (diff * diff).sum() * (1.0 / n)
            if cfg.tv_weight:
                loss = loss + cfg.tv_weight * _total_variation(x_t)
            val = float(loss.data)
            if not np.isfinite(val):
                raise RuntimeError("non-finite visualization loss")
            trace.append(val)
            if val < best_loss:
                best_loss = val
                best = np.roll(x_in, (-sy, -sx), axis=(2, 3)) if cfg.jitter else x_in.copy()
            loss.backward()
            grad = np.roll(x_t.grad, (-sy, -sx), axis=(2, 3)) if cfg.jitter else x_t.grad
            x = np.clip(x - cfg.step_size * np.sign(grad), 0.0, 1.0).astype(np.float32)
    return best, trace


def render_panel(images: list[tuple[str, np.ndarray]], path) -> None:
    """Write a labeled grid image: one column per source, rows are samples."""
    if not images:
        raise ValueError("empty image list")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = len(images)
    rows = max(arr.shape[0] for _, arr in images)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for c, (title, arr) in enumerate(images):
        for r in range(rows):
            ax = axes[r][c]
            ax.axis("off")
            if r < arr.shape[0]:
                ax.imshow(np.clip(arr[r].transpose(1, 2, 0), 0, 1))
            if r == 0:
                ax.set_title(title, fontsize=10)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
