"""Projection of causal features back to the input domain.

Finds an L∞-bounded pixel perturbation whose prediction matches the
prediction of the causal features, by projected signed-gradient descent on
the KL divergence from the fixed causal-feature distribution.  Results are
stored in an archive keyed by sample id for consumption during defense
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import PIXEL_EPS_DEFAULT as PIXEL_GAMMA_DEFAULT
from .attacks import _inference_attack_mode
from .autodiff import Tensor, kl_divergence, no_grad
from .models import HypothesisModel, ImageBatch, SplitClassifier
from .seeding import derive_rng, derive_seed

KL_SMOOTHING = 1e-12
EARLY_STOP_KL = 1e-4


@dataclass
class CausalInversionResult:
    x_causal: np.ndarray
    delta: np.ndarray
    kl_initial: np.ndarray
    kl_final: np.ndarray
    steps_used: int


def _per_sample_kl(p: np.ndarray, logq: np.ndarray) -> np.ndarray:
    logp = np.log(np.maximum(p, KL_SMOOTHING))
    return np.sum(p * (logp - logq), axis=1)


def causal_feature_distribution(
    model: SplitClassifier, h: HypothesisModel, x: np.ndarray, x_adv: np.ndarray
) -> np.ndarray:
    """Probability the head assigns to F_natural + h(Z); the inversion target."""
    f_nat = model.features(x).values
    z = model.features(x_adv).values - f_nat
    fac = f_nat + h.apply(z)
    return np.exp(model.head_logp(fac))


def invert_causal(
    model: SplitClassifier,
    h: HypothesisModel,
    x: np.ndarray,
    x_adv: np.ndarray,
    gamma: float,
    steps: int = 30,
    step_size: float | None = None,
    init: str = "zero",
    jitter: int = 0,
    seed: int = 0,
) -> CausalInversionResult:
    """Minimize KL(causal prediction || prediction at x + δ) over ‖δ‖∞ ≤ γ.

    The best-so-far iterate is kept per sample, so kl_final ≤ kl_initial
    holds by construction; samples below EARLY_STOP_KL stop moving.  With
    `jitter` > 0 each gradient step is taken under a random circular pixel
    shift, which favors perturbations that other networks can also read
    instead of weight-specific noise.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if init not in ("zero", "adv"):
        raise ValueError(f"init must be 'zero' or 'adv', got {init!r}")
    target = causal_feature_distribution(model, h, x, x_adv)
    start = x.copy() if init == "zero" else np.clip(x_adv, x - gamma, x + gamma).copy()
    return project_distribution(model, target, x, start, gamma, steps, step_size, jitter, seed)


def project_distribution(
    model: SplitClassifier,
    target: np.ndarray,
    x: np.ndarray,
    start: np.ndarray,
    gamma: float,
    steps: int,
    step_size: float | None = None,
    jitter: int = 0,
    seed: int = 0,
) -> CausalInversionResult:
    """Core projected descent on KL(target || model(x + δ)) with ‖δ‖∞ ≤ γ."""
    step = step_size if step_size is not None else gamma / 10.0
    rng = derive_rng(seed, "inversion-jitter")
    cur = start.copy()
    with no_grad():
        kl_initial = _per_sample_kl(target, model.head_logp(model.features(cur)))
    best_kl = kl_initial.copy()
    best_x = cur.copy()
    steps_used = 0

    with _inference_attack_mode(model):
        for it in range(steps):
            sy = sx = 0
            if jitter:
                sy, sx = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
                x_t = Tensor(np.roll(cur, (sy, sx), axis=(2, 3)), requires_grad=True)
            else:
                x_t = Tensor(cur, requires_grad=True)
            logq_t = model.forward(x_t)
            if it > 0 and not jitter:
                # unshifted forward doubles as the candidate evaluation
                kl_now = _per_sample_kl(target, logq_t.data)
                improved = kl_now < best_kl
                best_kl = np.where(improved, kl_now, best_kl)
                best_x[improved] = cur[improved]
            active = best_kl > EARLY_STOP_KL
            if not active.any():
                break
            steps_used += 1
            kl_divergence(target, logq_t).backward()
            grad = np.roll(x_t.grad, (-sy, -sx), axis=(2, 3)) if jitter else x_t.grad
            cur = cur - step * np.sign(grad) * active[:, None, None, None]
            cur = np.clip(cur, x - gamma, x + gamma)
            cur = np.clip(cur, 0.0, 1.0).astype(np.float32)

    # score the final iterate
    with no_grad():
        kl_now = _per_sample_kl(target, model.head_logp(model.features(cur)))
    improved = kl_now < best_kl
    best_kl = np.where(improved, kl_now, best_kl)
    best_x[improved] = cur[improved]

    return CausalInversionResult(best_x, best_x - x, kl_initial, best_kl, steps_used)


@dataclass
class InversionArchive:
    """Inverted images, their stats, and the causal target distributions,
    keyed by sample id (training-set index)."""

    ids: np.ndarray
    x_causal: np.ndarray
    delta: np.ndarray
    kl_initial: np.ndarray
    kl_final: np.ndarray
    targets: np.ndarray  # per-sample causal prediction of the frozen teacher
    meta: dict

    def __post_init__(self):
        self._index = {int(i): pos for pos, i in enumerate(self.ids)}

    def missing(self, ids) -> list[int]:
        return [int(i) for i in ids if int(i) not in self._index]

    def rows(self, ids) -> list[int]:
        missing = self.missing(ids)
        if missing:
            raise KeyError(f"inversion archive is missing sample ids {missing[:8]}")
        return [self._index[int(i)] for i in ids]

    def take(self, ids) -> np.ndarray:
        return self.x_causal[self.rows(ids)]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            ids=self.ids,
            x_causal=self.x_causal,
            delta=self.delta,
            kl_initial=self.kl_initial,
            kl_final=self.kl_final,
            targets=self.targets,
            meta=np.frombuffer(json.dumps(self.meta, sort_keys=True).encode(), dtype=np.uint8),
        )

    @classmethod
    def load(cls, path) -> "InversionArchive":
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["meta"]).decode()) if "meta" in z else {}
            return cls(
                z["ids"], z["x_causal"], z["delta"], z["kl_initial"], z["kl_final"],
                z["targets"], meta,
            )


def build_inversion_archive(
    model: SplitClassifier,
    h: HypothesisModel,
    batch: ImageBatch,
    attack_fn,
    gamma: float,
    steps: int = 30,
    batch_size: int = 128,
    jitter: int = 0,
    seed: int = 0,
    meta: dict | None = None,
) -> InversionArchive:
    """Invert a whole dataset split; `attack_fn(sub_batch, index) -> ImageBatch`
    supplies the adversarial examples the instrument is computed from."""
    parts = []
    targets = []
    for bi, start in enumerate(range(0, batch.n, batch_size)):
        sub = batch.subset(slice(start, start + batch_size))
        adv = attack_fn(sub, bi)
        targets.append(causal_feature_distribution(model, h, sub.images, adv.images))
        parts.append(
            invert_causal(model, h, sub.images, adv.images, gamma, steps=steps,
                          jitter=jitter, seed=derive_seed(seed, "invert", bi))
        )
    ids = np.arange(batch.n, dtype=np.int64)
    return InversionArchive(
        ids,
        np.concatenate([p.x_causal for p in parts]),
        np.concatenate([p.delta for p in parts]),
        np.concatenate([p.kl_initial for p in parts]),
        np.concatenate([p.kl_final for p in parts]),
        np.concatenate(targets),
        dict(meta or {}, gamma=gamma, steps=steps),
    )


def refresh_archive(
    student: SplitClassifier,
    archive: InversionArchive,
    images: np.ndarray,
    steps: int | None = None,
    batch_size: int = 128,
    seed: int = 0,
) -> InversionArchive:
    """Re-solve the inversions against a (partially trained) consumer model.

    The causal target distributions stay those of the frozen teacher pair;
    only the carrier perturbation is re-fit so the consumer can read it.
    """
    gamma = float(archive.meta.get("gamma", PIXEL_GAMMA_DEFAULT))
    steps = steps if steps is not None else int(archive.meta.get("steps", 30))
    parts = []
    for bi, start in enumerate(range(0, len(images), batch_size)):
        sl = slice(start, start + batch_size)
        x = images[sl]
        target = archive.targets[sl]
        parts.append(
            project_distribution(student, target, x, x.copy(), gamma, steps,
                                 seed=derive_seed(seed, "refresh", bi))
        )
    return InversionArchive(
        archive.ids,
        np.concatenate([p.x_causal for p in parts]),
        np.concatenate([p.delta for p in parts]),
        np.concatenate([p.kl_initial for p in parts]),
        np.concatenate([p.kl_final for p in parts]),
        archive.targets,
        dict(archive.meta, refreshed=True),
    )
