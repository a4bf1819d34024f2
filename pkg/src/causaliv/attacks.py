"""L∞-bounded attacks and robust-accuracy measurement.

All attacks run the model in inference mode with parameter gradients
disabled, project onto the ε-ball around the clean input after every step,
and clip to the pixel range, so the output constraints hold exactly by
construction.  Attacks are pure functions of (model, batch, seed).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, nll_loss
from .models import ImageBatch, SplitClassifier
from .seeding import derive_rng, derive_seed

PIXEL_EPS_DEFAULT = 8.0 / 255.0


@dataclass(frozen=True)
class PerturbationBudget:
    """L∞ radius in pixel units plus the iteration recipe.

    eps_max = 0 is admitted so the zero-budget identity property is
    expressible; every attack then returns the input unchanged.
    """

    eps_max: float = PIXEL_EPS_DEFAULT
    steps: int = 1
    step_size: float | None = None
    random_start: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eps_max < 1.0:
            raise ValueError(f"eps_max must lie in [0, 1), got {self.eps_max}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")


# paper-period defaults: evaluation PGD is 30 steps of 0.0023 with random
# start, training PGD is 10 steps of 0.0072, both at 8/255
EVAL_PGD = PerturbationBudget(PIXEL_EPS_DEFAULT, steps=30, step_size=0.0023, random_start=True)
TRAIN_PGD = PerturbationBudget(PIXEL_EPS_DEFAULT, steps=10, step_size=0.0072, random_start=True)
CW_ITERS_DEFAULT = 100


class AttackGradientError(RuntimeError):
    pass


@contextmanager
def _inference_attack_mode(model: SplitClassifier):
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    model.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad = flag
        model.train(was_training)


def _input_gradient(model, images, labels, loss_fn):
    x = Tensor(images, requires_grad=True)
    loss_fn(model.forward(x), labels).backward()
    grad = x.grad
    bad = ~np.all(np.isfinite(grad.reshape(grad.shape[0], -1)), axis=1)
    if bad.any():
        raise AttackGradientError(f"non-finite input gradient at sample index {int(np.argmax(bad))}")
    return grad


def fgsm(model: SplitClassifier, batch: ImageBatch, budget: PerturbationBudget) -> ImageBatch:
    """Single signed-gradient step on cross-entropy."""
    with _inference_attack_mode(model):
        grad = _input_gradient(model, batch.images, batch.labels, nll_loss)
    adv = np.clip(batch.images + budget.eps_max * np.sign(grad), 0.0, 1.0)
    return ImageBatch(adv.astype(np.float32), batch.labels)


def pgd(model: SplitClassifier, batch: ImageBatch, budget: PerturbationBudget, seed: int = 0) -> ImageBatch:
    """Iterated signed-gradient ascent on cross-entropy with per-step
    projection onto the ε-ball and pixel range."""
    x0 = batch.images
    eps = budget.eps_max
    step = budget.step_size if budget.step_size is not None else eps / max(budget.steps, 1)
    x = x0.copy()
    if budget.random_start and eps > 0:
        rng = derive_rng(seed, "pgd-start")
        x = np.clip(x0 + rng.uniform(-eps, eps, size=x0.shape).astype(np.float32), 0.0, 1.0)
    with _inference_attack_mode(model):
        for _ in range(budget.steps):
            grad = _input_gradient(model, x, batch.labels, nll_loss)
            x = x + step * np.sign(grad)
            x = np.clip(x, x0 - eps, x0 + eps)
            x = np.clip(x, 0.0, 1.0)
    return ImageBatch(x.astype(np.float32), batch.labels)


def _cw_margin_loss(logp: Tensor, labels: np.ndarray, kappa: float) -> Tensor:
    n, k = logp.shape
    true_lp = logp[np.arange(n), labels]
    exclude = np.zeros((n, k), dtype=logp.data.dtype)
    exclude[np.arange(n), labels] = -1e9
    best_other = (logp + exclude).max(axis=1)
    return (true_lp - best_other).maximum(-kappa).sum()


def cw_linf(
    model: SplitClassifier,
    batch: ImageBatch,
    budget: PerturbationBudget,
    kappa: float = 0.0,
    iters: int = CW_ITERS_DEFAULT,
) -> ImageBatch:
    """Projected signed-gradient descent on the margin objective
    max(z_true - max_{k != true} z_k, -kappa); clamped samples stop moving."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    x0 = batch.images
    eps = budget.eps_max
    step = eps / 10.0
    x = x0.copy()
    with _inference_attack_mode(model):
        for _ in range(iters):
            x_t = Tensor(x, requires_grad=True)
            _cw_margin_loss(model.forward(x_t), batch.labels, kappa).backward()
            grad = x_t.grad
            bad = ~np.all(np.isfinite(grad.reshape(grad.shape[0], -1)), axis=1)
            if bad.any():
                raise AttackGradientError(
                    f"non-finite input gradient at sample index {int(np.argmax(bad))}"
                )
            x = x - step * np.sign(grad)
            x = np.clip(x, x0 - eps, x0 + eps)
            x = np.clip(x, 0.0, 1.0)
    return ImageBatch(x.astype(np.float32), batch.labels)


ATTACK_NAMES = ("fgsm", "pgd", "cw")


def run_attack(name: str, model, batch, budget: PerturbationBudget | None = None, seed: int = 0) -> ImageBatch:
    if name == "fgsm":
        return fgsm(model, batch, budget or PerturbationBudget())
    if name == "pgd":
        return pgd(model, batch, budget or EVAL_PGD, seed=seed)
    if name == "cw":
        return cw_linf(model, batch, budget or PerturbationBudget())
    raise ValueError(f"unknown attack {name!r}; known: {ATTACK_NAMES}")


def accuracy(model: SplitClassifier, batch: ImageBatch, batch_size: int = 256) -> float:
    """Clean classification accuracy in percent."""
    correct = 0
    for start in range(0, batch.n, batch_size):
        sl = slice(start, start + batch_size)
        pred = model.predict(batch.images[sl])
        correct += int((pred == batch.labels[sl]).sum())
    return 100.0 * correct / batch.n


def evaluate_robustness(
    model: SplitClassifier,
    batch: ImageBatch,
    attacks=ATTACK_NAMES,
    budgets: dict | None = None,
    seed: int = 0,
    batch_size: int = 256,
) -> dict:
    """Natural plus per-attack accuracy (percent), deterministic given seed."""
    if batch.n == 0:
        raise ValueError("empty dataset")
    table = {"natural": accuracy(model, batch, batch_size)}
    for name in attacks:
        budget = (budgets or {}).get(name)
        correct = 0
        for bi, start in enumerate(range(0, batch.n, batch_size)):
            sub = batch.subset(slice(start, start + batch_size))
            adv = run_attack(name, model, sub, budget, seed=derive_seed(seed, "eval", name, bi))
            pred = model.predict(adv.images)
            correct += int((pred == sub.labels).sum())
        table[name] = 100.0 * correct / batch.n
    return table
