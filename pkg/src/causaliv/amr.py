"""Adversarial moment restriction: instrument construction, log-likelihood
residuals, the regularized zero-sum objective, and the alternating fit.

The instrument is the split-layer feature variation between adversarial and
natural inputs.  Residuals live in log-likelihood space: only the true-class
coordinate of the log target label is finite, so the residual reduces to the
negative log-probability of the true class under the causal edit.  The test
function is weighted by the counterfactual's own true-class negative
log-probability and penalized by the squared norm of the mean deviation
E[Z - g(Z)].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import TRAIN_PGD, PerturbationBudget, accuracy, pgd
from .autodiff import Tensor, no_grad
from .ivcore import DivergenceError, MomentEstimate, MOMENT_DIVERGENCE_LIMIT
from .models import FeatureMap, HypothesisModel, ImageBatch, SplitClassifier, TestFunction
from .nn import Adam
from .seeding import derive_seed

SIGN_CONVENTIONS = ("role-consistent", "paper-literal")


@dataclass
class AmrBatch:
    """Instrumented batch: everything derived from one frozen classifier."""

    x: ImageBatch
    x_adv: ImageBatch
    f_nat: FeatureMap
    f_adv: FeatureMap
    z: FeatureMap
    labels: np.ndarray


@dataclass
class AmrFitConfig:
    attack: PerturbationBudget = field(default_factory=lambda: TRAIN_PGD)
    lr_h: float = 1e-3
    lr_g: float = 1e-3
    lambda_reg: float = 1.0
    g_steps_per_h: int = 1
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    sign_convention: str = "role-consistent"
    hidden: int | None = None  # hidden width for h (None = feature channel count)
    hidden_g: int | None = None  # hidden width for g (None = same as `hidden`)
    trace_subset: int = 128
    # per-batch multipliers on the attack budget; covering sub-budget
    # instruments keeps the hypothesis model honest on near-boundary
    # attacks that stop as soon as the label flips
    eps_schedule: tuple = (1.0, 1.0, 0.5, 0.25)

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")
        if self.sign_convention not in SIGN_CONVENTIONS:
            raise ValueError(f"sign_convention must be one of {SIGN_CONVENTIONS}")


def compute_instrument(model: SplitClassifier, x: ImageBatch, x_adv: ImageBatch) -> AmrBatch:
    """Z = f_l(x_adv) - f_l(x), with both feature maps cached."""
    if x.images.shape != x_adv.images.shape:
        raise ValueError(f"shape mismatch: {x.images.shape} vs {x_adv.images.shape}")
    f_nat = model.features(x.images)
    f_adv = model.features(x_adv.images)
    z = FeatureMap(f_adv.values - f_nat.values, f_nat.layer_id)
    return AmrBatch(x, x_adv, f_nat, f_adv, z, x.labels)


def log_likelihood_project(model: SplitClassifier, f_nat, edit) -> np.ndarray:
    """Log-probabilities of the head at F_natural + edit."""
    base = f_nat.values if isinstance(f_nat, FeatureMap) else np.asarray(f_nat)
    delta = edit.values if isinstance(edit, FeatureMap) else np.asarray(edit)
    if base.shape != delta.shape:
        raise ValueError(f"shape mismatch: {base.shape} vs {delta.shape}")
    return model.head_logp(base + delta)


def amr_residual(model: SplitClassifier, h: HypothesisModel, f_nat, t_prime, labels) -> np.ndarray:
    """Negative true-class log-probability of the causal edit h(t'),
    projected through the head at F_natural + h(t'); nonnegative."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.num_classes:
        raise ValueError("label out of range for the model's class count")
    t_vals = t_prime.values if isinstance(t_prime, FeatureMap) else np.asarray(t_prime)
    logp = log_likelihood_project(model, f_nat, h.apply(t_vals))
    return -logp[np.arange(len(labels)), labels]


def amr_moment(
    model: SplitClassifier,
    h: HypothesisModel,
    g: TestFunction,
    batch: AmrBatch,
    sign_convention: str = "role-consistent",
) -> MomentEstimate:
    """Mean of residual * test-function weight, plus the Eq.-style penalty
    |E[Z - g(Z)]|^2 reported in the regularizer field.

    Under the default role-consistent convention the weight is the
    counterfactual's negative true-class log-probability, making the moment
    nonnegative; 'paper-literal' keeps the raw log-probability (nonpositive
    weight)."""
    if sign_convention not in SIGN_CONVENTIONS:
        raise ValueError(f"sign_convention must be one of {SIGN_CONVENTIONS}")
    n = batch.labels.shape[0]
    t_prime = g.apply(batch.z.values)
    psi = amr_residual(model, h, batch.f_nat, t_prime, batch.labels)
    logp_cf = log_likelihood_project(model, batch.f_nat, t_prime)
    w = logp_cf[np.arange(n), batch.labels]
    if sign_convention == "role-consistent":
        w = -w
    value = float(np.mean(psi * w))
    mean_dev = np.mean(batch.z.values - t_prime, axis=0)
    reg = float(np.sum(mean_dev * mean_dev))
    if not np.isfinite(value):
        raise DivergenceError("non-finite moment value")
    return MomentEstimate(value, psi, reg, n)


def amr_objective_t(
    model: SplitClassifier,
    h: HypothesisModel,
    g: TestFunction,
    f_nat: Tensor,
    z: Tensor,
    labels: np.ndarray,
    lambda_reg: float,
    sign_convention: str = "role-consistent",
) -> tuple[Tensor, Tensor]:
    """Differentiable (moment value, regularizer) pair for the fit loop and
    the finite-difference gradient checks."""
    n = labels.shape[0]
    rows = np.arange(n)
    t_prime = g(z)
    logp_h = model.head_logp_t(f_nat + h(t_prime))
    psi = -logp_h[rows, labels]
    logp_g = model.head_logp_t(f_nat + t_prime)
    w = logp_g[rows, labels]
    if sign_convention == "role-consistent":
        w = -w
    value = (psi * w).mean()
    dev = (z - t_prime).mean(axis=0)
    reg = (dev * dev).sum()
    return value, reg


def fit_amr_gmm(
    model: SplitClassifier,
    dataset,
    cfg: AmrFitConfig,
) -> tuple[HypothesisModel, TestFunction, list[dict]]:
    """Alternating fit of (h, g) against a frozen classifier.

    Per batch: regenerate the instrument with the training attack, take
    `g_steps_per_h` ascent steps on value - lambda * penalty, then one descent
    step on value.  The per-epoch trace reports the moment, the penalty, and
    conjunction accuracies on a held-out subset.
    """
    from .analysis import conjunction_accuracies

    channels = model.feature_shape[0]
    h = HypothesisModel(channels, seed=derive_seed(cfg.seed, "hypothesis"), hidden=cfg.hidden)
    g = TestFunction(channels, seed=derive_seed(cfg.seed, "test-fn"), hidden=cfg.hidden_g or cfg.hidden)
    model.eval()
    model.requires_grad_(False)

    nat_acc = accuracy(model, dataset.test)
    chance = 100.0 / model.num_classes
    if nat_acc < 2 * chance:
        warnings.warn(
            f"classifier natural accuracy {nat_acc:.1f}% is below twice chance; "
            "the fit expects an adversarially pretrained model",
            stacklevel=2,
        )

    opt_h = Adam(h.parameters(), lr=cfg.lr_h, betas=(0.0, 0.999))
    opt_g = Adam(g.parameters(), lr=cfg.lr_g, betas=(0.0, 0.999))
    train = dataset.train
    n = train.n
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    trace: list[dict] = []

    # eval subset for the trace, attacked once per epoch with a fixed seed
    sub = ImageBatch(dataset.test.images[: cfg.trace_subset], dataset.test.labels[: cfg.trace_subset])

    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "amr-epoch", epoch)).permutation(n)
        epoch_value = 0.0
        epoch_reg = 0.0
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            batch = ImageBatch(train.images[idx], train.labels[idx])
            frac = cfg.eps_schedule[(epoch * steps_per_epoch + bi) % len(cfg.eps_schedule)]
            attack = cfg.attack
            if frac != 1.0:
                attack = PerturbationBudget(
                    cfg.attack.eps_max * frac,
                    cfg.attack.steps,
                    (cfg.attack.step_size or cfg.attack.eps_max) * frac,
                    cfg.attack.random_start,
                )
            adv = pgd(model, batch, attack, seed=derive_seed(cfg.seed, "amr-attack", epoch, bi))
            with no_grad():
                f_nat = model.features(batch.images).values
                f_adv = model.features(adv.images).values
            f_nat_t = Tensor(f_nat)
            z_t = Tensor(f_adv - f_nat)

            h.train()
            g.train()
            for _ in range(cfg.g_steps_per_h):
                value, reg = amr_objective_t(
                    model, h, g, f_nat_t, z_t, batch.labels, cfg.lambda_reg, cfg.sign_convention
                )
                g_obj = value - cfg.lambda_reg * reg
                opt_g.zero_grad()
                opt_h.zero_grad()
                (-g_obj).backward()
                opt_g.step()

            value, reg = amr_objective_t(
                model, h, g, f_nat_t, z_t, batch.labels, cfg.lambda_reg, cfg.sign_convention
            )
            v = float(value.data)
            if not np.isfinite(v) or abs(v) > MOMENT_DIVERGENCE_LIMIT:
                raise DivergenceError(f"moment value diverged at epoch {epoch}, batch {bi}: {v}")
            opt_h.zero_grad()
            opt_g.zero_grad()
            value.backward()
            opt_h.step()
            epoch_value += v
            epoch_reg += float(reg.data)

        h.eval()
        g.eval()
        adv_sub = pgd(model, sub, cfg.attack, seed=derive_seed(cfg.seed, "amr-trace"))
        accs = conjunction_accuracies(model, h, g, sub.images, adv_sub.images, sub.labels)
        trace.append(
            {
                "epoch": epoch,
                "moment": round(epoch_value / steps_per_epoch, 6),
                "regularizer": round(epoch_reg / steps_per_epoch, 6),
                **{f"acc_{k}": round(v, 4) for k, v in accs.items()},
            }
        )
    h.eval()
    g.eval()
    return h, g, trace
