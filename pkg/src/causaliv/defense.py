"""Defense training with an optional causal-feature regularizer.

The trainer implements two baseline losses (plain adversarial cross-entropy
and the natural-CE + KL trade-off variant) and adds, when enabled, a KL term
pulling the prediction on adversarial examples toward the prediction on
causally inverted inputs.  A zero regularizer weight reproduces the baseline
trainer exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import TRAIN_PGD, PerturbationBudget, pgd
from .autodiff import Tensor, kl_divergence, nll_loss, no_grad
from .models import HypothesisModel, ImageBatch, SplitClassifier
from .nn import SGD
from .seeding import derive_seed

DEFENSE_KINDS = ("adv", "trades")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class DefenseConfig:
    defense_kind: str = "adv"
    trades_beta: float = 6.0
    cafe_weight: float = 0.0
    cafe_target: str = "off"  # inversion | direct | off
    attack: PerturbationBudget = field(default_factory=lambda: TRAIN_PGD)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cyclic"  # cyclic | constant
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    trace_subset: int = 256
    attack_warmup_epochs: int = 0  # ramp eps from 0 over the first epochs; 0 keeps the plain baseline
    archive_refresh_every: int = 0  # re-fit inversions against the training model every k epochs

    def __post_init__(self):
        if self.defense_kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.defense_kind!r}; known: {DEFENSE_KINDS}")
        if self.cafe_weight < 0:
            raise ValueError("cafe_weight must be nonnegative")
        if self.cafe_weight > 0 and self.cafe_target == "off":
            raise ValueError("cafe_weight > 0 requires cafe_target 'inversion' or 'direct'")


def defense_loss(kind: str, model: SplitClassifier, x: np.ndarray, x_adv: np.ndarray,
                 labels: np.ndarray, beta: float = 6.0) -> Tensor:
    """adv: CE on adversarial inputs; trades: natural CE + beta * KL(nat || adv)."""
    if kind == "adv":
        return nll_loss(model.forward(Tensor(x_adv)), labels)
    if kind == "trades":
        logp_nat = model.forward(Tensor(x))
        loss = nll_loss(logp_nat, labels)
        if beta:
            logp_adv = model.forward(Tensor(x_adv))
            p_nat = logp_nat.exp()
            n = x.shape[0]
            loss = loss + beta * ((p_nat * (logp_nat - logp_adv)).sum() * (1.0 / n))
        return loss
    raise ValueError(f"unknown defense kind {kind!r}; known: {DEFENSE_KINDS}")


def cafe_regularizer(model: SplitClassifier, x_causal: np.ndarray, x_adv: np.ndarray) -> Tensor:
    """KL between the model's causal-input prediction and its adversarial
    prediction; gradients reach the parameters through both terms."""
    logp_c = model.forward(Tensor(x_causal))
    logp_a = model.forward(Tensor(x_adv))
    p_c = logp_c.exp()
    n = x_causal.shape[0]
    return (p_c * (logp_c - logp_a)).sum() * (1.0 / n)


def direct_causal_target(frozen_model: SplitClassifier, h: HypothesisModel,
                         x: np.ndarray, x_adv: np.ndarray) -> np.ndarray:
    """Inversion-free variant: the frozen pair (f0, h) supplies the causal
    prediction used as distillation target."""
    f_nat = frozen_model.features(x).values
    z = frozen_model.features(x_adv).values - f_nat
    fac = f_nat + h.apply(z)
    return np.exp(frozen_model.head_logp(fac))


def _cyclic_lr(peak: float, step: int, total: int, warm_frac: float = 0.4) -> float:
    warm = max(1, int(total * warm_frac))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * max(0.0, 1.0 - (step - warm) / max(1, total - warm))


def train_defense(
    model: SplitClassifier,
    dataset,
    cfg: DefenseConfig,
    inversions=None,
    direct_teacher: tuple[SplitClassifier, HypothesisModel] | None = None,
) -> tuple[SplitClassifier, list[dict]]:
    """Train `model` in place; returns it with a per-epoch metrics trace.

    With cafe_weight > 0 and cafe_target 'inversion', `inversions` must cover
    every training-set id; with 'direct', `direct_teacher` supplies the frozen
    (classifier, hypothesis) pair.
    """
    train = dataset.train
    n = train.n
    if cfg.cafe_weight > 0 and cfg.cafe_target == "inversion":
        if inversions is None:
            raise ValueError("cafe_target 'inversion' needs an inversion archive")
        missing = inversions.missing(np.arange(n))
        if missing:
            raise KeyError(f"inversion archive does not cover training ids {missing[:8]}")
    if cfg.cafe_weight > 0 and cfg.cafe_target == "direct" and direct_teacher is None:
        raise ValueError("cafe_target 'direct' needs the frozen (model, hypothesis) teacher")

    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    trace: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        if (
            cfg.archive_refresh_every
            and cfg.cafe_weight > 0
            and cfg.cafe_target == "inversion"
            and epoch
            and epoch % cfg.archive_refresh_every == 0
        ):
            from .inversion import refresh_archive

            inversions = refresh_archive(
                model, inversions, train.images, seed=derive_seed(cfg.seed, "refresh", epoch)
            )
        order = np.random.default_rng(derive_seed(cfg.seed, "defense-epoch", epoch)).permutation(n)
        epoch_loss = 0.0
        attack = cfg.attack
        if cfg.attack_warmup_epochs and epoch < cfg.attack_warmup_epochs:
            ramp = (epoch + 1) / (cfg.attack_warmup_epochs + 1)
            attack = PerturbationBudget(
                cfg.attack.eps_max * ramp, cfg.attack.steps,
                (cfg.attack.step_size or cfg.attack.eps_max) * ramp, cfg.attack.random_start,
            )
        for bi in range(steps_per_epoch):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            batch = ImageBatch(train.images[idx], train.labels[idx])
            adv = pgd(model, batch, attack, seed=derive_seed(cfg.seed, "defense-attack", epoch, bi))

            if cfg.schedule == "cyclic":
                opt.lr = _cyclic_lr(cfg.lr, step, total_steps)
            model.train()
            loss = defense_loss(cfg.defense_kind, model, batch.images, adv.images,
                                batch.labels, beta=cfg.trades_beta)
            if cfg.cafe_weight > 0:
                if cfg.cafe_target == "inversion":
                    x_causal = inversions.take(idx)
                    reg = cafe_regularizer(model, x_causal, adv.images)
                else:
                    target = direct_causal_target(*direct_teacher, batch.images, adv.images)
                    reg = kl_divergence(target, model.forward(Tensor(adv.images)))
                loss = loss + cfg.cafe_weight * reg
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            step += 1
        model.eval()
        trace.append(
            {
                "epoch": epoch,
                "loss": round(epoch_loss / steps_per_epoch, 6),
                **_trace_metrics(model, dataset, cfg),
            }
        )
    model.eval()
    return model, trace


def _trace_metrics(model, dataset, cfg: DefenseConfig) -> dict:
    from .attacks import accuracy

    test = dataset.test
    k = min(cfg.trace_subset, test.n)
    sub = ImageBatch(test.images[:k], test.labels[:k])
    adv = pgd(model, sub, cfg.attack, seed=derive_seed(cfg.seed, "defense-trace"))
    with no_grad():
        nat = accuracy(model, sub)
        rob = accuracy(model, adv)
    return {"natural_acc": round(nat, 4), "pgd_acc": round(rob, 4)}
