"""Attack contracts: projection exactness, identities, monotone difficulty."""

import numpy as np
import pytest

from causaliv.attacks import (
    EVAL_PGD,
    TRAIN_PGD,
    PerturbationBudget,
    cw_linf,
    evaluate_robustness,
    fgsm,
    pgd,
)
from causaliv.data import generate_shapes
from causaliv.models import ImageBatch, build_classifier

EPS = 8.0 / 255.0


@pytest.fixture(scope="module")
def model():
    return build_classifier("tiny-cnn", 3, seed=0)


@pytest.fixture(scope="module")
def batch():
    return generate_shapes(24, 3, seed=3, noise=0.04)


def assert_constraints(adv, x, eps):
    lo = np.maximum(x - eps, 0.0).astype(np.float32)
    hi = np.minimum(x + eps, 1.0).astype(np.float32)
    assert np.all(adv.images >= lo) and np.all(adv.images <= hi)
    assert np.all(adv.images >= 0.0) and np.all(adv.images <= 1.0)


def test_budget_validation():
    with pytest.raises(ValueError):
        PerturbationBudget(1.5)
    with pytest.raises(ValueError):
        PerturbationBudget(0.1, steps=0)
    with pytest.raises(ValueError):
        PerturbationBudget(0.1, step_size=-1.0)


def test_zero_budget_is_identity(model, batch):
    zero = PerturbationBudget(0.0, steps=2, step_size=0.1)
    for fn in (lambda: fgsm(model, batch, zero),
               lambda: pgd(model, batch, zero, seed=1),
               lambda: cw_linf(model, batch, zero, iters=3)):
        adv = fn()
        assert np.array_equal(adv.images, batch.images)


def test_fgsm_projection_exact(model, batch):
    adv = fgsm(model, batch, PerturbationBudget(EPS))
    assert_constraints(adv, batch.images, EPS)


def test_pgd_projection_exact(model, batch):
    adv = pgd(model, batch, EVAL_PGD, seed=0)
    assert_constraints(adv, batch.images, EPS)


def test_cw_projection_exact(model, batch):
    adv = cw_linf(model, batch, PerturbationBudget(EPS), iters=20)
    assert_constraints(adv, batch.images, EPS)


def test_pgd_single_step_equals_fgsm(model, batch):
    budget = PerturbationBudget(EPS, steps=1, step_size=EPS, random_start=False)
    a = pgd(model, batch, budget, seed=0)
    b = fgsm(model, batch, PerturbationBudget(EPS))
    assert np.array_equal(a.images, b.images)


def test_pgd_deterministic_given_seed(model, batch):
    a = pgd(model, batch, EVAL_PGD, seed=7)
    b = pgd(model, batch, EVAL_PGD, seed=7)
    c = pgd(model, batch, EVAL_PGD, seed=8)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_cw_misclassified_samples_stay_put(model, batch):
    # samples already misclassified sit at the kappa=0 margin floor: zero
    # gradient, so CW leaves them unchanged
    pred = model.predict(batch.images)
    wrong = pred != batch.labels
    if not wrong.any():
        pytest.skip("all samples classified correctly by the random model")
    adv = cw_linf(model, batch, PerturbationBudget(EPS), iters=5)
    assert np.array_equal(adv.images[wrong], batch.images[wrong])


def test_evaluate_robustness_chance_level(model):
    big = generate_shapes(300, 3, seed=11, noise=0.04)
    table = evaluate_robustness(model, big, attacks=("fgsm",), seed=0)
    # untrained model sits near chance on natural data
    assert abs(table["natural"] - 100.0 / 3) < 12.0
    assert table["fgsm"] <= table["natural"] + 3.0


def test_evaluate_robustness_empty_dataset(model):
    empty = ImageBatch(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64))
    with pytest.raises(ValueError, match="empty"):
        evaluate_robustness(model, empty)


def test_attack_mode_restores_model_state(model, batch):
    model.train()
    flags_before = [p.requires_grad for p in model.parameters()]
    pgd(model, batch, TRAIN_PGD, seed=0)
    assert model.training
    assert [p.requires_grad for p in model.parameters()] == flags_before
    model.eval()
