"""Split-classifier contracts and the feature-space edit networks."""

import numpy as np
import pytest

from causaliv.autodiff import Tensor, nll_loss
from causaliv.models import (
    ARCHITECTURES,
    HypothesisModel,
    ImageBatch,
    SplitSelectorError,
    TestFunction,
    UnknownArchitectureError,
    build_classifier,
    forward_split,
)


def batch(n=4, seed=0, k=3):
    rng = np.random.default_rng(seed)
    return ImageBatch(
        rng.uniform(0, 1, (n, 3, 32, 32)).astype(np.float32),
        rng.integers(0, k, n),
    )


def test_tiny_cnn_feature_shape():
    model = build_classifier("tiny-cnn", 3)
    assert model.feature_shape == (3, 8, 8)


def test_head_width_matches_num_classes():
    model = build_classifier("resnet-small", 10)
    fm, logp = forward_split(model, batch(2, k=10))
    assert logp.shape == (2, 10)


def test_unknown_architecture_error():
    with pytest.raises(UnknownArchitectureError, match="unknown architecture"):
        build_classifier("unknown-arch", 3)


def test_bad_split_selector_error():
    with pytest.raises(SplitSelectorError, match="not a convolutional block"):
        build_classifier("tiny-cnn", 3, split="fc")


def test_split_override_moves_the_cut():
    model = build_classifier("tiny-cnn", 3, split="conv2")
    assert model.feature_shape == (32, 8, 8)
    fm, logp = forward_split(model, batch(2))
    assert fm.shape == (2, 32, 8, 8)
    assert logp.shape == (2, 3)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_forward_split_contracts(arch):
    model = build_classifier(arch, 3, seed=1)
    b = batch(3, seed=2)
    fm, logp = forward_split(model, b)
    assert fm.values.shape[0] == 3
    # composition equals the full model output at identical precision
    full = model.head_logp(model.features(b.images))
    assert np.array_equal(full, logp)
    # log-probabilities: nonpositive, rows normalize
    assert np.all(logp <= 0)
    assert np.allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-5)


def test_forward_split_deterministic_on_duplicates():
    model = build_classifier("tiny-cnn", 3)
    b = batch(2, seed=3)
    dup = ImageBatch(np.concatenate([b.images, b.images]), np.concatenate([b.labels, b.labels]))
    _, logp = forward_split(model, dup)
    assert np.array_equal(logp[:2], logp[2:])


def test_zero_batch_shape_contract():
    model = build_classifier("tiny-cnn", 3)
    fm, _ = forward_split(model, ImageBatch(np.zeros((2, 3, 32, 32), np.float32), np.zeros(2, np.int64)))
    assert fm.values.shape == (2, 3, 8, 8)


def test_gradients_flow_through_both_stages():
    model = build_classifier("tiny-cnn", 3)
    b = batch(2, seed=4)
    x = Tensor(b.images, requires_grad=True)
    model.eval()
    nll_loss(model.forward(x), b.labels).backward()
    assert x.grad is not None and np.abs(x.grad).max() > 0
    assert any(p.grad is not None for p in model.head_net.parameters())
    assert any(p.grad is not None for p in model.feature_net.parameters())


def test_input_shape_validation():
    model = build_classifier("tiny-cnn", 3)
    with pytest.raises(ValueError, match="expected images"):
        model.features(np.zeros((2, 3, 16, 16), np.float32))


def test_scaled_down_architectures_stay_small():
    for arch in ("vgg-small", "resnet-small"):
        model = build_classifier(arch, 10)
        assert sum(p.data.size for p in model.parameters()) <= 1_000_000


@pytest.mark.parametrize("cls", [HypothesisModel, TestFunction])
def test_edit_networks_preserve_shape(cls):
    for arch in sorted(ARCHITECTURES):
        model = build_classifier(arch, 3)
        net = cls(model.feature_shape[0], seed=5)
        z = np.random.default_rng(6).normal(size=(2,) + model.feature_shape).astype(np.float32)
        out = net.apply(z)
        assert out.shape == z.shape


def test_edit_network_deterministic_inference():
    net = HypothesisModel(3, seed=7)
    z = np.random.default_rng(8).normal(size=(2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(net.apply(z), net.apply(z))


def test_edit_network_channel_mismatch():
    net = TestFunction(3, seed=9)
    with pytest.raises(ValueError, match="channels"):
        net.apply(np.zeros((1, 5, 8, 8), np.float32))


def test_image_batch_validation():
    with pytest.raises(ValueError, match="pixel values"):
        ImageBatch(np.full((1, 3, 32, 32), 1.5, np.float32), np.zeros(1, np.int64))
    with pytest.raises(ValueError, match="labels"):
        ImageBatch(np.zeros((2, 3, 32, 32), np.float32), np.zeros(3, np.int64))
