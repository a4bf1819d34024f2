"""Split classifiers and the small feature-space editing networks.

A classifier is handled as head ∘ feature_extractor, cut at a named
convolutional block (default: the last one).  The hypothesis model and the
test function are shape-preserving convolutional maps on the feature space of
the split layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax, no_grad
from .nn import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Linear,
    Module,
    ReLU,
    Sequential,
)


class UnknownArchitectureError(ValueError):
    pass


class SplitSelectorError(ValueError):
    pass


@dataclass
class ImageBatch:
    """Images in [0, 1], NCHW float32, with integer class labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one integer per image")
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageBatch":
        return ImageBatch(self.images[idx], self.labels[idx])


@dataclass
class FeatureMap:
    """Activation block at the split layer, NCHW."""

    values: np.ndarray
    layer_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


class ConvBlock(Module):
    def __init__(self, cin, cout, rng, pool: bool = False, stride: int = 1, act: bool = True):
        super().__init__()
        self.conv = Conv2d(cin, cout, stride=stride, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = ReLU() if act else None
        self.pool = AvgPool2d(2) if pool else None

    def forward(self, x):
        x = self.bn(self.conv(x))
        if self.act:
            x = self.act(x)
        return self.pool(x) if self.pool else x


class ResidualBlock(Module):
    def __init__(self, cin, cout, rng, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.act = ReLU()
        if stride != 1 or cin != cout:
            self.skip_conv = Conv2d(cin, cout, k=1, stride=stride, pad=0, rng=rng)
            self.skip_bn = BatchNorm2d(cout)
        else:
            self.skip_conv = None

    def forward(self, x):
        out = self.bn2(self.conv2(self.act(self.bn1(self.conv1(x)))))
        skip = self.skip_bn(self.skip_conv(x)) if self.skip_conv else x
        return self.act(out + skip)


def _build_tiny_cnn(num_classes, rng):
    blocks = [
        ("conv1", ConvBlock(3, 16, rng, stride=2)),
        ("conv2", ConvBlock(16, 32, rng, stride=2)),
        ("conv3", ConvBlock(32, 32, rng)),
        # linear output block: signed split-layer features, no dead maps
        ("conv4", ConvBlock(32, 3, rng, act=False)),
    ]
    head = [("flatten", Flatten()), ("fc", Linear(3 * 8 * 8, num_classes, rng=rng))]
    return blocks, head


def _build_vgg_small(num_classes, rng):
    blocks = [
        ("conv1", ConvBlock(3, 32, rng)),
        ("conv2", ConvBlock(32, 32, rng, pool=True)),
        ("conv3", ConvBlock(32, 64, rng)),
        ("conv4", ConvBlock(64, 64, rng, pool=True)),
        ("conv5", ConvBlock(64, 96, rng)),
        ("conv6", ConvBlock(96, 96, rng, pool=True)),
    ]
    head = [
        ("flatten", Flatten()),
        ("fc1", Linear(96 * 4 * 4, 256, rng=rng)),
        ("relu", ReLU()),
        ("fc2", Linear(256, num_classes, rng=rng)),
    ]
    return blocks, head


def _build_resnet_small(num_classes, rng):
    blocks = [
        ("stem", ConvBlock(3, 8, rng, stride=2)),
        ("block1", ResidualBlock(8, 8, rng)),
        ("block2", ResidualBlock(8, 8, rng)),
        ("block3", ResidualBlock(8, 16, rng, stride=2)),
        ("block4", ResidualBlock(16, 16, rng)),
        ("block5", ResidualBlock(16, 32, rng, stride=2)),
        ("block6", ResidualBlock(32, 32, rng)),
    ]
    head = [("gap", GlobalAvgPool()), ("fc", Linear(32, num_classes, rng=rng))]
    return blocks, head


ARCHITECTURES = {
    "tiny-cnn": _build_tiny_cnn,
    "vgg-small": _build_vgg_small,
    "resnet-small": _build_resnet_small,
}

INPUT_HW = 32


class SplitClassifier(Module):
    """Classifier decomposed as head ∘ feature_extractor at `split_layer_id`.

    `features_t` / `head_logp_t` are the differentiable tensor paths;
    `features` / `head_logp` are pure numpy conveniences that run in
    inference mode.
    """

    def __init__(self, arch, num_classes, split_layer_id, feature_net, head_net, seed):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.split_layer_id = split_layer_id
        self.seed = seed
        self.feature_net = feature_net
        self.head_net = head_net
        with no_grad():
            probe = Tensor(np.zeros((1, 3, INPUT_HW, INPUT_HW), dtype=np.float32))
            was_training = self.training
            self.eval()
            self.feature_shape = tuple(self.feature_net(probe).shape[1:])
            self.train(was_training)

    # tensor paths -----------------------------------------------------------

    def features_t(self, x: Tensor) -> Tensor:
        return self.feature_net(x)

    def head_logp_t(self, f: Tensor) -> Tensor:
        return log_softmax(self.head_net(f), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.head_logp_t(self.features_t(x))

    # numpy conveniences -----------------------------------------------------

    def _check_images(self, images: np.ndarray):
        if images.ndim != 4 or images.shape[1:] != (3, INPUT_HW, INPUT_HW):
            raise ValueError(
                f"expected images of shape (N, 3, {INPUT_HW}, {INPUT_HW}), got {images.shape}"
            )

    def features(self, images: np.ndarray) -> FeatureMap:
        self._check_images(images)
        with no_grad():
            was = self.training
            self.eval()
            out = self.feature_net(Tensor(images)).data
            self.train(was)
        return FeatureMap(out, self.split_layer_id)

    def head_logp(self, features) -> np.ndarray:
        values = features.values if isinstance(features, FeatureMap) else np.asarray(features)
        if values.shape[1:] != self.feature_shape:
            raise ValueError(f"feature shape {values.shape[1:]} != {self.feature_shape}")
        with no_grad():
            was = self.training
            self.eval()
            out = self.head_logp_t(Tensor(values)).data
            self.train(was)
        return out

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.head_logp(self.features(images)), axis=1)


class FeatureMapNet(Module):
    """Shape-preserving edit network: conv-bn-relu twice, then a linear conv
    so outputs can take any sign."""

    def __init__(self, channels: int, seed: int = 0, hidden: int | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        h = hidden or channels
        self.channels = channels
        self.hidden = h
        self.seed = seed
        self.net = Sequential(
            [
                ("conv1", Conv2d(channels, h, rng=rng)),
                ("bn1", BatchNorm2d(h)),
                ("relu1", ReLU()),
                ("conv2", Conv2d(h, h, rng=rng)),
                ("bn2", BatchNorm2d(h)),
                ("relu2", ReLU()),
                ("conv3", Conv2d(h, channels, rng=rng)),
            ]
        )

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)

    def apply(self, fm) -> np.ndarray:
        """Inference-mode numpy application; preserves input shape."""
        values = fm.values if isinstance(fm, FeatureMap) else np.asarray(fm)
        if values.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {values.shape[1]}")
        with no_grad():
            was = self.training
            self.eval()
            out = self.forward(Tensor(values)).data
            self.train(was)
        return out


class HypothesisModel(FeatureMapNet):
    """Causal-feature estimator h."""


class TestFunction(FeatureMapNet):
    """Worst-case counterfactual generator g."""


def build_classifier(arch: str, num_classes: int, split: str | None = None, seed: int = 0) -> SplitClassifier:
    """Instantiate a registered architecture, cut at a convolutional block."""
    if arch not in ARCHITECTURES:
        raise UnknownArchitectureError(
            f"unknown architecture {arch!r}; registered: {sorted(ARCHITECTURES)}"
        )
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    blocks, head = ARCHITECTURES[arch](num_classes, rng)
    block_ids = [bid for bid, _ in blocks]
    split = split or block_ids[-1]
    if split not in block_ids:
        raise SplitSelectorError(
            f"split selector {split!r} is not a convolutional block; valid: {block_ids}"
        )
    cut = block_ids.index(split) + 1
    feature_net = Sequential(blocks[:cut])
    head_net = Sequential(blocks[cut:] + head)
    return SplitClassifier(arch, num_classes, split, feature_net, head_net, seed)


def forward_split(model: SplitClassifier, batch: ImageBatch) -> tuple[FeatureMap, np.ndarray]:
    """Feature map at the split layer plus head log-probabilities (inference
    mode; the differentiable path is `model.forward` on a Tensor)."""
    fm = model.features(batch.images)
    return fm, model.head_logp(fm)
