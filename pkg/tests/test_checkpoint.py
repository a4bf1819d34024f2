"""Checkpoint container: round trips, tamper detection, spec mismatches."""

import numpy as np
import pytest

from causaliv.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from causaliv.models import HypothesisModel, TestFunction, build_classifier


def test_classifier_round_trip_bit_exact(tmp_path):
    model = build_classifier("tiny-cnn", 3, seed=11)
    # perturb parameters away from init so the test is not vacuous
    for p in model.parameters():
        p.data += 0.01
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    for (name, a), (name2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name == name2
        assert np.array_equal(a.data, b.data)
    for (name, a), (_, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert np.array_equal(a, b)
    assert loaded.arch == "tiny-cnn" and loaded.num_classes == 3 and loaded.seed == 11


@pytest.mark.parametrize("cls,kind", [(HypothesisModel, "hypothesis_model"), (TestFunction, "test_function")])
def test_edit_net_round_trip(tmp_path, cls, kind):
    net = cls(3, seed=4, hidden=16)
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path, expect_kind=kind)
    assert type(loaded) is cls
    for (_, a), (_, b) in zip(net.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_wrong_kind_and_arch_errors(tmp_path):
    model = build_classifier("tiny-cnn", 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError, match="kind"):
        load_checkpoint(path, expect_kind="hypothesis_model")
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, expect_arch="resnet-small")


def test_truncated_file_fails_checksum(tmp_path):
    model = build_classifier("tiny-cnn", 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_corrupted_byte_fails_checksum(tmp_path):
    model = build_classifier("tiny-cnn", 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)
