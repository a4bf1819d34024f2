"""Versioned checkpoint container.

Layout: 8-byte magic, 8-byte big-endian header length, UTF-8 JSON header
(format version, object spec, seed, creation metadata, parameter names),
an embedded npz archive with the named parameter/buffer arrays, and a
trailing SHA-256 over header+payload.  Loading rebuilds the object from the
header spec and restores every array bit-exactly.
"""

from __future__ import annotations

import datetime
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .models import HypothesisModel, SplitClassifier, TestFunction, build_classifier

MAGIC = b"CIVCKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _kind_of(obj) -> str:
    if isinstance(obj, SplitClassifier):
        return "split_classifier"
    if isinstance(obj, HypothesisModel):
        return "hypothesis_model"
    if isinstance(obj, TestFunction):
        return "test_function"
    raise CheckpointError(f"cannot checkpoint object of type {type(obj).__name__}")


def _spec_of(obj) -> dict:
    if isinstance(obj, SplitClassifier):
        return {
            "arch": obj.arch,
            "num_classes": obj.num_classes,
            "split_layer_id": obj.split_layer_id,
            "seed": obj.seed,
        }
    return {"channels": obj.channels, "hidden": obj.hidden, "seed": obj.seed}


def save_checkpoint(obj, path) -> None:
    state = obj.state_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(obj),
        "spec": _spec_of(obj),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "param_names": sorted(state),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, **state)
    payload = buf.getvalue()
    digest = hashlib.sha256(header_bytes + payload).digest()
    body = MAGIC + len(header_bytes).to_bytes(8, "big") + header_bytes + payload + digest
    Path(path).write_bytes(body)


def _rebuild(header: dict):
    kind, spec = header["kind"], header["spec"]
    if kind == "split_classifier":
        return build_classifier(
            spec["arch"], spec["num_classes"], split=spec["split_layer_id"], seed=spec["seed"]
        )
    cls = {"hypothesis_model": HypothesisModel, "test_function": TestFunction}.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    return cls(spec["channels"], seed=spec["seed"], hidden=spec["hidden"])


def load_checkpoint(path, expect_kind: str | None = None, expect_arch: str | None = None):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "big")
    header_start = len(MAGIC) + 8
    header_bytes = raw[header_start : header_start + hlen]
    payload = raw[header_start + hlen : -32]
    digest = raw[-32:]
    if hashlib.sha256(header_bytes + payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    header = json.loads(header_bytes.decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: kind {header['kind']!r}, expected {expect_kind!r}")
    if expect_arch is not None:
        arch = header["spec"].get("arch")
        if arch != expect_arch:
            raise CheckpointError(f"{path}: architecture {arch!r}, expected {expect_arch!r}")
    state = dict(np.load(io.BytesIO(payload)))
    if sorted(state) != header["param_names"]:
        raise CheckpointError(f"{path}: parameter names disagree with header")
    obj = _rebuild(header)
    try:
        obj.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: arrays do not fit the declared spec: {exc}") from exc
    obj.eval()
    return obj
