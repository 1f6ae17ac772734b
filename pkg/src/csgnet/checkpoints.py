"""Checkpoint persistence: JSON manifest plus raw float32 blobs.

A checkpoint is a directory with a ``manifest.json`` describing the
architecture, gate, epoch, and parameter blob files.  Every tensor is
written row-major as little-endian float32, so a save/load/save round trip
is byte-identical and probe logits reproduce exactly.
"""

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .gates import GateMatrix
from .model import TinyCSGNet

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_atomic(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path, obj):
    data = json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n"
    _write_atomic(path, data)


def _blob_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(model, gate, history, path, epoch=None, metrics=None):
    """Write a checkpoint directory (atomically per file)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = []
    for name, arr in model.params.items():
        fname = name.replace(".", "_") + ".bin"
        _write_atomic(path / fname, _blob_bytes(arr))
        params.append({"name": name, "shape": list(arr.shape), "file": fname})
    _write_atomic(path / "gate.bin", _blob_bytes(gate.values))
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.describe(),
        "C": model.num_classes,
        "K": model.num_filters,
        "epoch": epoch,
        "metrics": metrics or {},
        "params": params,
        "gate": {"C": gate.num_classes, "K": gate.num_filters,
                 "frozen": gate.frozen, "file": "gate.bin"},
    }
    write_json_atomic(path / "manifest.json", manifest)
    if history is not None:
        _write_atomic(path / "history.jsonl",
                      history.to_json_lines().encode())
        write_json_atomic(path / "status.json", {"status": history.status})
    return path


def _read_blob(path, shape):
    data = Path(path).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(data) != expected:
        raise CheckpointError(
            f"blob {path} is {len(data)} bytes, expected {expected} "
            f"(truncated at offset {min(len(data), expected)})"
        )
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def load_checkpoint(path):
    """Load (model, gate, manifest) from a checkpoint directory."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest.json under {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    model = TinyCSGNet.from_descriptor(manifest["architecture"])
    for spec in manifest["params"]:
        arr = _read_blob(path / spec["file"], spec["shape"])
        if model.params[spec["name"]].shape != arr.shape:
            raise CheckpointError(
                f"parameter {spec['name']} shape {arr.shape} does not match "
                f"architecture {model.params[spec['name']].shape}"
            )
        model.params[spec["name"]] = arr
    gspec = manifest["gate"]
    gate_values = _read_blob(path / gspec["file"], (gspec["C"], gspec["K"]))
    if gspec["C"] != manifest["C"] or gspec["K"] != manifest["K"]:
        raise CheckpointError("gate dimensions disagree with the manifest")
    gate = GateMatrix(gate_values, frozen=bool(gspec["frozen"]))
    return model, gate, manifest
