"""Artifact persistence: binary model container, CSV tables and validated JSON."""

from __future__ import annotations

import csv
import json
import math
import struct
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from lmdp.errors import FormatError
from lmdp.nn import LayeredModel, LayerSpec

MAGIC = b"LMDP"
FORMAT_VERSION = 1
ACTIVATION_CODES = {"relu": 0, "tanh": 1, "identity": 2, "softmax": 3}
_CODE_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}

# Frozen column layouts (format version 1).
TRAIN_LOG_COLUMNS = ("t", "batch_size", "bias_norm", "grad_norm", "test_acc")
ADVERSARY_COLUMNS = ("layer", "er", "member_fraction", "n_members", "n_non_members", "ir_dim")
ATTACK_COLUMNS = ("layer", "accuracy")
ABLATION_COLUMNS = ("param", "value", "peak_accuracy", "peak_layer", "final_test_acc", "epsilon", "sigma")


def model_to_bytes(model: LayeredModel) -> bytes:
    """Serialize ``model``: header, one record per layer, then little-endian f8 parameters."""
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, model.depth)]
    for spec in model.layers:
        parts.append(struct.pack("<IIB", spec.in_dim, spec.out_dim, ACTIVATION_CODES[spec.activation]))
    for block in model.blocks:
        parts.append(np.asarray(block, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes, path=None) -> LayeredModel:
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", path)
    if len(raw) < 10:
        raise FormatError("truncated header", path)
    version, depth = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}", path)
    offset = 10
    layers = []
    for _ in range(depth):
        if len(raw) < offset + 9:
            raise FormatError("truncated layer table", path)
        in_dim, out_dim, code = struct.unpack("<IIB", raw[offset : offset + 9])
        offset += 9
        if code not in _CODE_NAMES:
            raise FormatError(f"unknown activation code {code}", path)
        layers.append(LayerSpec(in_dim, out_dim, _CODE_NAMES[code]))
    expected = 8 * sum(s.size for s in layers)
    if len(raw) - offset != expected:
        raise FormatError(f"parameter payload has {len(raw) - offset} bytes, expected {expected}", path)
    blocks = []
    for spec in layers:
        blocks.append(np.frombuffer(raw, dtype="<f8", count=spec.size, offset=offset).astype(np.float64))
        offset += 8 * spec.size
    return LayeredModel(layers, blocks)


def save_model(model: LayeredModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> LayeredModel:
    return model_from_bytes(Path(path).read_bytes(), path)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    """RFC-4180 CSV (CRLF line ends, minimal quoting); floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            writer.writerow([_cell(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _plain(obj):
    """Convert numpy scalars/arrays to JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def load_schema(name: str) -> dict:
    text = resources.files("lmdp").joinpath("schemas").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(doc: dict, schema: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        raise FormatError(f"document does not match schema {schema!r}: {exc.message}") from exc


def write_json(path, doc: dict, schema: str) -> dict:
    """Validate ``doc`` against a shipped schema and write it with sorted keys."""
    doc = _plain(doc)
    validate(doc, schema)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return doc


def read_json(path, schema: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", path) from exc
    if schema is not None:
        validate(doc, schema)
    return doc
