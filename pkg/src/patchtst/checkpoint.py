"""Single-file checkpoints: a text manifest followed by raw float64 arrays.

Layout::

    PATCHTST-CHECKPOINT 1
    manifest-bytes <n>
    <n bytes of manifest text>
    <binary section: little-endian float64 arrays in manifest order>

Manifest lines are ``config <field> = <json>``, ``meta <key> = <json>``,
``array <name> <shape> <offset> <count>`` (shape like ``16x42``, ``-`` for a
scalar, offset in bytes from the start of the binary section) and a final
``end``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, PatchTST

MAGIC = b"PATCHTST-CHECKPOINT 1\n"


def _shape_str(shape):
    return "x".join(str(s) for s in shape) or "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save(path, cfg: ModelConfig, arrays: dict, meta: dict | None = None):
    lines, chunks, offset = [], [], 0
    for key, value in cfg.to_dict().items():
        lines.append(f"config {key} = {json.dumps(value)}")
    for key in sorted(meta or {}):
        lines.append(f"meta {key} = {json.dumps(meta[key], sort_keys=True)}")
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        lines.append(f"array {name} {_shape_str(a.shape)} {offset} {a.size}")
        chunks.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(f"manifest-bytes {len(manifest)}\n".encode())
        fh.write(manifest)
        for c in chunks:
            fh.write(c)
    return path


def load(path):
    """Return ``(config dict, arrays, meta)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    nl = raw.index(b"\n", pos)
    head = raw[pos:nl].decode()
    if not head.startswith("manifest-bytes "):
        raise CheckpointError(f"{path}: malformed header {head!r}")
    n = int(head.split()[1])
    manifest = raw[nl + 1:nl + 1 + n].decode("utf-8").splitlines()
    blob = memoryview(raw)[nl + 1 + n:]
    config, meta, arrays = {}, {}, {}
    for line in manifest:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            k, _, v = rest.partition(" = ")
            config[k] = json.loads(v)
        elif kind == "meta":
            k, _, v = rest.partition(" = ")
            meta[k] = json.loads(v)
        elif kind == "array":
            name, shape, off, count = rest.split()
            off, count = int(off), int(count)
            if off + 8 * count > len(blob):
                raise CheckpointError(f"{path}: array {name} runs past end of file")
            a = np.frombuffer(blob[off:off + 8 * count], dtype="<f8").astype(np.float64)
            arrays[name] = a.reshape(_parse_shape(shape))
        elif kind == "end":
            break
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")
    return config, arrays, meta


EXTRA_PREFIX = "extra."


def save_model(path, model: PatchTST, extras: dict | None = None, meta: dict | None = None,
               include_head=True):
    arrays = dict(model.params.arrays(include_head=include_head))
    for k, v in (extras or {}).items():
        arrays[EXTRA_PREFIX + k] = np.asarray(v, dtype=np.float64)
    meta = dict(meta or {})
    meta.setdefault("seed", model.seed)
    meta["has_head"] = include_head
    return save(path, model.cfg, arrays, meta)


def load_model(path):
    """Return ``(model, extras, meta)``; a head-less checkpoint yields a fresh head."""
    config, arrays, meta = load(path)
    cfg = ModelConfig.from_dict(config)
    extras = {k[len(EXTRA_PREFIX):]: v for k, v in arrays.items() if k.startswith(EXTRA_PREFIX)}
    body = {k: v for k, v in arrays.items() if not k.startswith(EXTRA_PREFIX)}
    seed = int(meta.get("seed", 2021))
    params = ModelParams.from_arrays(cfg, body, require_head=meta.get("has_head", True))
    if not meta.get("has_head", True):
        fresh = ModelParams.init(cfg, np.random.default_rng([seed, 1]))
        for n in fresh.head_names():
            params.tensors[n] = fresh[n]
    return PatchTST(cfg, params, seed=seed), extras, meta
