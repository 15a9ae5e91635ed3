"""Checkpoint files: magic "ATSG1", a text manifest, then raw tensor data.

Layout:

    ATSG1\n
    hp W=24 n=3 c=1 K=7 D=1024 D_h=256 n_h=4 n_class=2 d_ff=0 pos=learned head=voxel norm=post\n
    tensor <name> <dim> [<dim> ...] <byte-offset>\n
    ...
    end\n
    <little-endian float64 payload>

Offsets are relative to the payload start.  Save -> load -> save is
byte-identical because tensor order and header formatting are fixed.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DataError, PayloadMismatchError
from .model import Hyperparams, ModelWeights, init_weights
from .tensor import Tensor

MAGIC = b"ATSG1"

_HP_FIELDS = [
    ("W", int), ("n", int), ("c", int), ("K", int), ("D", int),
    ("D_h", int), ("n_h", int), ("n_class", int), ("d_ff", int),
    ("pos_mode", str), ("head_mode", str), ("norm_mode", str),
]
_HP_KEYS = {"pos_mode": "pos", "head_mode": "head", "norm_mode": "norm"}


def _hp_line(hp: Hyperparams) -> str:
    parts = []
    for name, _ in _HP_FIELDS:
        key = _HP_KEYS.get(name, name)
        parts.append(f"{key}={getattr(hp, name)}")
    return "hp " + " ".join(parts)


def _parse_hp(line: str) -> Hyperparams:
    kv = {}
    for token in line.split()[1:]:
        key, _, value = token.partition("=")
        kv[key] = value
    kwargs = {}
    for name, typ in _HP_FIELDS:
        key = _HP_KEYS.get(name, name)
        if key not in kv:
            raise DataError(f"checkpoint header missing hyperparameter {key!r}")
        kwargs[name] = typ(kv[key])
    return Hyperparams(**kwargs)


def save_checkpoint(path: str | Path, weights: ModelWeights) -> None:
    named = weights.named()
    manifest = io.StringIO()
    manifest.write(_hp_line(weights.hp) + "\n")
    payload = io.BytesIO()
    offset = 0
    for name, t in named.items():
        dims = " ".join(str(d) for d in t.data.shape)
        manifest.write(f"tensor {name} {dims} {offset}\n")
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        payload.write(raw)
        offset += len(raw)
    manifest.write("end\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(manifest.getvalue().encode("ascii"))
        fh.write(payload.getvalue())


def load_checkpoint(path: str | Path) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC + b"\n"):
        raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
    # The manifest is ASCII lines up to and including "end\n".
    end_marker = b"\nend\n"
    split_at = blob.find(end_marker)
    if split_at < 0:
        raise DataError(f"{path}: checkpoint manifest has no end marker")
    header = blob[len(MAGIC) + 1:split_at + 1].decode("ascii")
    payload = blob[split_at + len(end_marker):]

    hp: Hyperparams | None = None
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for line in header.splitlines():
        if line.startswith("hp "):
            hp = _parse_hp(line)
        elif line.startswith("tensor "):
            parts = line.split()
            name = parts[1]
            dims = tuple(int(d) for d in parts[2:-1])
            entries.append((name, dims, int(parts[-1])))
        elif line.strip():
            raise DataError(f"{path}: unrecognized manifest line {line!r}")
    if hp is None:
        raise DataError(f"{path}: checkpoint has no hyperparameter line")

    names = {name for name, _, _ in entries}
    weights = init_weights(hp, seed=0,
                           pretrain_head="pre_head.w" in names,
                           seg_head="seg_head.w" in names)
    named = weights.named()
    if set(named) != names:
        missing = set(named) - names
        extra = names - set(named)
        raise DataError(f"{path}: tensor set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")

    total = sum(int(np.prod(dims)) * 8 for _, dims, _ in entries)
    if total != len(payload):
        raise PayloadMismatchError(f"{path}: payload is {len(payload)} bytes, manifest declares {total}")
    for name, dims, offset in entries:
        t: Tensor = named[name]
        if t.data.shape != dims:
            raise DataError(f"{path}: tensor {name} has shape {dims}, expected {t.data.shape}")
        nbytes = int(np.prod(dims)) * 8
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(dims)
        t.data = arr.astype(np.float64).copy()
    return weights
