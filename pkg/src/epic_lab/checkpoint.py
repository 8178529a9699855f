"""Binary checkpoint container shared by the VLM and the generator LM.

Layout (all integers little-endian)::

    b"EPIC1"
    u32 descriptor length, descriptor JSON (kind, arch, version)
    u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 ndim, ndim x u32 dims,
                float64 values in row-major order
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .generator import GeneratorLM, LMArch
from .vlm import VisionLanguageModel, VLMArch

MAGIC = b"EPIC1"
VERSION = "epic-lab/1"
_KINDS = {"vlm": (VisionLanguageModel, VLMArch), "lm": (GeneratorLM, LMArch)}


class IntegrityError(RuntimeError):
    """Bad magic, checksum mismatch or truncated container."""


class ArchitectureMismatch(IntegrityError):
    """The checkpoint describes a different model kind or shape set."""


def to_bytes(model) -> bytes:
    desc = json.dumps({"kind": model.kind, "arch": model.arch.to_dict(), "version": VERSION},
                      sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(desc)), desc, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(blob: bytes, expect: str | None = None):
    if len(blob) < len(MAGIC) + 32 or blob[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not an EPIC1 checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    try:
        off = len(MAGIC)
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        desc = json.loads(body[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            tensors[name] = data.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"truncated or malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise IntegrityError("trailing bytes after tensor block")

    kind = desc.get("kind")
    if kind not in _KINDS:
        raise ArchitectureMismatch(f"unknown model kind {kind!r}")
    if expect is not None and kind != expect:
        raise ArchitectureMismatch(f"checkpoint holds a {kind!r} model, expected {expect!r}")
    cls, arch_cls = _KINDS[kind]
    try:
        arch = arch_cls(**desc["arch"])
    except TypeError as exc:
        raise ArchitectureMismatch(f"architecture descriptor not understood: {exc}") from exc
    model = cls(arch, init=True)
    if set(model.params) != set(tensors):
        raise ArchitectureMismatch("parameter names do not match the architecture")
    for name, ref in model.params.items():
        if ref.shape != tensors[name].shape:
            raise ArchitectureMismatch(f"{name}: shape {tensors[name].shape} != {ref.shape}")
    model.params = {name: Tensor(tensors[name], requires_grad=True) for name in model.params}
    return model


def load_checkpoint(path, expect: str | None = None):
    """Load a model; ``expect`` ('vlm' or 'lm') enforces the descriptor kind."""
    return from_bytes(Path(path).read_bytes(), expect)
