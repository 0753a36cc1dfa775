"""``VRC1`` binary checkpoints (little-endian).

Layout::

    b"VRC1"
    u8   model kind (0=MF, 1=VMF, 2=VMLP, 3=MF-VMLP)
    u32  K, u32 D, u32 F, u32 n_users, u32 n_items
    u8   bias flag
    u32  number of hidden layers, then one u32 width per layer
    32 B SHA-256 of the index sidecar the model was trained against (zeros if unknown)
    tensors in ``models.tensor_layout`` order, each as
        u32 rows, u32 cols, rows*cols float64 row-major
        (vectors are written as a single column)
"""

from __future__ import annotations

import struct

import numpy as np

from vizrec.models import ModelKind, ModelParams, tensor_layout

MAGIC = b"VRC1"
NO_DIGEST = bytes(32)


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ModelParams, index_digest: bytes = NO_DIGEST) -> bytes:
    if len(index_digest) != 32:
        raise ValueError("index digest must be 32 bytes")
    parts = [
        MAGIC,
        struct.pack("<B5IB", int(params.kind), params.latent_dim, params.visual_dim,
                    params.feature_dim, params.n_users, params.n_items, int(params.use_bias)),
        struct.pack(f"<I{len(params.tower_widths)}I", len(params.tower_widths), *params.tower_widths),
        index_digest,
    ]
    for name, shape, _ in tensor_layout(params.kind, params.n_users, params.n_items, params.latent_dim,
                                        params.visual_dim, params.feature_dim, params.tower_widths,
                                        params.use_bias):
        t = params.tensors[name]
        if t.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {t.shape}, layout expects {shape}")
        rows, cols = (shape[0], 1) if len(shape) == 1 else shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, expect_kind=None) -> tuple[ModelParams, bytes]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic, expected VRC1")
    off = 4
    try:
        kind_tag, K, D, F, n_users, n_items, bias = struct.unpack_from("<B5IB", buf, off)
        off += struct.calcsize("<B5IB")
        (n_layers,) = struct.unpack_from("<I", buf, off)
        off += 4
        widths = struct.unpack_from(f"<{n_layers}I", buf, off)
        off += 4 * n_layers
    except struct.error:
        raise CheckpointError("truncated header") from None
    try:
        kind = ModelKind(kind_tag)
    except ValueError:
        raise CheckpointError(f"unknown model kind tag {kind_tag}") from None
    if expect_kind is not None and kind is not ModelKind.parse(expect_kind):
        raise CheckpointError(f"checkpoint holds {kind.label}, expected {ModelKind.parse(expect_kind).label}")
    digest = buf[off:off + 32]
    if len(digest) != 32:
        raise CheckpointError("truncated header")
    off += 32
    params = ModelParams(kind, n_users, n_items, K, D, F, tuple(widths), bool(bias))
    try:
        layout = tensor_layout(kind, n_users, n_items, K, D, F, widths, bool(bias))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    for name, shape, _ in layout:
        if off + 8 > len(buf):
            raise CheckpointError(f"truncated before tensor {name}")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        expected = (shape[0], 1) if len(shape) == 1 else shape
        if (rows, cols) != expected:
            raise CheckpointError(f"tensor {name} is {rows}x{cols}, expected {expected[0]}x{expected[1]}")
        nbytes = 8 * rows * cols
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated tensor {name}")
        data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).astype(np.float64)
        params.tensors[name] = data.reshape(shape)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return params, digest


def save_checkpoint(params: ModelParams, path, index_digest: bytes = NO_DIGEST) -> None:
    data = encode_checkpoint(params, index_digest)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, expect_kind=None) -> ModelParams:
    return load_checkpoint_with_digest(path, expect_kind)[0]


def load_checkpoint_with_digest(path, expect_kind=None) -> tuple[ModelParams, bytes]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expect_kind)
