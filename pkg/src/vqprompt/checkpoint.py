"""Versioned binary checkpoints: a JSON header plus named parameter blobs.

Layout (integers little-endian):

  offset  size  field
  0       4     magic ``VQCK``
  4       4     u32 version (= 1)
  8       4     u32 header length H
  12      H     UTF-8 JSON header (config fields)
  ...           blobs, each:
                  u16 name length | name UTF-8 | u8 ndim | u32 dims... |
                  f64 values, row-major

Blobs appear in parameter declaration order. Backbone checkpoints carry
the backbone config in the header; continual-run checkpoints append the
prompt pool as ``prompt.P`` / ``prompt.K`` (with pool hyperparameters in
the header) and the classifier as ``head.weight`` / ``head.bias``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import FormatError
from .tensor import Tensor

_MAGIC = b"VQCK"
_VERSION = 1


def write_checkpoint(path, header: dict, blobs) -> None:
    """``blobs`` is an ordered iterable of (name, float64 ndarray)."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name, array in blobs:
            name_bytes = name.encode("utf-8")
            array = np.asarray(array, dtype=np.float64)
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()

    def _need(offset, count, what):
        if offset + count > len(raw):
            raise FormatError(
                f"{path}: truncated while reading {what} at byte offset {offset}"
            )

    _need(0, 12, "header")
    magic, version, header_len = struct.unpack_from("<4sII", raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    offset = 12
    _need(offset, header_len, "header JSON")
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(
            f"{path}: unreadable header at byte offset {offset}: {exc}"
        ) from exc
    offset += header_len

    blobs: dict[str, np.ndarray] = {}
    while offset < len(raw):
        _need(offset, 2, "blob name length")
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        _need(offset, name_len, "blob name")
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        _need(offset, 1, f"'{name}' rank")
        ndim = raw[offset]
        offset += 1
        _need(offset, 4 * ndim, f"'{name}' shape")
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        _need(offset, 8 * count, f"'{name}' values")
        blobs[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .copy()
            .reshape(shape)
        )
        offset += 8 * count
    return header, blobs


# ---------------------------------------------------------------------------
# backbone (and extended model state) checkpoints
# ---------------------------------------------------------------------------

def backbone_header(backbone: Backbone) -> dict:
    cfg = backbone.config
    return {
        "kind": "backbone",
        "depth": cfg.depth,
        "embed_dim": cfg.embed_dim,
        "heads": cfg.heads,
        "seq_len": cfg.seq_len,
        "ff_dim": cfg.ff_dim,
        "token_dim": cfg.token_dim,
        "prompt_blocks": list(cfg.prompt_blocks),
        "frozen": backbone.frozen,
    }


def save_backbone(path, backbone: Backbone, extra_header: dict | None = None,
                  extra_blobs=None) -> None:
    header = backbone_header(backbone)
    if extra_header:
        header.update(extra_header)
    blobs = [(name, t.data) for name, t in backbone.named_parameters()]
    if extra_blobs:
        blobs += [(name, np.asarray(arr)) for name, arr in extra_blobs]
    write_checkpoint(path, header, blobs)


def load_backbone(path) -> tuple[Backbone, dict, dict[str, np.ndarray]]:
    """Rebuild a backbone; returns (backbone, header, leftover blobs)."""
    header, blobs = read_checkpoint(path)
    config = BackboneConfig(
        depth=header["depth"],
        embed_dim=header["embed_dim"],
        heads=header["heads"],
        seq_len=header["seq_len"],
        ff_dim=header["ff_dim"],
        token_dim=header["token_dim"],
        prompt_blocks=tuple(header["prompt_blocks"]),
    )
    backbone = Backbone(config, np.random.default_rng(0))
    extras = dict(blobs)
    for name, param in backbone.named_parameters():
        if name not in extras:
            raise FormatError(f"{path}: missing parameter blob {name!r}")
        array = extras.pop(name)
        if array.shape != param.shape:
            raise FormatError(
                f"{path}: blob {name!r} has shape {array.shape}, "
                f"expected {param.shape}"
            )
        param.data = np.ascontiguousarray(array)
    if header.get("frozen"):
        backbone.freeze()
    return backbone, header, extras


def replace_tensor_data(tensor: Tensor, array: np.ndarray) -> None:
    if array.shape != tensor.shape:
        raise FormatError(
            f"blob shape {array.shape} does not match tensor {tensor.shape}"
        )
    tensor.data = np.ascontiguousarray(array, dtype=np.float64)
