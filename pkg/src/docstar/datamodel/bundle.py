"""On-disk bundle format: one directory per server, one binary file per table.

Each table file starts with the magic ``DOCSTAR1`` followed by big-endian
u64 fields ``p, α, β, γ, δ, η``, a one-byte layout tag and the table's
``rows, cols``; the body is the row-major cells as 8-byte big-endian words.
``clients.bin`` carries the cleartext client ids (u32 count, then u32-length
UTF-8 strings) behind the same header, and ``meta.json`` the public
parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .build import TABLE_NAMES, DeployParams, ServerBundle

MAGIC = b"DOCSTAR1"
FORMAT_VERSION = 1
_HEADER = struct.Struct(">8sQQQQQQB")
_SHAPE = struct.Struct(">QQ")
_LAYOUT_TAGS = {"padded": 1, "optimized": 2}
_ONE_DIMENSIONAL = {"keywords", "posdig", "optinv", "file_ids"}


def _header(params: DeployParams) -> bytes:
    return _HEADER.pack(
        MAGIC, params.p, params.alpha, params.beta, params.gamma, params.delta, params.eta,
        _LAYOUT_TAGS[params.layout],
    )


def _check_header(raw: bytes, params: DeployParams, path: Path) -> int:
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: truncated header")
    magic, p, alpha, beta, gamma, delta, eta, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    expected = (params.p, params.alpha, params.beta, params.gamma, params.delta, params.eta,
                _LAYOUT_TAGS[params.layout])
    if (p, alpha, beta, gamma, delta, eta, tag) != expected:
        raise ConfigError(f"{path}: header does not match meta.json")
    return _HEADER.size


def encode_table(arr: np.ndarray, params: DeployParams) -> bytes:
    rows, cols = (1, arr.shape[0]) if arr.ndim == 1 else arr.shape
    body = np.ascontiguousarray(arr, dtype=np.int64).astype(">u8").tobytes()
    return _header(params) + _SHAPE.pack(rows, cols) + body


def decode_table(raw: bytes, params: DeployParams, name: str, path: Path = Path("?")) -> np.ndarray:
    offset = _check_header(raw, params, path)
    rows, cols = _SHAPE.unpack_from(raw, offset)
    offset += _SHAPE.size
    body = raw[offset:]
    if len(body) != 8 * rows * cols:
        raise ConfigError(f"{path}: body holds {len(body)} bytes, expected {8 * rows * cols}")
    arr = np.frombuffer(body, dtype=">u8").astype(np.int64)
    if np.any(arr < 0) or np.any(arr >= params.p):
        raise ConfigError(f"{path}: cell outside the field")
    return arr if name in _ONE_DIMENSIONAL else arr.reshape(rows, cols)


def save_bundle(bundle: ServerBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = bundle.params
    meta = {"format": FORMAT_VERSION, "server_index": bundle.server_index, "params": params.to_dict()}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    for name, arr in bundle.arrays.items():
        (directory / f"{name}.bin").write_bytes(encode_table(arr, params))
    ids = b"".join(struct.pack(">I", len(c.encode())) + c.encode() for c in params.clients)
    (directory / "clients.bin").write_bytes(_header(params) + struct.pack(">I", len(params.clients)) + ids)
    return directory


def load_bundle(directory: str | Path) -> ServerBundle:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{directory} is not a bundle directory") from exc
    if meta.get("format") != FORMAT_VERSION:
        raise ConfigError(f"{directory}: unsupported bundle format {meta.get('format')!r}")
    params = DeployParams.from_dict(meta["params"])
    raw = (directory / "clients.bin").read_bytes()
    offset = _check_header(raw, params, directory / "clients.bin")
    (count,) = struct.unpack_from(">I", raw, offset)
    offset += 4
    clients = []
    for _ in range(count):
        (n,) = struct.unpack_from(">I", raw, offset)
        clients.append(raw[offset + 4:offset + 4 + n].decode())
        offset += 4 + n
    if clients != params.clients:
        raise ConfigError(f"{directory}: client table does not match meta.json")
    arrays = {}
    for name in TABLE_NAMES:
        path = directory / f"{name}.bin"
        if path.exists():
            arrays[name] = decode_table(path.read_bytes(), params, name, path)
    return ServerBundle(params, arrays, server_index=int(meta["server_index"]))
