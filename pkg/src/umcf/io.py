"""File formats: binary volumes, JSON token files and JSON fusion configs.

Volume layout (all integers little-endian)::

    offset  size        field
    0       8           magic b"UMCFVOL1"
    8       4  u32      version (1)
    12      4  u32      ndim (3 or 4)
    16      8*ndim u64  dims, order H, W, D[, C]
    16+8n   4  u32      dtype code (1 = float32)
    20+8n   4*prod(dims) payload, float32 LE, x fastest then y, z, channel
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .field import InvalidInputError
from .fusion import ConfigError, FusionConfig
from .tokens import MODALITIES, TokenSet, make_token_set, project_embeddings

MAGIC = b"UMCFVOL1"
VERSION = 1
DTYPE_FLOAT32 = 1
# Refuse headers that would describe more than 2**40 scalars (4 TiB of payload).
MAX_SCALARS = 1 << 40


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def encode_volume(grid) -> bytes:
    a = np.asarray(grid)
    if a.ndim not in (3, 4) or a.size == 0:
        raise InvalidInputError(f"volume must be a non-empty 3-D or 4-D array, got shape {a.shape}")
    a32 = a.astype("<f4")
    if not np.all(np.isfinite(a32)):
        raise InvalidInputError("volume contains non-finite values")
    header = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    header += struct.pack("<I", DTYPE_FLOAT32)
    return header + a32.ravel(order="F").tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    if buf[:8] != MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}", 0)
    version, ndim = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if ndim not in (3, 4):
        raise FormatError(f"ndim must be 3 or 4, got {ndim}", 12)
    head_len = 16 + 8 * ndim + 4
    if len(buf) < head_len:
        raise FormatError("truncated header", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, 16)
    count = 1
    for i, n in enumerate(dims):
        if n < 1:
            raise FormatError(f"dimension {i} is zero", 16 + 8 * i)
        count *= n
        if count > MAX_SCALARS:
            raise FormatError("dims overflow the supported volume size", 16 + 8 * i)
    (dtype,) = struct.unpack_from("<I", buf, 16 + 8 * ndim)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", 16 + 8 * ndim)
    payload = len(buf) - head_len
    if payload < 4 * count:
        raise FormatError(f"truncated payload: expected {count} float32 values, found {payload // 4}", len(buf))
    if payload > 4 * count:
        raise FormatError(f"{payload - 4 * count} trailing bytes after payload", head_len + 4 * count)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head_len)
    return data.reshape(dims, order="F").astype(np.float32)


def write_volume(path, grid) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_volume(grid))


def read_volume(path) -> np.ndarray:
    """Volume as a float32 array of shape (H, W, D[, C])."""
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


# ---------------------------------------------------------------- tokens


def validate_token_document(doc) -> dict:
    if not isinstance(doc, dict):
        raise FormatError("token file must hold a JSON object")
    unknown = set(doc) - {"dim", "modality", "tokens"}
    if unknown:
        raise FormatError(f"unknown token file key(s): {sorted(unknown)}")
    dim = doc.get("dim")
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise FormatError(f"'dim' must be a positive integer, got {dim!r}")
    if doc.get("modality") not in MODALITIES:
        raise FormatError(f"'modality' must be one of {MODALITIES}, got {doc.get('modality')!r}")
    entries = doc.get("tokens")
    if not isinstance(entries, list):
        raise FormatError("'tokens' must be an array")
    seen = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("label"), str):
            raise FormatError(f"token {i} needs a string 'label'")
        if entry["label"] in seen:
            raise FormatError(f"duplicate token label {entry['label']!r}")
        seen.add(entry["label"])
        keys = set(entry) - {"label"}
        if keys == {"values"}:
            vectors = [entry["values"]]
        elif keys == {"words"} and isinstance(entry["words"], list) and entry["words"]:
            vectors = entry["words"]
        else:
            raise FormatError(f"token {entry['label']!r} needs exactly one of 'values' or a non-empty 'words'")
        for v in vectors:
            if not isinstance(v, list) or len(v) != dim:
                raise InvalidInputError(f"token {entry['label']!r} has a vector whose length is not dim={dim}")
            if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                raise FormatError(f"token {entry['label']!r} has non-numeric entries")
    return doc


def read_token_file(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"token file is not valid JSON: {exc}", getattr(exc, "pos", None)) from None
    return validate_token_document(doc)


def dumps_json(doc) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_token_file(path, doc) -> None:
    validate_token_document(doc)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(doc))


def token_set_from_document(doc: dict, expected_dim: int, seed: int = 0) -> TokenSet:
    """Pool word vectors per phrase, project to ``expected_dim`` if needed, normalize."""
    doc = validate_token_document(doc)
    labels, vectors = [], []
    for entry in doc["tokens"]:
        labels.append(entry["label"])
        if "values" in entry:
            vectors.append(np.asarray(entry["values"], dtype=np.float64))
        else:
            vectors.append(np.mean(np.asarray(entry["words"], dtype=np.float64), axis=0))
    raw = np.stack(vectors) if vectors else np.zeros((0, doc["dim"]))
    lifted = False
    if doc["dim"] != expected_dim and raw.shape[0]:
        raw, lifted = project_embeddings(raw, expected_dim, seed)
    elif doc["dim"] != expected_dim:
        raw = np.zeros((0, expected_dim))
    return make_token_set(doc["modality"], raw, labels, meta={"source_dim": doc["dim"], "lifted": lifted})


def read_tokens(path, expected_dim: int, seed: int = 0) -> TokenSet:
    return token_set_from_document(read_token_file(path), expected_dim, seed)


def token_set_document(ts: TokenSet) -> dict:
    return {
        "dim": int(ts.dim),
        "modality": ts.modality,
        "tokens": [{"label": lab, "values": [float(x) for x in vec]} for lab, vec in zip(ts.labels, ts.tokens)],
    }


# ---------------------------------------------------------------- config


def read_config(path) -> FusionConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"config is not valid JSON: {exc}", getattr(exc, "pos", None)) from None
    return FusionConfig.from_dict(doc)


def write_config(path, cfg: FusionConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{os.fspath(path)} is not valid JSON: {exc}", getattr(exc, "pos", None)) from None


__all__ = [
    "ConfigError",
    "FormatError",
    "decode_volume",
    "encode_volume",
    "read_config",
    "read_token_file",
    "read_tokens",
    "read_volume",
    "token_set_document",
    "token_set_from_document",
    "write_config",
    "write_token_file",
    "write_volume",
]
