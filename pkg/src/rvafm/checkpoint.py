"""Binary checkpoints: a JSON manifest followed by raw little-endian tensor data.

Layout::

    8 bytes   magic  b"RVAFMCKP"
    4 bytes   format version (uint32, little-endian)
    8 bytes   manifest length M (uint64, little-endian)
    M bytes   UTF-8 JSON manifest (sorted keys)
    ...       payload; tensor offsets are relative to the payload start

The manifest holds the model config, the mode, the per-layer sublayer
counts, run metadata and a tensor table of name/dtype/shape/offset/nbytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attention import RvafmConfig
from .layers import EncoderConfig
from .model import ModelConfig, ModelParams

MAGIC = b"RVAFMCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
ALIGN = 8


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ManifestParseError(CheckpointError):
    pass


class CorruptOffsetsError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def config_to_dict(cfg: ModelConfig) -> dict:
    enc = asdict(cfg.encoder)
    enc["channels"] = list(enc["channels"])
    rv = asdict(cfg.rvafm)
    rv["dual_layers"] = list(rv["dual_layers"])
    return {"encoder": enc, "rvafm": rv, "symbols": list(cfg.symbols)}


def config_from_dict(d: dict) -> ModelConfig:
    enc = dict(d["encoder"])
    enc["channels"] = tuple(enc["channels"])
    return ModelConfig(EncoderConfig(**enc), RvafmConfig(**d["rvafm"]), tuple(d["symbols"]))


def to_bytes(m: ModelParams) -> bytes:
    table, chunks, offset = [], [], 0
    for name, t in sorted(m.tensors().items()):
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        pad = -len(raw) % ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(m.config),
        "mode": m.rvafm.mode,
        "nsl": m.rvafm.nsl_map(),
        "param_counts": m.param_counts(),
        "meta": m.meta,
        "payload_bytes": offset,
        "tensors": table,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(chunks)


def save_checkpoint(m: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(m))
    return path


def read_manifest(blob: bytes) -> tuple:
    """Validate the header and return ``(manifest, payload)``."""
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"file is {len(blob)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    end = _HEADER.size + length
    if end > len(blob):
        raise TruncatedPayloadError(f"manifest claims {length} bytes but only {len(blob) - _HEADER.size} remain")
    try:
        manifest = json.loads(blob[_HEADER.size: end].decode("utf-8"))
        if not isinstance(manifest, dict):
            raise ValueError("manifest is not an object")
        for key in ("format_version", "config", "mode", "tensors", "payload_bytes"):
            if key not in manifest:
                raise ValueError(f"missing key {key!r}")
    except (UnicodeDecodeError, ValueError) as exc:
        raise ManifestParseError(f"cannot parse checkpoint manifest: {exc}") from None
    if manifest["format_version"] != version:
        raise VersionMismatchError(f"header version {version} != manifest version {manifest['format_version']}")
    return manifest, blob[end:]


def _check_table(table: list, payload_len: int, declared: int) -> None:
    spans = []
    for entry in table:
        try:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            expected = count * np.dtype(entry["dtype"]).itemsize
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"bad tensor entry {entry!r}: {exc}") from None
        if off < 0 or nbytes != expected or off + nbytes > declared:
            raise CorruptOffsetsError(f"tensor {entry['name']!r}: offset {off}, {nbytes} bytes "
                                      f"(expected {expected}, payload {declared})")
        spans.append((off, off + nbytes, entry["name"]))
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise CorruptOffsetsError(f"tensors {name_a!r} and {name_b!r} overlap")
    if payload_len < declared:
        raise TruncatedPayloadError(f"payload has {payload_len} of {declared} bytes")


def from_bytes(blob: bytes) -> ModelParams:
    manifest, payload = read_manifest(blob)
    table = manifest["tensors"]
    _check_table(table, len(payload), int(manifest["payload_bytes"]))
    try:
        cfg = config_from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"bad model config in manifest: {exc}") from None
    if cfg.rvafm.mode != manifest["mode"]:
        raise ManifestParseError("manifest mode disagrees with its config")
    dtypes = {np.dtype(e["dtype"]).newbyteorder("=") for e in table}
    if len(dtypes) != 1:
        raise ManifestParseError(f"mixed tensor dtypes {sorted(map(str, dtypes))}")
    skeleton = ModelParams.init(cfg, seed=0, dtype=dtypes.pop())
    slots = skeleton.tensors()
    names = {e["name"] for e in table}
    if names != set(slots):
        missing, extra = sorted(set(slots) - names), sorted(names - set(slots))
        raise ManifestParseError(f"tensor table does not match config: missing {missing}, unexpected {extra}")
    for e in table:
        raw = np.frombuffer(payload, dtype=np.dtype(e["dtype"]).newbyteorder("<"), count=e["nbytes"] // np.dtype(
            e["dtype"]).itemsize, offset=e["offset"])
        slot = slots[e["name"]]
        if tuple(e["shape"]) != slot.shape:
            raise ManifestParseError(f"tensor {e['name']!r} has shape {e['shape']}, config implies {slot.shape}")
        slot.assign(raw.reshape(slot.shape))
    skeleton.meta = dict(manifest.get("meta") or {})
    return skeleton


def load_checkpoint(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
