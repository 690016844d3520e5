"""Binary checkpoint container for parameter dictionaries.

Layout: magic, format version, a JSON header describing named blocks (name,
shape, byte offset, byte size) plus the owning config and metadata, then the
raw little-endian float64 payloads, and finally a sha256 digest of everything
before it. The digest is verified on load, so a truncated or edited file
fails loudly instead of producing silently wrong numbers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneParams
from .errors import IntegrityError
from .planner import PlannerConfig, PlannerParams

MAGIC = b"MDCP"
VERSION = 1

log = logging.getLogger(__name__)


def params_digest(blocks: dict[str, np.ndarray]) -> str:
    """Order-independent content digest of a parameter dict (hex sha256)."""
    h = hashlib.sha256()
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, blocks: dict[str, np.ndarray],
                    meta: dict | None = None) -> str:
    """Write the container; returns the file's content digest (hex)."""
    payloads = []
    index = []
    offset = 0
    for name in sorted(blocks):
        raw = np.ascontiguousarray(blocks[name], dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(blocks[name].shape),
                      "offset": offset, "size": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({
        "kind": kind,
        "config": config,
        "meta": meta or {},
        "blocks": index,
        "params_sha256": params_digest(blocks),
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(payloads)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def load_checkpoint(path, expect_kind: str | None = None):
    """Read and verify a container; returns (kind, config, blocks, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: content digest mismatch")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[12:12 + header_len])
    if expect_kind is not None and header["kind"] != expect_kind:
        raise IntegrityError(
            f"{path}: holds a {header['kind']!r} checkpoint, expected {expect_kind!r}"
        )
    payload = body[12 + header_len:]
    blocks = {}
    for entry in header["blocks"]:
        raw_block = payload[entry["offset"]:entry["offset"] + entry["size"]]
        if len(raw_block) != entry["size"]:
            raise IntegrityError(f"{path}: truncated block {entry['name']!r}")
        blocks[entry["name"]] = np.frombuffer(raw_block, dtype="<f8").reshape(
            entry["shape"]).astype(np.float64)
    if params_digest(blocks) != header["params_sha256"]:
        raise IntegrityError(f"{path}: parameter digest mismatch")
    n = sum(b.size for b in blocks.values())
    log.info("loaded %s checkpoint from %s: %d blocks, %d parameters",
             header["kind"], path, len(blocks), n)
    return header["kind"], header["config"], blocks, header["meta"]


# ---------------------------------------------------------------------------
# typed wrappers


def save_backbone(params: BackboneParams, path) -> str:
    return save_checkpoint(path, "backbone", params.config.to_dict(), params.blocks)


def load_backbone(path) -> BackboneParams:
    _, config, blocks, _ = load_checkpoint(path, expect_kind="backbone")
    return BackboneParams(config=BackboneConfig.from_dict(config), blocks=blocks)


def save_planner(params: PlannerParams, path) -> str:
    return save_checkpoint(path, "planner", params.config.to_dict(), params.blocks,
                           meta=params.meta)


def load_planner(path) -> PlannerParams:
    _, config, blocks, meta = load_checkpoint(path, expect_kind="planner")
    return PlannerParams(config=PlannerConfig.from_dict(config), blocks=blocks,
                         meta=meta)
