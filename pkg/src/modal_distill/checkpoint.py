"""Network checkpoints: a JSON manifest followed by one little-endian float32 parameter blob.

Layout::

    b"MMKC" | version u8 | manifest length u32 | manifest (UTF-8 JSON) | blob

The manifest lists every parameter's name, shape and byte offset into the blob,
plus what is needed to rebuild the network (role, variant, alignment, network
config) and a hash of that description.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigHashError, FormatError, ManifestError, PersistenceError, TruncatedError
from .networks import Network, NetworkConfig, build_student, build_teacher

MAGIC = b"MMKC"
VERSION = 1
_HEADER = struct.Struct("<4sBI")


def describe(net: Network) -> dict:
    return {
        "role": net.role,
        "variant": net.variant,
        "alignment": getattr(net, "alignment", None),
        "network": net.cfg.to_dict(),
    }


def config_hash(description: dict) -> str:
    canon = json.dumps(description, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_checkpoint(net: Network, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    desc = describe(net)
    entries, chunks, offset = [], [], 0
    for name, p in net.named_parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        **desc,
        "config_hash": config_hash(desc),
        "seed": net.seed,
        "params": entries,
        "blob_bytes": offset,
        "extra": extra or {},
    }
    body = json.dumps(manifest).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(body)))
            fh.write(body)
            for c in chunks:
                fh.write(c)
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise PersistenceError(f"checkpoint {path} does not exist") from e
    except OSError as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, n = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    end = _HEADER.size + n
    if len(raw) < end:
        raise TruncatedError(f"{path}: manifest truncated ({len(raw) - _HEADER.size} of {n} bytes)")
    try:
        manifest = json.loads(raw[_HEADER.size : end].decode("utf-8"))
        need = ("role", "variant", "network", "config_hash", "params", "blob_bytes")
        missing = [k for k in need if k not in manifest]
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as e:
        raise ManifestError(f"{path}: manifest is not valid JSON ({e})") from e
    if missing:
        raise ManifestError(f"{path}: manifest lacks {missing}")
    blob = raw[end:]
    if len(blob) < manifest["blob_bytes"]:
        raise TruncatedError(f"{path}: parameter blob has {len(blob)} of {manifest['blob_bytes']} bytes")
    if len(blob) != manifest["blob_bytes"]:
        raise ManifestError(f"{path}: {len(blob) - manifest['blob_bytes']} trailing bytes after blob")
    return manifest, blob


def _rebuild(manifest: dict) -> Network:
    try:
        cfg = NetworkConfig.from_dict(manifest["network"])
    except (TypeError, KeyError) as e:
        raise ManifestError(f"manifest network config unreadable: {e}") from e
    seed = int(manifest.get("seed") or 0)
    if manifest["role"] == "teacher":
        return build_teacher(manifest["variant"], cfg, seed)
    return build_student(int(manifest["variant"]), cfg, seed, manifest.get("alignment") or "S_down")


def load_checkpoint(path: str | Path, expect: NetworkConfig | None = None, force: bool = False) -> Network:
    """Rebuild the network described by the manifest and fill in its parameters.

    A hash mismatch, either between the stored description and its stored hash
    or against ``expect``, raises ConfigHashError unless ``force`` is set.
    """
    manifest, blob = read_manifest(path)
    desc = {k: manifest.get(k) for k in ("role", "variant", "alignment", "network")}
    if not force:
        if config_hash(desc) != manifest["config_hash"]:
            raise ConfigHashError(f"{path}: stored config hash does not match stored config")
        if expect is not None and expect.to_dict() != manifest["network"]:
            raise ConfigHashError(
                f"{path}: checkpoint network config (hash {manifest['config_hash'][:12]}) differs from expected"
            )
    net = _rebuild(manifest)
    params = dict(net.named_parameters())
    listed = {e["name"] for e in manifest["params"]}
    if listed != set(params):
        raise ManifestError(
            f"{path}: parameter names differ from the rebuilt network "
            f"(missing {sorted(set(params) - listed)[:3]}, unexpected {sorted(listed - set(params))[:3]})"
        )
    for e in manifest["params"]:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape or e["nbytes"] != 4 * p.data.size:
            raise ManifestError(f"{path}: {e['name']} shape {e['shape']} does not fit network shape {p.shape}")
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise TruncatedError(f"{path}: {e['name']} runs past end of blob")
        p.data[...] = np.frombuffer(chunk, dtype="<f4").reshape(p.shape)
    return net
