"""Synthetic multimodal sequences, label discretisation, and the on-disk dataset format.

Directory layout::

    meta.json       modality names, lengths, widths, N, seed
    <name>.bin      one per modality, float32 little-endian, row-major (N, T, D)
    labels.bin      float32 little-endian (N,)
    manifest.bin    b"MMKD" + version byte + file listing (name, byte length)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ManifestError, PersistenceError, ShapeError, TruncatedError

MAGIC = b"MMKD"
VERSION = 1
N_CLASSES = 7
DEFAULT_MODALITIES = {"V": ("video", 24, 8), "A": ("audio", 12, 12), "L": ("language", 6, 16)}


def discretize_label(y) -> np.ndarray | int:
    """Round half away from zero, clamp to [-3, 3], shift to a class index 0..6."""
    arr = np.asarray(y, dtype=np.float64)
    if np.isnan(arr).any():
        raise DataError("cannot discretize NaN label")
    cls = np.clip(np.sign(arr) * np.floor(np.abs(arr) + 0.5), -3, 3).astype(np.int64) + 3
    return int(cls) if cls.ndim == 0 else cls


@dataclass
class DatasetMeta:
    names: dict[str, str]
    lengths: dict[str, int]
    widths: dict[str, int]
    n: int
    n_classes: int = N_CLASSES
    seed: int | None = None

    def to_json(self) -> dict:
        return {
            "modalities": [
                {"key": k, "name": self.names[k], "length": self.lengths[k], "width": self.widths[k]}
                for k in self.names
            ],
            "n": self.n,
            "n_classes": self.n_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        try:
            mods = d["modalities"]
            return cls(
                names={m["key"]: m["name"] for m in mods},
                lengths={m["key"]: int(m["length"]) for m in mods},
                widths={m["key"]: int(m["width"]) for m in mods},
                n=int(d["n"]),
                n_classes=int(d.get("n_classes", N_CLASSES)),
                seed=d.get("seed"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed meta.json: {e}") from e


@dataclass
class MultimodalDataset:
    modalities: dict[str, np.ndarray]
    labels: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        n = self.labels.shape[0]
        for k, arr in self.modalities.items():
            if arr.shape[0] != n:
                raise ShapeError(f"modality {k} has {arr.shape[0]} samples but labels have {n}")
        if n and (np.abs(self.labels) > 3).any():
            raise DataError("labels must lie in [-3, 3]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return discretize_label(self.labels)

    def subset(self, idx: np.ndarray) -> "MultimodalDataset":
        idx = np.asarray(idx)
        meta = DatasetMeta(**{**self.meta.__dict__, "n": len(idx)})
        return MultimodalDataset({k: v[idx] for k, v in self.modalities.items()}, self.labels[idx], meta)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.modalities.items()}


@dataclass
class SyntheticSpec:
    """Latent-factor generator: every modality observes the same latent through its own mixing plus noise.

    Labels are ``clip(label_scale * <w, z> + skew, -3, 3)``; ``noise`` is the
    per-modality standard deviation (video twice the others by default, so the
    video-only task is the hardest).
    """

    n: int = 2000
    latent: int = 4
    seed: int = 0
    noise: dict[str, float] = field(default_factory=lambda: {"V": 2.0, "A": 1.0, "L": 1.0})
    lengths: dict[str, int] = field(default_factory=lambda: {k: v[1] for k, v in DEFAULT_MODALITIES.items()})
    widths: dict[str, int] = field(default_factory=lambda: {k: v[2] for k, v in DEFAULT_MODALITIES.items()})
    label_scale: float = 1.5
    skew: float = 0.0
    modulation: float = 0.5

    def validate(self) -> None:
        keys = set(DEFAULT_MODALITIES)
        for name in ("noise", "lengths", "widths"):
            got = getattr(self, name)
            if set(got) != keys:
                raise DataError(f"spec field {name!r} must have keys {sorted(keys)}, got {sorted(got)}")
        if self.n < 1 or self.latent < 1:
            raise DataError("spec fields 'n' and 'latent' must be positive")
        if any(s < 0 for s in self.noise.values()):
            raise DataError("spec field 'noise' must be non-negative")
        if any(v < 1 for v in [*self.lengths.values(), *self.widths.values()]):
            raise DataError("spec fields 'lengths' and 'widths' must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise DataError(f"unknown spec field(s): {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


def generate_synthetic(spec: SyntheticSpec) -> MultimodalDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.latent
    w = rng.normal(size=k)
    w /= np.linalg.norm(w)
    mixing = {m: rng.normal(size=(k, spec.widths[m])) for m in DEFAULT_MODALITIES}
    phase = {m: rng.uniform(0, 2 * math.pi) for m in DEFAULT_MODALITIES}
    z = rng.normal(size=(spec.n, k))
    labels = np.clip(spec.label_scale * (z @ w) + spec.skew, -3, 3).astype(np.float32)
    mods = {}
    for m in DEFAULT_MODALITIES:
        t_m = spec.lengths[m]
        gain = 1.0 + spec.modulation * np.sin(2 * math.pi * np.arange(t_m) / t_m + phase[m])
        clean = gain[None, :, None] * (z @ mixing[m])[:, None, :]
        noise = spec.noise[m] * rng.normal(size=clean.shape)
        mods[m] = (clean + noise).astype(np.float32)
    meta = DatasetMeta(
        names={m: v[0] for m, v in DEFAULT_MODALITIES.items()},
        lengths=dict(spec.lengths),
        widths=dict(spec.widths),
        n=spec.n,
        seed=spec.seed,
    )
    return MultimodalDataset(mods, labels, meta)


def split(ds: MultimodalDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into disjoint, exhaustive train/val/test subsets."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    sizes = (n_train, n_val, n - n_train - n_val)
    if min(sizes) < 1:
        raise DataError(f"split of {n} samples by {tuple(fractions)} leaves an empty part {sizes}")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(ds.subset(np.sort(part)) for part in np.split(perm, cuts))


# persistence ---------------------------------------------------------------


def _write_manifest(path: Path, entries: list[tuple[str, int]]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<BI", VERSION, len(entries))
    for name, nbytes in entries:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", nbytes)
    path.write_bytes(bytes(buf))


def _read_manifest(path: Path) -> dict[str, int]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise ManifestError(f"missing manifest {path}") from e
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 9:
        raise ManifestError(f"{path}: manifest header truncated")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off, entries = 9, {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + ln].decode("utf-8")
            (nbytes,) = struct.unpack_from("<Q", raw, off + 2 + ln)
            entries[name] = nbytes
            off += 2 + ln + 8
    except (struct.error, UnicodeDecodeError) as e:
        raise ManifestError(f"{path}: corrupt file listing ({e})") from e
    if off != len(raw):
        raise ManifestError(f"{path}: {len(raw) - off} trailing bytes after listing")
    return entries


def save_dataset(ds: MultimodalDataset, path: str | Path) -> Path:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        files: dict[str, bytes] = {}
        files["meta.json"] = json.dumps(ds.meta.to_json(), indent=2).encode("utf-8")
        for k, arr in ds.modalities.items():
            files[f"{ds.meta.names[k]}.bin"] = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        files["labels.bin"] = np.ascontiguousarray(ds.labels, dtype="<f4").tobytes()
        for name, raw in files.items():
            (root / name).write_bytes(raw)
        _write_manifest(root / "manifest.bin", [(n, len(b)) for n, b in files.items()])
    except OSError as e:
        raise PersistenceError(f"cannot write dataset to {root}: {e}") from e
    return root


def _read_checked(root: Path, name: str, listing: dict[str, int]) -> bytes:
    if name not in listing:
        raise ManifestError(f"manifest does not list {name}")
    try:
        raw = (root / name).read_bytes()
    except FileNotFoundError as e:
        raise TruncatedError(f"{name} listed in manifest but missing") from e
    if len(raw) < listing[name]:
        raise TruncatedError(f"{name}: {len(raw)} bytes, manifest lists {listing[name]}")
    if len(raw) != listing[name]:
        raise ManifestError(f"{name}: {len(raw)} bytes, manifest lists {listing[name]}")
    return raw


def load_dataset(path: str | Path) -> MultimodalDataset:
    root = Path(path)
    if not root.is_dir():
        raise PersistenceError(f"dataset directory {root} does not exist")
    listing = _read_manifest(root / "manifest.bin")
    try:
        meta = DatasetMeta.from_json(json.loads(_read_checked(root, "meta.json", listing).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"meta.json is not valid JSON: {e}") from e
    mods = {}
    for k, name in meta.names.items():
        raw = _read_checked(root, f"{name}.bin", listing)
        per = meta.lengths[k] * meta.widths[k]
        if len(raw) != meta.n * per * 4:
            raise ShapeError(
                f"{name}.bin holds {len(raw) // 4} values, meta expects N={meta.n} x {meta.lengths[k]} x {meta.widths[k]}"
            )
        mods[k] = np.frombuffer(raw, dtype="<f4").reshape(meta.n, meta.lengths[k], meta.widths[k]).astype(np.float32)
    raw = _read_checked(root, "labels.bin", listing)
    if len(raw) != meta.n * 4:
        raise ShapeError(f"labels.bin holds {len(raw) // 4} labels, meta expects N={meta.n}")
    labels = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return MultimodalDataset(mods, labels, meta)
