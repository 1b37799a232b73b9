"""Teacher and student assemblies.

Notation: a stack written ``Y <- X`` takes its queries from modality X and its
keys/values from modality Y, so its attention maps are ``T_X x T_Y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, DataError
from .nn import AttentionTrace, Conv1d, Linear, Module, TransformerStack, sinusoidal_pos_emb
from .tensor import Tensor

MODALITIES = ("V", "A", "L")
MODALITY_NAMES = {"V": "video", "A": "audio", "L": "language"}
BRANCHES = ("complete", "video", "audio", "language")
BRANCH_QUERY = {"video": "V", "audio": "A", "language": "L"}
N_CLASSES = 7


@dataclass(frozen=True, order=True)
class TransformerId:
    kv: str
    query: str
    side: str  # "S" or "T"
    fusion: bool = False

    def __str__(self) -> str:
        if self.fusion:
            return f"F[{self.query}_{self.side}]"
        return f"{self.kv}_{self.side}<-{self.query}_{self.side}"

    def on(self, side: str) -> "TransformerId":
        return replace(self, side=side)

    @classmethod
    def parse(cls, text: str) -> "TransformerId":
        if text.startswith("F["):
            m, side = text[2:-1].split("_")
            return cls(m, m, side, True)
        left, right = text.split("<-")
        return cls(left[0], right[0], left[-1])


@dataclass(frozen=True)
class ModalityDims:
    length: int
    width: int


@dataclass
class NetworkConfig:
    d_model: int = 16
    n_heads: int = 4
    n_layers: int = 4
    ffn_mult: int = 4
    kernel: int = 3
    head_hidden: int | None = None
    dims: dict[str, ModalityDims] = field(
        default_factory=lambda: {
            "V": ModalityDims(24, 8),
            "A": ModalityDims(12, 12),
            "L": ModalityDims(6, 16),
        }
    )

    def __post_init__(self):
        self.dims = {
            k: v if isinstance(v, ModalityDims) else ModalityDims(*v) for k, v in self.dims.items()
        }
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise ConfigError("d_model, n_heads and n_layers must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for positional embeddings, got {self.d_model}")
        if set(self.dims) != set(MODALITIES):
            raise ConfigError(f"dims must declare exactly {MODALITIES}, got {sorted(self.dims)}")
        for m, d in self.dims.items():
            if d.length <= 0 or d.width <= 0:
                raise ConfigError(f"modality {m} needs positive length and width, got {d}")

    @classmethod
    def desk(cls, **kw) -> "NetworkConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "NetworkConfig":
        """Feature widths of the original dataset (35 action units, 74 acoustic, 300 word-vector)."""
        kw.setdefault("d_model", 40)
        kw.setdefault("n_heads", 8)
        kw.setdefault("n_layers", 4)
        kw.setdefault(
            "dims",
            {"V": ModalityDims(500, 35), "A": ModalityDims(500, 74), "L": ModalityDims(50, 300)},
        )
        return cls(**kw)

    @classmethod
    def preset(cls, name: str, **kw) -> "NetworkConfig":
        if name == "desk":
            return cls.desk(**kw)
        if name == "paper":
            return cls.paper(**kw)
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "ffn_mult": self.ffn_mult,
            "kernel": self.kernel,
            "head_hidden": self.head_hidden,
            "dims": {m: [d.length, d.width] for m, d in self.dims.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["dims"] = {m: ModalityDims(*v) for m, v in d["dims"].items()}
        return cls(**d)


@dataclass
class ForwardTrace:
    logits: Tensor
    final_feat: Tensor
    penultimate_feat: Tensor
    traces: dict[TransformerId, AttentionTrace]


def _branch_specs(query: str) -> list[tuple[str, str]]:
    return [(kv, query) for kv in MODALITIES if kv != query]


def _complete_specs() -> list[tuple[str, str]]:
    return [s for q in MODALITIES for s in _branch_specs(q)]


STUDENT_SPECS = {
    2: [("V", "V"), ("A", "V"), ("L", "V")],
    3: [("V", "V"), ("V", "L"), ("A", "L")],
    4: [("V", "V"), ("V", "A"), ("L", "A")],
    5: [("V", "V"), ("V", "L"), ("V", "A")],
}

TEACHER_FOR_CONFIG = {1: "complete", 2: "video", 3: "language", 4: "audio", 5: "complete"}


def _check_config_id(config: int) -> None:
    if config not in (1, 2, 3, 4, 5):
        raise ConfigError(f"student configuration must be 1..5, got {config!r}")


def pair_map(config: int) -> list[tuple[TransformerId, TransformerId]]:
    """(student stack, teacher stack) pairs distilled under a configuration."""
    _check_config_id(config)
    if config == 1:
        ids = [TransformerId(kv, q, "S") for kv, q in _complete_specs()]
        ids += [TransformerId(q, q, "S", fusion=True) for q in MODALITIES]
    else:
        ids = [TransformerId(kv, q, "S") for kv, q in STUDENT_SPECS[config] if kv != q]
    return [(i, i.on("T")) for i in ids]


class Network(Module):
    """Conv1D front-ends, cross/self stacks, optional per-branch fusion stacks, two-layer head."""

    def __init__(
        self,
        role: str,
        variant: str | int,
        cfg: NetworkConfig,
        seed: int,
        specs: list[tuple[str, str]],
        fusion_queries: list[str],
        strides: dict[str, int] | None = None,
    ):
        rng = np.random.default_rng(seed)
        self.role, self.variant, self.cfg, self.seed = role, variant, cfg, seed
        side = "T" if role == "teacher" else "S"
        d = cfg.d_model
        self.inputs = list(MODALITIES) if role == "teacher" else ["V"]
        self.strides = strides or {m: 1 for m in MODALITIES}
        self.front_ends = {}
        for m in MODALITIES:
            d_in = cfg.dims[m if role == "teacher" else "V"].width
            self.front_ends[m] = Conv1d(d_in, d, rng, kernel=cfg.kernel, stride=self.strides[m])
        self.stack_ids = [TransformerId(kv, q, side) for kv, q in specs]
        self.stacks = {
            str(i): TransformerStack(d, cfg.n_heads, cfg.n_layers, rng, cfg.ffn_mult) for i in self.stack_ids
        }
        self.fusion_ids = [TransformerId(q, q, side, fusion=True) for q in fusion_queries]
        self.fusion_proj = {str(i): Linear(2 * d, d, rng) for i in self.fusion_ids}
        self.fusion = {
            str(i): TransformerStack(d, cfg.n_heads, cfg.n_layers, rng, cfg.ffn_mult) for i in self.fusion_ids
        }
        n_out = len(self.fusion_ids) if self.fusion_ids else len(self.stack_ids)
        head_in = n_out * d
        hidden = cfg.head_hidden or head_in
        self.head_hidden = Linear(head_in, hidden, rng)
        self.head_out = Linear(hidden, N_CLASSES, rng)
        self._pe: dict[int, Tensor] = {}

    @property
    def side(self) -> str:
        return "T" if self.role == "teacher" else "S"

    @property
    def all_ids(self) -> list[TransformerId]:
        return self.stack_ids + self.fusion_ids

    def seq_lengths(self) -> dict[str, int]:
        if self.role == "teacher":
            return {m: self.cfg.dims[m].length for m in MODALITIES}
        t_v = self.cfg.dims["V"].length
        return {m: T.conv1d_out_len(t_v, self.cfg.kernel, self.strides[m], "same") for m in MODALITIES}

    def _pos(self, length: int) -> Tensor:
        pe = self._pe.get(length)
        if pe is None:
            dtype = self.head_out.weight.dtype
            pe = Tensor(sinusoidal_pos_emb(length, self.cfg.d_model).data, dtype=dtype)
            self._pe[length] = pe
        return pe

    def forward(self, batch: dict[str, np.ndarray | Tensor]) -> ForwardTrace:
        dtype = self.head_out.weight.dtype
        xs = {}
        for m in self.inputs:
            if m not in batch:
                raise DataError(f"batch is missing modality {m} ({MODALITY_NAMES[m]})")
            x = batch[m]
            xs[m] = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=dtype))
        seqs = {}
        for m in MODALITIES:
            x = xs[m] if self.role == "teacher" else xs["V"]
            h = self.front_ends[m](x)
            seqs[m] = h + self._pos(h.shape[-2])

        traces: dict[TransformerId, AttentionTrace] = {}
        outs: dict[TransformerId, Tensor] = {}
        for sid in self.stack_ids:
            kv = None if sid.kv == sid.query else seqs[sid.kv]
            outs[sid], traces[sid] = self.stacks[str(sid)](seqs[sid.query], kv)

        if self.fusion_ids:
            lasts = []
            for fid in self.fusion_ids:
                parts = [outs[s] for s in self.stack_ids if s.query == fid.query]
                fused = self.fusion_proj[str(fid)](T.concat(parts, axis=-1))
                y, traces[fid] = self.fusion[str(fid)](fused)
                lasts.append(y[:, -1, :])
        else:
            lasts = [outs[s][:, -1, :] for s in self.stack_ids]

        h = T.concat(lasts, axis=-1) if len(lasts) > 1 else lasts[0]
        penult = self.head_hidden(h)
        logits = self.head_out(T.relu(penult))
        return ForwardTrace(logits=logits, final_feat=logits, penultimate_feat=penult, traces=traces)

    __call__ = forward


def build_teacher(branch: str, cfg: NetworkConfig, seed: int) -> Network:
    if branch not in BRANCHES:
        raise ConfigError(f"teacher branch must be one of {BRANCHES}, got {branch!r}")
    if branch == "complete":
        specs, fusion = _complete_specs(), list(MODALITIES)
    else:
        q = BRANCH_QUERY[branch]
        specs, fusion = _branch_specs(q), [q]
    return Network("teacher", branch, cfg, seed, specs, fusion)


def student_strides(cfg: NetworkConfig, alignment: str = "S_down") -> dict[str, int]:
    """Front-end strides: under S_down the A/L proxies are shortened to the teacher's lengths."""
    if alignment != "S_down":
        return {m: 1 for m in MODALITIES}
    t_v = cfg.dims["V"].length
    strides = {"V": 1}
    for m in ("A", "L"):
        t_m = cfg.dims[m].length
        if t_m > t_v or t_v % t_m:
            raise AlignmentError(
                f"cannot downsample video length {t_v} to {MODALITY_NAMES[m]} length {t_m} "
                "with an integer stride"
            )
        strides[m] = t_v // t_m
    return strides


def build_student(config: int, cfg: NetworkConfig, seed: int, alignment: str = "S_down") -> Network:
    _check_config_id(config)
    if alignment not in ("S_down", "T_up", "none"):
        raise ConfigError(f"alignment must be S_down, T_up or none, got {alignment!r}")
    strides = student_strides(cfg, alignment)
    if config == 1:
        specs, fusion = _complete_specs(), list(MODALITIES)
    else:
        specs, fusion = STUDENT_SPECS[config], []
    net = Network("student", config, cfg, seed, specs, fusion, strides=strides)
    net.alignment = alignment
    return net


def param_count(net: Module) -> int:
    return net.num_parameters()


def closed_form_param_count(net: Network) -> dict[str, int]:
    """Parameter totals per component, derived from the configuration alone."""
    cfg = net.cfg
    d, r, l_ = cfg.d_model, cfg.ffn_mult, cfg.n_layers
    layer = 2 * 2 * d + (d * d + d) + d * d + 2 * (d * d + d) + (d * r * d + r * d) + (r * d * d + d)
    widths = {m: cfg.dims[m if net.role == "teacher" else "V"].width for m in MODALITIES}
    n_out = len(net.fusion_ids) or len(net.stack_ids)
    head_in = n_out * d
    hidden = cfg.head_hidden or head_in
    return {
        "front_ends": sum(cfg.kernel * w * d for w in widths.values()),
        "stacks": len(net.stack_ids) * l_ * layer,
        "fusion": len(net.fusion_ids) * (l_ * layer + 2 * d * d + d),
        "head": head_in * hidden + hidden + hidden * N_CLASSES + N_CLASSES,
    }


def component_param_counts(net: Network) -> dict[str, int]:
    groups = {"front_ends": 0, "stacks": 0, "fusion": 0, "head": 0}
    for name, p in net.named_parameters().items():
        top = name.split(".")[0]
        key = {"fusion_proj": "fusion", "head_hidden": "head", "head_out": "head"}.get(top, top)
        groups[key] += p.data.size
    return groups
