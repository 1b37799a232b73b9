"""Distillation losses: contrastive (CRD) at four sites, EDAM on attention maps, and the composite objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, ParameterError
from .networks import ForwardTrace, Network, TransformerId, pair_map
from .nn import AttentionTrace, Linear, Module
from .tensor import Tensor

METHODS = (
    "none",
    "crd_final",
    "crd_penultimate",
    "crd_postattn",
    "crd_attnmap",
    "edam_s_down",
    "edam_t_up",
)

Pairs = list[tuple[TransformerId, TransformerId]]
Traces = dict[TransformerId, AttentionTrace]


@dataclass
class DistillLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    t: float = 1.0
    tau: float = 0.1
    d_crd: int = 32
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if not self.t > 0 or not self.tau > 0:
            raise ParameterError(f"temperatures must be > 0, got t={self.t}, tau={self.tau}")
        if self.d_crd < 1:
            raise ParameterError(f"d_crd must be positive, got {self.d_crd}")


@dataclass
class LossBreakdown:
    L_c: Tensor
    L_KD: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {"L_c": self.L_c.item(), "L_KD": self.L_KD.item(), "total": self.total.item()}


def total_loss(L_c: Tensor, L_KD: Tensor, alpha: float, beta: float) -> LossBreakdown:
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ParameterError(f"loss weights must lie in [0, 1], got alpha={alpha}, beta={beta}")
    return LossBreakdown(L_c, L_KD, L_c * alpha + L_KD * beta)


# contrastive ---------------------------------------------------------------


def crd_loss(s: Tensor, t_pos: Tensor, t_negs: Tensor, tau: float) -> Tensor:
    """Contrastive loss of one student embedding against its positive and N negatives (all unit-norm)."""
    if t_negs.ndim != 2 or t_negs.shape[0] < 1:
        raise ParameterError("crd_loss needs at least one negative")
    cand = T.concat([t_pos.reshape(1, -1), t_negs], axis=0)
    logits = s.reshape(1, -1) @ cand.T * (1.0 / tau)
    return T.cross_entropy_logits(logits, np.zeros(1, dtype=np.int64))


def batch_crd(s_emb: Tensor, t_emb: Tensor, tau: float) -> Tensor:
    """In-batch contrastive loss over (..., B, d) embeddings; sample i's positive is teacher i.

    Equals the mean of :func:`crd_loss` over samples (and leading groups) with the
    other B-1 teacher embeddings as negatives.
    """
    b = s_emb.shape[-2]
    if b < 2:
        raise ConfigError(f"contrastive distillation needs batch size >= 2, got {b}")
    logits = (s_emb @ t_emb.T) * (1.0 / tau)
    lead = int(np.prod(logits.shape[:-2], dtype=np.int64))
    labels = np.tile(np.arange(b), lead)
    return T.cross_entropy_logits(logits.reshape(lead * b, b), labels)


class CrdProjection(Module):
    """Student- and teacher-side affine embeddings followed by unit-norm scaling."""

    def __init__(self, d_student: int, d_teacher: int, d_crd: int, rng: np.random.Generator):
        self.student = Linear(d_student, d_crd, rng)
        self.teacher = Linear(d_teacher, d_crd, rng)

    def embed(self, x: Tensor, side: str) -> Tensor:
        lin = self.student if side == "S" else self.teacher
        return T.l2_normalize(lin(x))


def kd_layer_crd(site: str, s_trace: ForwardTrace, t_trace: ForwardTrace, proj: CrdProjection, cfg: DistillLossConfig) -> Tensor:
    """CRD on the final (logit) or penultimate head layer."""
    if site == "final":
        s, t = s_trace.final_feat, t_trace.final_feat
    elif site == "penultimate":
        s, t = s_trace.penultimate_feat, t_trace.penultimate_feat
    else:
        raise ConfigError(f"site must be 'final' or 'penultimate', got {site!r}")
    if s.shape[0] < 2:
        raise ConfigError(f"contrastive distillation needs batch size >= 2, got {s.shape[0]}")
    return batch_crd(proj.embed(s, "S"), proj.embed(t, "T"), cfg.tau)


def _layer_lists(pair, s_traces: Traces, t_traces: Traces):
    sid, tid = pair
    s_tr, t_tr = s_traces[sid], t_traces[tid]
    if len(s_tr) != len(t_tr):
        raise ConfigError(f"{sid} has {len(s_tr)} layers but {tid} has {len(t_tr)}")
    return s_tr, t_tr


def _mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for x in terms[1:]:
        acc = acc + x
    return acc * (1.0 / len(terms))


def kd_postattn_crd(pairs: Pairs, s_traces: Traces, t_traces: Traces, proj: dict[str, CrdProjection], cfg: DistillLossConfig) -> Tensor:
    """CRD between time-pooled post-attention features, averaged over layers then pairs."""
    per_pair = []
    for pair in pairs:
        s_tr, t_tr = _layer_lists(pair, s_traces, t_traces)
        p = proj[str(pair[0])]
        layers = [
            batch_crd(p.embed(T.mean(s, axis=1), "S"), p.embed(T.mean(t, axis=1), "T"), cfg.tau)
            for s, t in zip(s_tr.post_attention, t_tr.post_attention)
        ]
        per_pair.append(_mean(layers))
    return _mean(per_pair)


def _check_aligned(pair, s_map: Tensor, t_map: Tensor) -> None:
    if s_map.shape != t_map.shape:
        raise AlignmentError(
            f"attention maps of {pair[0]} {s_map.shape} and {pair[1]} {t_map.shape} are not aligned"
        )


def kd_attnmap_crd(
    pairs: Pairs,
    s_traces: Traces,
    t_traces: Traces,
    proj: dict[str, CrdProjection],
    align: "AlignmentPlan",
    cfg: DistillLossConfig,
) -> Tensor:
    """Row-wise CRD on attention maps: each map row is embedded; averaged over rows and layers, then pairs."""
    aligned = align_attention(pairs, align, t_traces)
    per_pair = []
    for pair in pairs:
        s_tr, _ = _layer_lists(pair, s_traces, t_traces)
        p = proj[str(pair[0])]
        layers = []
        for s_map, t_map in zip(s_tr.maps, aligned[pair[1]]):
            _check_aligned(pair, s_map, t_map)
            # (B, m, n) -> (m, B, n): negatives are the same row of other samples
            s_emb = p.embed(s_map.transpose(1, 0, 2), "S")
            t_emb = p.embed(t_map.transpose(1, 0, 2), "T")
            layers.append(batch_crd(s_emb, t_emb, cfg.tau))
        per_pair.append(_mean(layers))
    return _mean(per_pair)


# EDAM ----------------------------------------------------------------------


def row_cross_entropy(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """F(a, b) = -sum_k a_k log(b_k + eps) for every row; returns shape a.shape[:-1]."""
    return -T.tsum(T.mul(a, T.log(b, floor=eps)), axis=-1)


def edam_loss(
    pairs: Pairs,
    s_traces: Traces,
    t_traces: Traces,
    align: "AlignmentPlan",
    t: float,
    cfg: DistillLossConfig,
) -> Tensor:
    """Teacher rows are the target distribution, student rows the estimate; mean over rows, layers, pairs."""
    if not t > 0:
        raise ParameterError(f"EDAM temperature must be > 0, got {t}")
    aligned = align_attention(pairs, align, t_traces, t=t)
    per_pair = []
    for pair in pairs:
        s_tr, _ = _layer_lists(pair, s_traces, t_traces)
        layers = []
        for s_map, t_map in zip(s_tr.maps_at(t), aligned[pair[1]]):
            _check_aligned(pair, s_map, t_map)
            layers.append(T.mean(row_cross_entropy(t_map, s_map, cfg.eps)))
        per_pair.append(_mean(layers))
    return _mean(per_pair)


# alignment -----------------------------------------------------------------


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_in, n_out) linear-interpolation weights; every column sums to one."""
    w = np.zeros((n_in, n_out))
    for j in range(n_out):
        src = min(max((j + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[lo, j] += 1.0 - frac
        w[hi, j] += frac
    return w


class MapUpsampler(Module):
    """Learned affine resampling of a teacher map: rows (m_T -> m_S) and columns (n_T -> n_S)."""

    def __init__(self, teacher_shape: tuple[int, int], student_shape: tuple[int, int]):
        (mt, nt), (ms, ns) = teacher_shape, student_shape
        self.rows = Tensor(interpolation_matrix(mt, ms).T, requires_grad=True, name="rows")
        self.cols = Tensor(interpolation_matrix(nt, ns), requires_grad=True, name="cols")

    def __call__(self, m: Tensor, floor: float = 1e-8) -> Tensor:
        up = self.rows @ m @ self.cols
        return T.normalize_rows(T.relu(up), floor=floor)


@dataclass
class AlignmentPlan:
    mode: str = "S_down"
    upsamplers: dict[str, MapUpsampler] | None = None

    def __post_init__(self):
        if self.mode not in ("S_down", "T_up", "none"):
            raise ConfigError(f"alignment mode must be S_down, T_up or none, got {self.mode!r}")
        if self.mode == "T_up" and not self.upsamplers:
            raise ConfigError("T_up alignment needs per-pair upsamplers")


def align_attention(pairs: Pairs, plan: AlignmentPlan, traces: Traces, t: float = 1.0) -> dict[TransformerId, list[Tensor]]:
    """Teacher maps per pair, brought to the student's shape when the plan upsamples.

    Under S_down and none the student front-ends already produce matching
    lengths, so maps pass through unchanged.
    """
    out = {}
    for sid, tid in pairs:
        maps = traces[tid].maps_at(t)
        if plan.mode == "T_up":
            up = plan.upsamplers[str(sid)]
            maps = [up(m) for m in maps]
        out[tid] = maps
    return out


# wiring --------------------------------------------------------------------


def map_shape(net: Network, sid: TransformerId) -> tuple[int, int]:
    lengths = net.seq_lengths()
    if sid.fusion:
        return lengths[sid.query], lengths[sid.query]
    return lengths[sid.query], lengths[sid.kv]


class Distiller(Module):
    """Trainable side of a distillation run (projections, upsamplers) plus the loss for one method."""

    def __init__(self, method: str, config: int, student: Network, teacher: Network, cfg: DistillLossConfig, seed: int = 0):
        if method not in METHODS or method == "none":
            raise ConfigError(f"unknown distillation method {method!r}")
        rng = np.random.default_rng([seed, 7919])
        self.method, self.cfg = method, cfg
        self.pairs = pair_map(config)
        d = student.cfg.d_model
        self.proj: dict[str, CrdProjection] = {}
        self.plan = AlignmentPlan("S_down")
        if method == "crd_final":
            self.proj["head"] = CrdProjection(student.head_out.d_out, teacher.head_out.d_out, cfg.d_crd, rng)
        elif method == "crd_penultimate":
            self.proj["head"] = CrdProjection(student.head_hidden.d_out, teacher.head_hidden.d_out, cfg.d_crd, rng)
        elif method == "crd_postattn":
            for sid, _ in self.pairs:
                self.proj[str(sid)] = CrdProjection(d, teacher.cfg.d_model, cfg.d_crd, rng)
        elif method == "crd_attnmap":
            for sid, tid in self.pairs:
                n_s, n_t = map_shape(student, sid)[1], map_shape(teacher, tid)[1]
                self.proj[str(sid)] = CrdProjection(n_s, n_t, cfg.d_crd, rng)
        if method in ("crd_attnmap", "edam_s_down"):
            for sid, tid in self.pairs:
                if map_shape(student, sid) != map_shape(teacher, tid):
                    raise AlignmentError(
                        f"{sid} map {map_shape(student, sid)} does not match {tid} map "
                        f"{map_shape(teacher, tid)}; build the student with S_down strides"
                    )
        if method == "edam_t_up":
            ups = {str(sid): MapUpsampler(map_shape(teacher, tid), map_shape(student, sid)) for sid, tid in self.pairs}
            self.plan = AlignmentPlan("T_up", ups)
            self.upsamplers = ups

    def kd_loss(self, s: ForwardTrace, t: ForwardTrace) -> Tensor:
        m, cfg = self.method, self.cfg
        if m == "crd_final":
            return kd_layer_crd("final", s, t, self.proj["head"], cfg)
        if m == "crd_penultimate":
            return kd_layer_crd("penultimate", s, t, self.proj["head"], cfg)
        if m == "crd_postattn":
            return kd_postattn_crd(self.pairs, s.traces, t.traces, self.proj, cfg)
        if m == "crd_attnmap":
            return kd_attnmap_crd(self.pairs, s.traces, t.traces, self.proj, self.plan, cfg)
        return edam_loss(self.pairs, s.traces, t.traces, self.plan, cfg.t, cfg)
