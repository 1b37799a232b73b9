"""Optimisation loop with frozen-teacher distillation, plateau LR decay, and classification metrics."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import N_CLASSES, MultimodalDataset
from .distill import Distiller, DistillLossConfig, total_loss
from .errors import ConfigError, DataError
from .networks import ForwardTrace, Network
from .nn import AttentionTrace
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    patience: int = 10
    factor: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    method: str = "none"
    config: int | None = None
    kd: DistillLossConfig = field(default_factory=DistillLossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch and lr must be positive")
        if not 0 < self.factor < 1:
            raise ConfigError(f"scheduler factor must lie in (0, 1), got {self.factor}")
        self.betas = tuple(self.betas)
        if isinstance(self.kd, dict):
            self.kd = DistillLossConfig(**self.kd)


class Adam:
    """Adaptive-moment optimiser over one flat parameter buffer.

    Parameter arrays are rebound to views of the buffer so a step is a handful
    of vector operations regardless of how many tensors the network has.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        dtypes = {p.data.dtype for p in params.values()}
        dtype = dtypes.pop() if len(dtypes) == 1 else np.float64
        self.flat = np.concatenate([p.data.ravel() for p in params.values()]).astype(dtype)
        off = 0
        for p in params.values():
            n = p.data.size
            p.data = self.flat[off : off + n].reshape(p.data.shape)
            off += n
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def step(self, grads: dict[str, np.ndarray], max_norm: float | None = None) -> float:
        """Apply one update; with ``max_norm`` the gradient is first clipped to that global L2 norm.

        Returns the pre-clipping gradient norm.
        """
        g = np.concatenate([grads[k].ravel() for k in self.params]).astype(self.flat.dtype, copy=False)
        norm = float(np.sqrt(np.dot(g.astype(np.float64), g.astype(np.float64))))
        if max_norm is not None and norm > max_norm:
            g = g * g.dtype.type(max_norm / (norm + 1e-6))
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        self.m *= self.b1
        self.m += (1.0 - self.b1) * g
        self.v *= self.b2
        self.v += (1.0 - self.b2) * (g * g)
        denom = np.sqrt(self.v / c2)
        denom += self.eps
        self.flat -= (self.lr / c1) * self.m / denom
        return norm


class ReduceLROnPlateau:
    """Halve (by ``factor``) once the loss has failed to strictly improve for more than ``patience`` epochs."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.5):
        self.lr, self.patience, self.factor = lr, patience, factor
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise DataError(f"validation loss is not finite: {val_loss}")
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def scheduler_step(state: ReduceLROnPlateau, val_loss: float) -> float:
    return state.step(val_loss)


@dataclass
class Metrics:
    accuracy: float
    f1: float
    f1_macro: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_macro": self.f1_macro,
            "confusion": self.confusion.tolist(),
        }


def metrics_from_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = N_CLASSES) -> Metrics:
    if len(y_true) == 0:
        raise DataError("cannot compute metrics on an empty dataset")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    present = support > 0
    return Metrics(
        accuracy=float(tp.sum() / conf.sum()),
        f1=float((f1 * support).sum() / support.sum()),
        f1_macro=float(f1[present].mean()),
        confusion=conf,
    )


def predict(net: Network, ds: MultimodalDataset, batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(ds), batch):
            idx = np.arange(start, min(start + batch, len(ds)))
            out.append(net(ds.batch(idx)).logits.data)
    return np.concatenate(out, axis=0)


def evaluate(net: Network, ds: MultimodalDataset) -> Metrics:
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return metrics_from_predictions(ds.classes, predict(net, ds).argmax(axis=1))


def validation_loss(net: Network, ds: MultimodalDataset, batch: int = 256) -> float:
    logits = predict(net, ds, batch)
    return T.cross_entropy_logits(Tensor._wrap(logits.astype(np.float64)), ds.classes).item()


class TeacherCache:
    """Frozen-teacher outputs precomputed once per dataset and sliced per batch.

    The teacher never changes during a student run, so this is equivalent to a
    fresh no-grad forward on every batch.
    """

    def __init__(self, teacher: Network, ds: MultimodalDataset, keep: set, need_logits: bool, batch: int = 256):
        self.heads: dict[str, list[np.ndarray]] = {"final": [], "penultimate": []}
        self.store: dict = {}
        with T.no_grad():
            for start in range(0, len(ds), batch):
                idx = np.arange(start, min(start + batch, len(ds)))
                tr = teacher(ds.batch(idx))
                self.heads["final"].append(tr.final_feat.data)
                self.heads["penultimate"].append(tr.penultimate_feat.data)
                for tid in keep:
                    at = tr.traces[tid]
                    slot = self.store.setdefault(tid, {"maps": [], "logits": [], "post": []})
                    slot["maps"].append([m.data for m in at.maps])
                    slot["post"].append([p.data for p in at.post_attention])
                    if need_logits:
                        slot["logits"].append([lg.data for lg in at.logits])
        self.final = np.concatenate(self.heads["final"])
        self.penult = np.concatenate(self.heads["penultimate"])
        self.layers: dict = {}
        for tid, slot in self.store.items():
            self.layers[tid] = {
                key: [np.concatenate(chunk) for chunk in zip(*parts)] if parts else []
                for key, parts in slot.items()
            }
        del self.heads, self.store

    def trace(self, idx: np.ndarray) -> ForwardTrace:
        w = Tensor._wrap
        traces = {}
        for tid, lay in self.layers.items():
            traces[tid] = AttentionTrace(
                maps=[w(a[idx]) for a in lay["maps"]],
                logits=[w(a[idx]) for a in lay["logits"]],
                post_attention=[w(a[idx]) for a in lay["post"]],
            )
        return ForwardTrace(w(self.final[idx]), w(self.final[idx]), w(self.penult[idx]), traces)


def params_digest(net) -> str:
    h = hashlib.sha256()
    for name, p in net.named_parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class EpochRecord:
    epoch: int
    L_c: float
    L_KD: float
    total: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_jsonl(self) -> str:
        lines = [json.dumps({**asdict(r), "best_epoch": self.best_epoch}) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]


def _freeze(net: Network) -> dict[str, Tensor]:
    params = net.named_parameters()
    for p in params.values():
        p.requires_grad = False
    return params


def train(
    net: Network,
    train_set: MultimodalDataset,
    val_set: MultimodalDataset,
    cfg: TrainConfig,
    teacher: Network | None = None,
    on_epoch=None,
) -> tuple[Network, History]:
    """Train ``net`` in place; the best-validation-loss weights are restored at the end."""
    kd = cfg.method != "none"
    if kd and teacher is None:
        raise ConfigError(f"distillation method {cfg.method!r} needs a teacher network")
    if kd and cfg.config is None:
        raise ConfigError("distillation needs the student configuration id")
    distiller = cache = None
    if kd:
        frozen = _freeze(teacher)
        distiller = Distiller(cfg.method, cfg.config, net, teacher, cfg.kd, seed=cfg.seed)
        keep = {tid for _, tid in distiller.pairs} if cfg.method not in ("crd_final", "crd_penultimate") else set()
        cache = TeacherCache(teacher, train_set, keep, need_logits=cfg.kd.t != 1.0)
    params = dict(net.named_parameters())
    if distiller is not None:
        params.update({f"distill.{k}": v for k, v in distiller.named_parameters().items()})
    opt = Adam(params, cfg.lr, cfg.betas, cfg.adam_eps)
    sched = ReduceLROnPlateau(cfg.lr, cfg.patience, cfg.factor)
    rng = np.random.default_rng([cfg.seed, 104729])
    labels = train_set.classes
    history = History()
    best_loss, best_state = float("inf"), None
    n = len(train_set)

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        seen = 0
        for start in range(0, n, cfg.batch):
            idx = perm[start : start + cfg.batch]
            if len(idx) < 2:
                continue
            for p in params.values():
                p.grad = None
            out = net(train_set.batch(idx))
            l_c = T.cross_entropy_logits(out.logits, labels[idx])
            if kd:
                l_kd = distiller.kd_loss(out, cache.trace(idx))
            else:
                l_kd = Tensor._wrap(np.zeros((), dtype=l_c.dtype))
            parts = total_loss(l_c, l_kd, cfg.kd.alpha if kd else 1.0, cfg.kd.beta if kd else 0.0)
            grads = T.backward(parts.total, params)
            opt.step(grads, max_norm=cfg.clip)
            sums += len(idx) * np.array([parts.L_c.item(), parts.L_KD.item(), parts.total.item()])
            seen += len(idx)
        val_logits = predict(net, val_set)
        val_loss = T.cross_entropy_logits(Tensor._wrap(val_logits.astype(np.float64)), val_set.classes).item()
        val_acc = float((val_logits.argmax(axis=1) == val_set.classes).mean())
        rec = EpochRecord(epoch, *(sums / max(seen, 1)).tolist(), val_loss, val_acc, opt.lr)
        history.records.append(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in net.named_parameters().items()}
        opt.lr = sched.step(val_loss)
        log.info("epoch %d  L_c=%.4f L_KD=%.4f val=%.4f acc=%.3f lr=%.2e", epoch, rec.L_c, rec.L_KD, val_loss, val_acc, rec.lr)
        if on_epoch is not None:
            on_epoch(rec)

    if best_state is not None:
        for k, p in net.named_parameters().items():
            p.data[...] = best_state[k]
    if kd:
        for p in frozen.values():
            p.requires_grad = True
    return net, history
