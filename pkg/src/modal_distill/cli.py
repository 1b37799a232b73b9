"""Command-line entry point: ``modal-distill <command>``.

Commands: gen-data, train, eval, dump-attn, params, bench. Every failure is a
ModalDistillError subclass whose ``exit_code`` becomes the process status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_seed
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split
from .errors import ConfigError, DataError, ModalDistillError, UsageError
from .networks import (
    TEACHER_FOR_CONFIG,
    Network,
    NetworkConfig,
    build_student,
    build_teacher,
    component_param_counts,
    param_count,
)
from .train import evaluate, train

log = logging.getLogger("modal_distill")

# parameter counts reported for the best student and the complete teacher (millions)
REFERENCE_PARAMS = {"student": 0.675, "teacher": 1.802}
MIN_REPEATS = 10


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _resolve_seed(arg: int | None, fallback: int | None = None) -> int:
    if arg is not None:
        return arg
    if fallback is not None:
        return int(fallback)
    return default_seed()


# gen-data ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = {}
    if args.spec:
        try:
            d = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read spec {args.spec}: {e}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"spec {args.spec} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise DataError("spec document must be a JSON object")
    d["seed"] = _resolve_seed(args.seed, d.get("seed"))
    spec = SyntheticSpec.from_dict(d)
    root = save_dataset(generate_synthetic(spec), args.out)
    log.info("wrote %d samples to %s", spec.n, root)
    return 0


# train ------------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    try:
        d = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    if args.teacher is not None:
        d["teacher"] = args.teacher
    if args.data is not None:
        d["data"] = args.data
    if args.epochs is not None:
        d["train"] = {**d.get("train", {}), "epochs": args.epochs}
    return RunConfig.from_dict(d)


def _check_teacher(teacher: Network, run: RunConfig, cfg: NetworkConfig) -> None:
    if teacher.role != "teacher":
        raise ConfigError("--teacher checkpoint holds a student network")
    want = TEACHER_FOR_CONFIG[run.config]
    if teacher.variant != want:
        raise ConfigError(f"config {run.config} distils from the {want} teacher, checkpoint is {teacher.variant}")
    if teacher.cfg.dims != cfg.dims:
        raise ConfigError("teacher and student were built for different input shapes")


def cmd_train(args) -> int:
    run = _load_run_config(args)
    if not run.data:
        raise ConfigError("no dataset: set 'data' in the config or pass --data")
    seed = run.resolved_seed(args.seed)
    cfg = run.network_config()
    ds = load_dataset(run.data)
    tr, va, te = split(ds, tuple(run.split), seed=run.split_seed)
    teacher = None
    if run.role == "teacher":
        net = build_teacher(run.branch, cfg, seed)
    else:
        net = build_student(run.config, cfg, seed, run.alignment)
        if run.method != "none":
            teacher = load_checkpoint(run.teacher)
            _check_teacher(teacher, run, cfg)
    t0 = time.perf_counter()
    net, history = train(net, tr, va, run.train_config(seed), teacher=teacher)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "model.ckpt", extra={"best_epoch": history.best_epoch})
    history.write(out / "history.jsonl")
    (out / "run.json").write_text(json.dumps({**run.to_dict(), "seed": seed}, indent=2), encoding="utf-8")
    metrics = evaluate(net, te).to_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    _dump({"out": str(out), "best_epoch": history.best_epoch, "seconds": time.perf_counter() - t0, "test": metrics})
    return 0


# eval -------------------------------------------------------------------------


def _part(ds, which: str, split_seed: int):
    if which == "all":
        return ds
    tr, va, te = split(ds, seed=split_seed)
    return {"train": tr, "val": va, "test": te}[which]


def cmd_eval(args) -> int:
    net = load_checkpoint(args.ckpt)
    ds = _part(load_dataset(args.data), args.part, args.split_seed)
    _dump(evaluate(net, ds).to_dict())
    return 0


# dump-attn --------------------------------------------------------------------


def attention_document(net: Network, ds, sample: int) -> dict:
    if not 0 <= sample < len(ds):
        raise DataError(f"sample index {sample} out of range for {len(ds)} samples")
    with T.no_grad():
        out = net(ds.batch(np.array([sample])))
    doc = {"role": net.role, "variant": net.variant, "sample": sample, "transformers": {}}
    for tid, trace in out.traces.items():
        maps = [m.data[0].astype(np.float64) for m in trace.maps]
        doc["transformers"][str(tid)] = {
            "query_len": int(maps[0].shape[0]),
            "kv_len": int(maps[0].shape[1]),
            "layers": [m.tolist() for m in maps],
        }
    return doc


def cmd_dump_attn(args) -> int:
    net = load_checkpoint(args.ckpt)
    doc = attention_document(net, load_dataset(args.data), args.sample)
    Path(args.out).write_text(json.dumps(doc), encoding="utf-8")
    log.info("wrote %d transformers to %s", len(doc["transformers"]), args.out)
    return 0


# params -----------------------------------------------------------------------


def params_report(cfg: NetworkConfig, config: int = 5, teacher_branch: str | None = None) -> dict:
    teacher = build_teacher(teacher_branch or "complete", cfg, 0)
    student = build_student(config, cfg, 0)
    t, s = param_count(teacher), param_count(student)
    return {
        "teacher": {"branch": teacher.variant, "components": component_param_counts(teacher), "total": t},
        "student": {"config": config, "components": component_param_counts(student), "total": s},
        "ratio": t / s,
        "reference_ratio": REFERENCE_PARAMS["teacher"] / REFERENCE_PARAMS["student"],
        "network": cfg.to_dict(),
    }


def cmd_params(args) -> int:
    if args.config:
        run = RunConfig.load(args.config)
        cfg = run.network_config()
        config = run.config or 5
        branch = run.branch if run.role == "teacher" else "complete"
    else:
        cfg, config, branch = NetworkConfig.preset(args.preset), args.student_config, "complete"
    report = params_report(cfg, config, branch)
    if args.config is None and args.preset != "paper":
        paper = params_report(NetworkConfig.paper(), config, branch)
        report["paper_preset"] = {
            "teacher_total": paper["teacher"]["total"],
            "student_total": paper["student"]["total"],
            "ratio": paper["ratio"],
            "reference_ratio": paper["reference_ratio"],
        }
    _dump(report)
    return 0


# bench ------------------------------------------------------------------------


@dataclass
class Timing:
    median: float
    iqr: float
    times: list[float]

    @classmethod
    def of(cls, times: list[float]) -> "Timing":
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        return cls(float(med), float(q3 - q1), [float(t) for t in times])


@dataclass
class BenchResult:
    student: Timing
    teacher: Timing
    batch: int

    @property
    def ratio(self) -> float:
        return self.student.median / self.teacher.median

    def to_dict(self) -> dict:
        return {
            "batch": self.batch,
            "student": asdict(self.student),
            "teacher": asdict(self.teacher),
            "ratio": self.ratio,
            "reduction": 1.0 - self.ratio,
        }


def bench_latency(student: Network, teacher: Network, batch: dict, repeats: int = MIN_REPEATS, warmup: int = 2) -> BenchResult:
    """Median and IQR of ``repeats`` timed forwards per network, interleaved so drift hits both."""
    if repeats < MIN_REPEATS:
        raise UsageError(f"repeats must be at least {MIN_REPEATS}, got {repeats}")
    times = {"student": [], "teacher": []}
    nets = {"student": student, "teacher": teacher}
    with T.no_grad():
        for _ in range(warmup):
            for net in nets.values():
                net(batch)
        for i in range(repeats):
            order = ("student", "teacher") if i % 2 == 0 else ("teacher", "student")
            for role in order:
                t0 = time.perf_counter()
                nets[role](batch)
                times[role].append(time.perf_counter() - t0)
    n = next(iter(batch.values())).shape[0]
    return BenchResult(Timing.of(times["student"]), Timing.of(times["teacher"]), n)


def cmd_bench(args) -> int:
    if args.repeats < MIN_REPEATS:
        raise UsageError(f"--repeats must be at least {MIN_REPEATS}, got {args.repeats}")
    if (args.ckpt is None) != (args.teacher is None):
        raise UsageError("pass both --ckpt and --teacher, or neither to bench freshly built networks")
    if args.ckpt:
        student, teacher = load_checkpoint(args.ckpt), load_checkpoint(args.teacher)
    else:
        cfg = NetworkConfig.preset(args.preset)
        student, teacher = build_student(5, cfg, 0), build_teacher("complete", cfg, 0)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = generate_synthetic(SyntheticSpec(n=args.batch, seed=0))
    idx = np.arange(min(args.batch, len(ds)))
    res = bench_latency(student, teacher, ds.batch(idx), args.repeats, args.warmup)
    _dump(res.to_dict())
    return 0


# entry ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modal-distill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    g.add_argument("--spec", help="JSON generator spec (fields of SyntheticSpec)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher or student from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--teacher", help="teacher checkpoint (overrides the config)")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print accuracy, F1 and confusion matrix")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--part", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--split-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("dump-attn", help="write head-averaged attention maps of one sample as JSON")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_dump_attn)

    c = sub.add_parser("params", help="parameter counts per component")
    c.add_argument("--config", help="run config; its network preset and student config are used")
    c.add_argument("--preset", choices=("desk", "paper"), default="desk")
    c.add_argument("--student-config", type=int, default=5)
    c.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="student vs teacher forward latency")
    b.add_argument("--ckpt", help="student checkpoint")
    b.add_argument("--teacher", help="teacher checkpoint")
    b.add_argument("--data")
    b.add_argument("--preset", choices=("desk", "paper"), default="desk")
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--repeats", type=int, default=MIN_REPEATS)
    b.add_argument("--warmup", type=int, default=2)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ModalDistillError as e:
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
