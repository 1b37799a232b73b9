"""Paired student/teacher forward-latency runs on freshly built networks.

    python3 scripts/bench_latency.py --runs 10 --preset desk
"""

import argparse
import json

import numpy as np

from modal_distill.cli import MIN_REPEATS, bench_latency
from modal_distill.data import SyntheticSpec, generate_synthetic
from modal_distill.networks import NetworkConfig, build_student, build_teacher


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--repeats", type=int, default=MIN_REPEATS)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    args = p.parse_args()

    cfg = NetworkConfig.preset(args.preset)
    student, teacher = build_student(5, cfg, 0), build_teacher("complete", cfg, 0)
    spec = SyntheticSpec(n=args.batch, lengths={m: d.length for m, d in cfg.dims.items()}, widths={m: d.width for m, d in cfg.dims.items()})
    batch = generate_synthetic(spec).batch(np.arange(args.batch))
    runs = [bench_latency(student, teacher, batch, args.repeats) for _ in range(args.runs)]
    ratios = [r.ratio for r in runs]
    print(json.dumps({
        "preset": args.preset,
        "student_median_ms": [1e3 * r.student.median for r in runs],
        "teacher_median_ms": [1e3 * r.teacher.median for r in runs],
        "student_faster": sum(r < 1 for r in ratios),
        "median_reduction": 1 - float(np.median(ratios)),
    }, indent=2))


if __name__ == "__main__":
    main()
