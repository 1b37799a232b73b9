"""Train every row of the results table on one synthetic dataset and print accuracy / weighted F1.

Teachers are trained once per group and reused by that group's students.

    python3 scripts/run_table.py --epochs 30 --out runs/table
"""

import argparse
import logging
import time
from pathlib import Path

from modal_distill.checkpoint import save_checkpoint
from modal_distill.config import TABLE_ROWS, row_config
from modal_distill.data import SyntheticSpec, generate_synthetic, split
from modal_distill.networks import TEACHER_FOR_CONFIG, build_student, build_teacher
from modal_distill.train import evaluate, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="directory for checkpoints (optional)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    ds = generate_synthetic(SyntheticSpec(n=args.n, seed=args.seed))
    tr, va, te = split(ds, seed=args.seed)
    teachers = {}
    print(f"{'group':40s} {'network':8s} {'description':40s} {'acc':>6s} {'f1':>6s} {'sec':>6s}")
    for row in TABLE_ROWS:
        run = row_config(*row)
        tc = run.train_config(args.seed)
        tc.epochs = args.epochs
        cfg = run.network_config()
        t0 = time.perf_counter()
        teacher = None
        if run.role == "teacher":
            net = teachers.get(run.branch)
            if net is None:
                net = build_teacher(run.branch, cfg, args.seed)
                train(net, tr, va, tc)
                teachers[run.branch] = net
        else:
            net = build_student(run.config, cfg, args.seed, run.alignment)
            if run.method != "none":
                teacher = teachers[TEACHER_FOR_CONFIG[run.config]]
            train(net, tr, va, tc, teacher=teacher)
        m = evaluate(net, te)
        if args.out:
            name = "_".join(s.replace(" ", "-").replace("$", "").replace("\\", "") for s in row)
            save_checkpoint(net, args.out / f"{name}.ckpt")
        print(f"{row[0]:40s} {row[1]:8s} {row[2]:40s} {100 * m.accuracy:6.2f} {m.f1:6.3f} {time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main()
