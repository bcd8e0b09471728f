"""Train both losses at desk scale, then evaluate them side by side.

    python scripts/run_desk_experiment.py [--out runs/desk] [--steps N]

Writes ``<out>/l2``, ``<out>/ot`` (training runs), ``<out>/eval`` (metrics
and the 4-panel figure) and ``<out>/summary.csv`` with CPU time, skip
fraction and mean spread ratio per loss.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

from otrecon.cli import run
from otrecon.config import load_config
from otrecon.training import read_metrics

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = {"l2": ROOT / "configs" / "desk_l2.cfg", "ot": ROOT / "configs" / "desk_ot.cfg"}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--steps", type=int, help="override the configured step count")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name, cfg_path in CONFIGS.items():
        cfg = load_config(cfg_path)
        if args.steps is not None:
            cfg = cfg.replace(steps=args.steps)
        run_cfg = out / f"{name}.cfg"
        run_cfg.write_text(cfg.to_text())
        cpu0, wall0 = time.process_time(), time.perf_counter()
        status = run(["train", "--config", str(run_cfg), "--out", str(out / name)])
        cpu, wall = time.process_time() - cpu0, time.perf_counter() - wall0
        if status != 0:
            print(f"training {name} failed with status {status}", file=sys.stderr)
            return status
        metrics = read_metrics(out / name / "metrics.csv")
        skipped = sum(int(m["skipped"]) for m in metrics)
        finite = all(math.isfinite(float(m["loss"])) for m in metrics if m["skipped"] == "0")
        rows.append([name, len(metrics), skipped, skipped / max(len(metrics), 1), finite, cpu, wall])

    status = run(["eval", "--config", str(out / "ot.cfg"), "--out", str(out / "eval"),
                  "--checkpoint", str(out / "l2" / "final.otpd"),
                  "--checkpoint", str(out / "ot" / "final.otpd")])
    if status != 0:
        return status
    with open(out / "eval" / "eval_summary.csv", newline="") as fh:
        spread = [float(r["spread_ratio"]) for r in csv.DictReader(fh)]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "steps", "skipped", "skip_fraction", "all_losses_finite", "cpu_seconds",
                    "wall_seconds", "mean_spread_ratio"])
        for row, s in zip(rows, spread):
            w.writerow(row + [s])
    print((out / "summary.csv").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
