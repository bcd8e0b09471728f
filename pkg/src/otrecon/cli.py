"""``otrecon`` command-line entry point.

Exit status: 0 on success, 1 on contract or configuration errors, 2 on
numerical breakdown or a failed verification check.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import experiments as X
from .config import ExperimentConfig, load_config
from .diffnet import init_network, load_checkpoint
from .errors import ContractError, NumericalBreakdownError
from .selftest import SELFTEST_SEED, run_selftest
from .training import load_training_state, train

log = logging.getLogger("otrecon")

COMMANDS = ("generate", "train", "eval", "prop1", "prop2", "metric-check", "selftest")
MANIFEST = "manifest.txt"
EXIT_OK, EXIT_CONTRACT, EXIT_NUMERICAL = 0, 1, 2


@dataclass
class RunManifest:
    """Plain-text run record that doubles as a config file.

    Metadata lines start with ``#`` so the whole file can be passed back to
    ``--config`` to replay the run.
    """

    command: str
    config: ExperimentConfig
    checkpoints: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    def text(self) -> str:
        lines = [f"# otrecon {__version__}", f"# command: {self.command}", f"# seed: {self.config.seed}"]
        lines += [f"# checkpoint: {c}" for c in self.checkpoints]
        lines += [f"# artifact: {a}" for a in self.artifacts]
        return "\n".join(lines) + "\n" + self.config.to_text()

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        self.artifacts = sorted(str(p.relative_to(out_dir)) for p in out_dir.rglob("*")
                                if p.is_file() and p.name != MANIFEST)
        path = out_dir / MANIFEST
        path.write_text(self.text())
        return path


def _cmd_generate(cfg, args, out):
    rows = X.generate(cfg, out)
    print(f"wrote {cfg.num_pairs} pairs ({len(rows)} circle records) to {out}")
    return EXIT_OK


def _cmd_train(cfg, args, out):
    stream = cfg.stream()
    if cfg.dataset_dir:
        stream = X.open_dataset(cfg.dataset_dir, stream)
    start, adam = 0, None
    if args.checkpoint:
        if len(args.checkpoint) != 1:
            raise ContractError("train resumes from at most one checkpoint")
        net, adam, start = load_training_state(args.checkpoint[0])
        if net.config != cfg.net_config():
            raise ContractError("checkpoint architecture does not match the config")
        net = net.copy()
    else:
        net = init_network(cfg.net_config(), seed=cfg.seed)
    t0 = time.perf_counter()
    result = train(cfg.train_config(), net, stream, out_dir=out, start_step=start, adam=adam)
    elapsed = time.perf_counter() - t0
    losses = [row[1] for row in result.metrics if not row[5]]
    last = f"{losses[-1]:.6g}" if losses else "n/a"
    print(f"trained {cfg.loss} steps {start}..{cfg.steps}: last loss {last}, "
          f"skipped {result.skipped}, {elapsed:.1f} s")
    return EXIT_OK


def _cmd_eval(cfg, args, out):
    if not args.checkpoint:
        raise ContractError("eval needs --checkpoint (once or twice)")
    if len(args.checkpoint) > 2:
        raise ContractError("eval compares at most two checkpoints")
    nets = [load_checkpoint(p) for p in args.checkpoint]
    pairs = cfg.stream().validation_set(cfg.validation_size)
    report = X.evaluate(nets, list(args.checkpoint), pairs, out)
    print("model," + ",".join(X.SampleMetrics.FIELDS))
    for row in report.summary_rows():
        print(",".join([row[0]] + [f"{v:.6g}" for v in row[1:]]))
    return EXIT_OK


def _cmd_prop1(cfg, args, out):
    t0 = time.perf_counter()
    report = X.prop1(cfg, out_dir=out)
    elapsed = time.perf_counter() - t0
    ok = report.discrepancy <= 0.02
    print(f"{'PASS' if ok else 'FAIL'} prop1: relative L2 discrepancy {report.discrepancy:.3e} "
          f"(B={report.bound}, {report.samples} samples, {elapsed:.2f} s)")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _cmd_prop2(cfg, args, out):
    r = X.prop2(cfg, out_dir=out)
    checks = [
        ("uniform squared quadrature", r.max_error_uniform <= 1e-3, f"max abs error {r.max_error_uniform:.3e}"),
        ("uniform squared argmin", abs(r.argmin_uniform) <= r.grid_step, f"argmin {r.argmin_uniform:g}"),
        ("discrete argmin at mean", r.discrete_agrees, f"max gap {r.max_discrete_gap:.3e}"),
        ("brute force agrees", r.brute_force_agrees,
         ", ".join(f"{k}: {s:g} vs {a:g}" for k, (s, a) in r.brute_force.items())),
    ]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} prop2 {name}: {detail}")
    print(f"info prop2 quartic argmin {r.argmin_quartic:g}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_NUMERICAL


def _cmd_metric_check(cfg, args, out):
    r = X.metric_check(cfg, out_dir=out)
    for n, triples, excess, count, asym, selfd in r.rows():
        print(f"{'PASS' if count == 0 else 'FAIL'} metric n={n:g}: {count} violations in {triples} triples, "
              f"max excess {excess:.3e}, asymmetry {asym:.1e}, self distance {selfd:.1e}")
    return EXIT_OK if r.ok else EXIT_NUMERICAL


def _cmd_selftest(cfg, args, out):
    results = run_selftest(cfg.seed)
    X.write_table(Path(out) / "selftest.csv", ("suite", "worst", "tolerance", "cases", "passed"),
                  ((r.name, r.worst, r.tolerance, r.cases, r.passed) for r in results))
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


HANDLERS = {
    "generate": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval, "prop1": _cmd_prop1,
    "prop2": _cmd_prop2, "metric-check": _cmd_metric_check, "selftest": _cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otrecon", description="Transport-loss learned reconstruction experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    p.add_argument("--out", help="output directory (default runs/<command>)")
    p.add_argument("--checkpoint", action="append",
                   help="train: resume from; eval: model to evaluate (repeat to compare two)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed overriding the config")
    p.add_argument("--version", action="version", version=f"otrecon {__version__}")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 1 << 64:
                raise ContractError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.replace(seed=args.seed)
        elif args.command == "selftest":
            # fixed suite seed, recorded in the manifest so a replay matches
            cfg = cfg.replace(seed=SELFTEST_SEED)
        out = Path(args.out or Path("runs") / args.command)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ContractError(f"cannot create output directory {out}: {exc}") from exc
        status = HANDLERS[args.command](cfg, args, out)
        RunManifest(args.command, cfg, list(args.checkpoint or [])).write(out)
        return status
    except NumericalBreakdownError as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
