"""Command-line entry point: ``geovox <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import GeovoxError
from . import commands as C
from . import io
from .config import RunConfig
from .report import build_report

log = logging.getLogger("geovox")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geovox", description="Sparse-conditioned 3D geological volume generation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default run configuration as JSON")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-dataset", help="generate cases, conditions and field maps into a run directory")
    p.add_argument("--run", required=True, help="run directory (relative paths go under $GEOVOX_OUTPUT_ROOT)")
    p.add_argument("--config", help="run configuration JSON (defaults if omitted)")

    p = sub.add_parser("train", help="train a flow-matching or DDPM model")
    p.add_argument("--run", required=True)
    p.add_argument("--objective", choices=("fm", "ddpm"), default="fm")
    p.add_argument("--attention", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--name")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("sample", help="sample predicted volumes for a split")
    p.add_argument("--run", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="ood")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("baseline", help="run a rule-based baseline on a split")
    p.add_argument("--run", required=True)
    p.add_argument("--method", choices=C.BASELINES, required=True)
    p.add_argument("--split", default="ood")

    p = sub.add_parser("forward-geophys", help="gravity and magnetic maps for a categorical volume file")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel-size", type=float, default=25.0)
    p.add_argument("--receivers", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="pooled metrics for a prediction set")
    p.add_argument("--run", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--split", default="ood")

    p = sub.add_parser("report", help="tables, slice images and loss series")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="ood")
    return ap


def run(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "init-config":
        io.write_json(C.resolve_path(args.out), RunConfig().to_dict())
        return 0
    if cmd == "forward-geophys":
        paths = C.forward_geophys(args.volume, C.resolve_path(args.out), args.voxel_size, args.receivers, args.seed)
        print(json.dumps({k: str(v) for k, v in paths.items()}))
        return 0
    run_dir = C.resolve_path(args.run)
    if cmd == "gen-dataset":
        cfg = RunConfig.from_dict(io.read_json(args.config)) if args.config else RunConfig()
        m = C.gen_dataset(cfg, run_dir)
        print(json.dumps(m.counts()))
    elif cmd == "train":
        state = C.train(run_dir, args.objective, args.attention, args.name, args.epochs, args.resume,
                        log=lambda r: log.info("epoch %d step %d train %.5f val %s", r["epoch"], r["step"],
                                               r["train_loss"], r.get("val_loss")))
        print(json.dumps({"epochs": state.epoch, "steps": state.step}))
    elif cmd == "sample":
        paths = C.sample(run_dir, args.model, args.split, args.steps, args.seed, args.limit)
        print(json.dumps({"written": len(paths)}))
    elif cmd == "baseline":
        paths = C.baseline(run_dir, args.method, args.split)
        print(json.dumps({"written": len(paths)}))
    elif cmd == "evaluate":
        r = C.evaluate(run_dir, args.pred, args.split)
        print(json.dumps({"acc_incl_air": r.acc_incl_air, "acc_excl_air": r.acc_excl_air,
                          "miou_excl_air": r.miou_excl_air}))
    elif cmd == "report":
        files = build_report(run_dir, args.split)
        print((run_dir / "report" / "table1.txt").read_text(), end="")
        log.info("report files: %s", ", ".join(str(Path(p)) for p in files.values()))
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except GeovoxError as e:
        print(f"geovox: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
