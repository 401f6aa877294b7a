"""Command line: synth, train, eval, gradcheck, infer.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
Relative output paths are placed under ``$SEMISMD_OUT`` (default ``runs``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, NumericalError, SemiSMDError
from .config import ABLATIONS, ExperimentConfig, ablation, from_dict, load_config

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
OUT_ENV = "SEMISMD_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(path: str | None, default: str) -> Path:
    p = Path(path) if path else Path(default)
    return p if p.is_absolute() else out_root() / p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, type=str, metavar="{true,false}", default=None)
        else:
            p.add_argument(flag, dest=f.name, type=str, default=None)


def _config_from_args(args) -> ExperimentConfig:
    base = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    cfg = from_dict(base)
    if getattr(args, "ablation", None):
        cfg = ablation(cfg, args.ablation)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semismd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render frame-sets to disk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", default=None)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=48)
    s.add_argument("--rig", default="", help="rig JSON (defaults to the built-in ring of 4)")
    s.add_argument("--from-manifest", default=None, help="regenerate a dataset from its manifest")

    t = sub.add_parser("train", help="train the depth and pose networks")
    t.add_argument("--config", default=None, help="flat JSON configuration")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    t.add_argument("--data", default=None, help="synthesized training dataset (else generated)")
    t.add_argument("--out", default=None)
    t.add_argument("--log-every", type=int, default=100)
    _add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="dataset folder (else the validation seeds)")
    e.add_argument("--out", default=None)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--scope", nargs="*", default=None,
                   help="any of: primitive module end-to-end")
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="predict depth and pose for one frame-set folder")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--frameset", required=True)
    i.add_argument("--out", default=None)
    return p


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from ..geometry import CameraRig
    from ..synthrig import default_rig
    from .data import regenerate, synth
    out = resolve_out(args.out, "data")
    if args.from_manifest:
        regenerate(args.from_manifest, out)
    else:
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        rig = CameraRig.load(args.rig) if args.rig else default_rig(args.height, args.width)
        synth(out, range(args.seed, args.seed + args.count), rig)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .train import train
    cfg = _config_from_args(args)
    out = resolve_out(args.out, f"train_{cfg.digest()}")
    train_sets = load_dataset(args.data) if args.data else None
    res = train(cfg, out, train_sets=train_sets, log=print, log_every=args.log_every)
    print(res.report.table())
    print(f"checkpoint {res.checkpoint}; report {out / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import frameset_seeds, generate, load_dataset
    from .train import RunReport, evaluate, load_pipeline
    pipe = load_pipeline(args.checkpoint)
    cfg = pipe.cfg
    sets = load_dataset(args.data) if args.data else \
        generate(frameset_seeds(cfg.val_seed, cfg.val_sets), pipe.rig, cfg)
    if not sets:
        raise UsageError("no frame-sets to evaluate")
    shape = sets[0].images.shape
    if shape[1] != len(pipe.rig) or shape[3:] != (cfg.height, cfg.width):
        raise ConfigError(f"dataset frames {shape} do not match the checkpoint configuration")
    out = resolve_out(args.out, "eval")
    rows, avg, _ = evaluate(pipe, sets, out / "images")
    report = RunReport(cfg.to_dict(), cfg.digest(), per_camera=rows, average=avg)
    report.write(out)
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SCOPES, run
    if not args.scope:
        raise UsageError(f"gradcheck needs at least one --scope ({', '.join(SCOPES)})")
    try:
        results = run(args.scope, args.seed, log=print)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_infer(args) -> int:
    from .. import io
    from .train import load_pipeline
    pipe = load_pipeline(args.checkpoint)
    fs = io.load_frameset(args.frameset)
    out_dir = resolve_out(args.out, "infer")
    out_dir.mkdir(parents=True, exist_ok=True)
    out, pose = pipe.predict(fs.images.astype(np.float32))
    inv = out.inv_depth.data.astype(np.float64)
    N = len(pipe.rig)
    for b in range(inv.shape[0]):
        io.write_depth(out_dir / f"depth_g{b // N}_c{b % N}.bin", 1.0 / inv[b, 0])
    (out_dir / "pose.json").write_text(json.dumps({"pose6": [float(v) for v in pose.data]}))
    print(f"wrote {inv.shape[0]} depth maps and pose.json to {out_dir}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SemiSMDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
