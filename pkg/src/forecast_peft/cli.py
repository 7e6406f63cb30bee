"""``forecast-peft`` command line.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error.
Metrics are printed as JSON on stdout and written under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .ablation import run_ablation
from .config import MODES, large_backbone, large_peft
from .errors import CheckpointError, ConfigError, DataError
from .io import save_scenes
from .peft import count_parameters, make_plan, plugin_load, read_plugin
from .scene import PROFILES, SceneProfile, generate_synthetic
from .backbone import build_model
from .train import (TrainConfig, load_checkpoint, load_dataset, prepare_finetune_model, run_eval,
                    run_finetune, run_pretrain)

EXIT_CONFIG = 2
EXIT_DATA = 3


def worker_count() -> int:
    raw = os.environ.get("FP_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FP_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("FP_THREADS must be >= 1")
    return n


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(payload: dict, out: str | None, name: str) -> None:
    text = json.dumps(payload, indent=2)
    print(text)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def _profile(spec: str) -> SceneProfile:
    if spec in PROFILES:
        return PROFILES[spec]()
    if not Path(spec).exists():
        raise ConfigError(f"unknown profile {spec!r}; use one of {sorted(PROFILES)} or a JSON file")
    return SceneProfile.load(spec)


# -- commands ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    profile = _profile(args.profile)
    scenes = generate_synthetic(args.seed or 0, args.n, profile, workers=worker_count())
    out = Path(args.out)
    path = out / "scenes.fpsc" if out.suffix != ".fpsc" else out
    path.parent.mkdir(parents=True, exist_ok=True)
    save_scenes(path, scenes)
    _emit({"scenes": len(scenes), "profile": profile.name, "path": str(path)}, None, "")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _train_config(args).replace(mode="pretrain")
    ckpt = run_pretrain(cfg, out_dir=args.out, log=_log)
    _emit({"mode": "pretrain", "epochs": ckpt.epoch, "losses": ckpt.losses,
           "content_hash": ckpt.content_hash}, args.out, "metrics.json")
    return 0


def cmd_finetune(args) -> int:
    cfg = _train_config(args)
    if cfg.mode == "pretrain":
        raise ConfigError("finetune needs --mode other than pretrain")
    if not args.pretrained:
        raise ConfigError("finetune needs --pretrained <checkpoint.npz>")
    pre = load_checkpoint(args.pretrained)
    result = run_finetune(cfg, pre, out_dir=args.out, log=_log)
    report = run_eval(result.checkpoint.model, load_dataset(cfg, "eval"), cfg.horizon, args.out)
    _emit({"mode": cfg.mode, "trainable": result.trainable, "losses": result.losses,
           **report.to_dict()}, args.out, "metrics.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    if args.plugin:
        if not args.pretrained:
            raise ConfigError("--plugin requires --pretrained <checkpoint.npz>")
        model = plugin_load(read_plugin(args.plugin), load_checkpoint(args.pretrained).model)
    elif args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
    else:
        raise ConfigError("eval needs --checkpoint, or --pretrained with --plugin")
    horizon = args.horizon if args.horizon is not None else cfg.horizon
    cfg = cfg.replace(backbone=model.config)
    report = run_eval(model, load_dataset(cfg, "eval"), horizon, args.out)
    _emit(report.to_dict(), args.out, "metrics.json")
    return 0


def cmd_params(args) -> int:
    if args.scale == "large":
        backbone, peft_cfg = large_backbone(), large_peft()
    else:
        cfg = _train_config(args)
        backbone, peft_cfg = cfg.backbone, cfg.peft
    mode = args.mode or "peft"
    model = prepare_finetune_model(build_model(backbone, 0), mode, peft_cfg, 0)
    counts = count_parameters(model, make_plan(model, mode, peft_cfg))
    _emit({"mode": mode, **counts}, args.out, "params.json")
    return 0


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    if not args.sweep or not args.pretrained:
        raise ConfigError("ablate needs --sweep <sweep.json> and --pretrained <checkpoint.npz>")
    try:
        sweep = json.loads(Path(args.sweep).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad sweep file {args.sweep}: {exc}") from exc
    if cfg.mode == "pretrain":  # ablation cells are fine-tunes; the sweep varies the peft modules
        cfg = cfg.replace(mode="peft")
    pre = load_checkpoint(args.pretrained)
    rows = run_ablation(sweep, pre.model, load_dataset(cfg, "train"), load_dataset(cfg, "eval"),
                        cfg, args.out, log=_log)
    _emit({"rows": rows}, None, "")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "params": cmd_params, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forecast-peft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--plugin", help="plug-in checkpoint (.fppl)")
        p.add_argument("--out", help="output directory")
        if name in ("finetune", "eval", "ablate"):
            p.add_argument("--pretrained", help="pretrained checkpoint (.npz)")
        if name == "eval":
            p.add_argument("--checkpoint", help="full checkpoint (.npz)")
            p.add_argument("--horizon", type=int, help="evaluate only the first N future steps")
        if name == "params":
            p.add_argument("--scale", choices=("desk", "large"), default="desk")
        if name == "ablate":
            p.add_argument("--sweep", help="JSON mapping axis -> list of values")
        if name == "gen-data":
            p.add_argument("--profile", default="desk", help=f"one of {sorted(PROFILES)} or a JSON file")
            p.add_argument("--n", type=int, default=256)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-data" and not args.out:
        print("error: gen-data needs --out", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=worker_count()):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
