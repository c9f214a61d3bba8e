"""Command-line entry point: ``hitcd <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgfile
from .data.raster import read_raster, write_raster
from .data.series import dataset_hash, read_dataset, write_dataset
from .data.synth import GenConfig, synth_dataset
from .hit import he_init, hit_step
from .models import HiTModel, load_model, save_model
from .store import TABLE_ROWS, HEStore, footprint
from .training import TrainConfig, train
from .vit import ModelConfig

log = logging.getLogger("hitcd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _defaults() -> dict:
    out = {f"model.{k}": v for k, v in ModelConfig().to_dict().items()}
    out.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items()})
    out.update({f"data.{k}": v for k, v in dataclasses.asdict(GenConfig()).items()})
    out.update({"data.count": 200, "data.val_count": 50, "data.dir": None, "data.val_dir": None,
                "eval.scenes": 2, "eval.tiles": 16, "eval.corrupt_index": 3,
                "bench.warmup": 3, "bench.iters": 20, "bench.workers": None,
                "run.seed": 0})
    return out


DEFAULTS = _defaults()
# keys that describe a run rather than configure it; accepted so manifests replay
_RUN_KEYS = ("run.command", "run.dataset_hash", "run.artifacts")


def resolve_config(path: Optional[str], overrides: dict) -> dict:
    """Defaults, then the config file, then command-line overrides. Unknown keys are usage errors."""
    cfg = dict(DEFAULTS)
    layers = []
    if path:
        try:
            layers.append(cfgfile.load(path))
        except (OSError, cfgfile.ConfigError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
    layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key in _RUN_KEYS or key.startswith("cmd."):
                continue
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = value
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def model_config(cfg: dict) -> ModelConfig:
    fields = _section(cfg, "model")
    taps = fields.get("decoder_tap_stages")
    if not isinstance(taps, tuple):
        fields["decoder_tap_stages"] = (taps,)
    try:
        return ModelConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_section(cfg, "train"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train configuration: {exc}") from None


def gen_config(cfg: dict) -> GenConfig:
    names = {f.name for f in dataclasses.fields(GenConfig)}
    return GenConfig(**{k: v for k, v in _section(cfg, "data").items() if k in names})


def load_data(cfg: dict) -> tuple[list, list]:
    """Training and validation series: from ``data.dir``/``data.val_dir`` or generated from ``run.seed``."""
    seed = int(cfg["run.seed"])
    if cfg["data.dir"]:
        train_data = read_dataset(cfg["data.dir"])
        val_data = read_dataset(cfg["data.val_dir"]) if cfg["data.val_dir"] else None
        return train_data, val_data
    gen = gen_config(cfg)
    return (synth_dataset(gen, int(cfg["data.count"]), seed),
            synth_dataset(gen, int(cfg["data.val_count"]), seed + 1_000_003))


def write_manifest(out: Path, command: str, cfg: dict, cmd_args: dict, data_hash: str = "",
                   artifacts=()) -> Path:
    """Resolved config plus everything needed to repeat the run with ``hitcd replay``."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(cfg)
    manifest["run.command"] = command
    manifest["run.dataset_hash"] = data_hash or "none"
    manifest["run.artifacts"] = tuple(str(a) for a in artifacts) or "none"
    manifest.update({f"cmd.{k}": v for k, v in cmd_args.items()})
    path = out / "run.cfg"
    cfgfile.dump(path, manifest)
    return path


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg, out: Path) -> int:
    gen = gen_config(cfg)
    data = synth_dataset(gen, int(cfg["data.count"]), int(cfg["run.seed"]))
    write_manifest(out, "synth", cfg, {}, dataset_hash(data), [out / "data"])
    write_dataset(out / "data", data)
    print(f"wrote {len(data)} series to {out / 'data'} (hash {dataset_hash(data)})")
    return EXIT_OK


def _cmd_train(cfg, out: Path, kind: str, command: str) -> int:
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    train_data, val_data = load_data(cfg)
    ckpt, metrics = out / "checkpoint", out / "metrics.log"
    write_manifest(out, command, cfg, {}, dataset_hash(train_data), [ckpt, metrics])
    if metrics.exists():
        metrics.unlink()
    model, results = train(train_data, mcfg, tcfg, kind=kind, log_path=metrics, val_data=val_data)
    best = max(results, key=lambda r: r.best_f1)
    save_model(model, ckpt, {"run.best_f1": best.best_f1, "run.best_epoch": best.best_epoch,
                             "run.best_seed": best.seed})
    for r in results:
        print(f"seed {r.seed}: best F1 {r.best_f1:.4f} at epoch {r.best_epoch}")
    return EXIT_OK


def cmd_train(args, cfg, out):
    return _cmd_train(cfg, out, "hit", "train")


def cmd_train_baseline(args, cfg, out):
    return _cmd_train(cfg, out, "bitemporal", "train-baseline")


def cmd_sweep(args, cfg, out: Path) -> int:
    from .harness import SweepSpec, sweep

    try:
        spec = SweepSpec(args.param, tuple(args.values), args.runs)
        spec.configs(model_config(cfg))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_data, val_data = load_data(cfg)
    write_manifest(out, "sweep", cfg, {"param": args.param, "values": tuple(args.values), "runs": args.runs},
                   dataset_hash(train_data), [out / f"sweep_{spec.parameter}.tsv"])
    result = sweep(spec, model_config(cfg), train_data, train_config(cfg), val_data=val_data)
    result.write(out)
    print(result.table(), end="")
    return EXIT_OK


def cmd_infer(args, cfg, out: Path) -> int:
    model = load_model(args.ckpt)
    if not isinstance(model, HiTModel):
        raise UsageError(f"{args.ckpt} is not a history model checkpoint")
    image = read_raster(args.image)
    prob_path = out / f"prob_{args.tile}.hitr"
    write_manifest(out, "infer", cfg, {"store": args.store, "tile": args.tile, "ckpt": args.ckpt,
                                       "image": args.image, "timestamp": args.timestamp}, "", [prob_path])
    store = HEStore(args.store, config_hash=model.cfg.config_hash())
    he = store.get(args.tile) if args.tile in store else he_init(model.cfg, model.hit, args.tile)
    result = hit_step(image, he, model, timestamp=args.timestamp, decode=True)
    store.put(args.tile, result.he_next)
    store.flush()
    prob = (1.0 / (1.0 + np.exp(-result.logits.astype(np.float64)))).astype(np.float32)
    write_raster(prob_path, prob)
    print(f"tile {args.tile}: step {result.he_next.step_count}, changed fraction "
          f"{float((prob > 0.5).mean()):.4f}, probabilities in {prob_path}")
    return EXIT_OK


def cmd_footprint(args, cfg, out) -> int:
    rows = TABLE_ROWS if args.table else [(args.dim, args.tokens)]
    if not args.table and (args.dim is None or args.tokens is None):
        raise UsageError("footprint needs --dim and --tokens (or --table)")
    write_manifest(out, "footprint", cfg, {"dim": args.dim, "tokens": args.tokens, "table": args.table})
    for dim, tokens in rows:
        try:
            rep = footprint(dim, tokens)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.table:
            print(f"{dim}\t{tokens}\t{rep.row()}")
        else:
            print(rep.row())
            print(f"savings {rep.savings_percent:.2f}%")
    return EXIT_OK


def cmd_eval_persistence(args, cfg, out: Path) -> int:
    from .harness import eval_persistence_baseline, eval_persistence_hit, make_twin_scenes

    hit_model = load_model(args.ckpt) if args.ckpt else None
    base_model = load_model(args.baseline_ckpt) if args.baseline_ckpt else None
    if hit_model is None and base_model is None:
        raise UsageError("eval-persistence needs --ckpt and/or --baseline-ckpt")
    idx = int(cfg["eval.corrupt_index"])
    _, scenes = make_twin_scenes(gen_config(cfg), int(cfg["eval.scenes"]), int(cfg["eval.tiles"]), idx - 1,
                                 int(cfg["run.seed"]))
    write_manifest(out, "eval-persistence", cfg, {"ckpt": args.ckpt, "baseline_ckpt": args.baseline_ckpt}, "",
                   [out / "persistence_baseline.tsv", out / "persistence_hit.tsv"])
    report = None
    if base_model is not None:
        report = eval_persistence_baseline(base_model, scenes, report)
        (out / "persistence_baseline.tsv").write_text(report.baseline_table(), encoding="utf-8")
        print(report.baseline_table(), end="")
    if hit_model is not None:
        report = eval_persistence_hit(hit_model, scenes, report)
        (out / "persistence_hit.tsv").write_text(report.hit_table(), encoding="utf-8")
        print(report.hit_table(), end="")
    return EXIT_OK


def cmd_bench(args, cfg, out: Path) -> int:
    from .harness import bench_throughput

    model = load_model(args.ckpt) if args.ckpt else HiTModel(model_config(cfg), seed=int(cfg["run.seed"]))
    write_manifest(out, "bench", cfg, {"ckpt": args.ckpt}, "", [out / "bench.tsv"])
    workers = cfg["bench.workers"]
    report = bench_throughput(model, int(cfg["bench.warmup"]), int(cfg["bench.iters"]),
                              int(workers) if workers else None)
    (out / "bench.tsv").write_text(report.text(), encoding="utf-8")
    print(report.text(), end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out: Path) -> int:
    from .harness import toy_gradcheck

    write_manifest(out, "gradcheck", cfg, {"entries": args.entries}, "", [])
    report = toy_gradcheck(int(cfg["run.seed"]), args.entries or None)
    name, err = report.worst()
    ok = report.passed(1e-5)
    print(f"checked {report.checked_entries} entries; max relative error {err:.3e} ({name}); "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_replay(args, cfg, out: Path) -> int:
    manifest = cfgfile.load(args.manifest)
    command = manifest.get("run.command")
    if command not in COMMANDS or command == "replay":
        raise UsageError(f"manifest {args.manifest} names no replayable command")
    argv = ["--config", args.manifest, "--out", str(out), command]
    for key, value in manifest.items():
        if key.startswith("cmd.") and value is not None:
            flag = "--" + key[4:].replace("_", "-")
            if isinstance(value, bool):
                argv += [flag] if value else []
            elif isinstance(value, tuple):
                argv += [flag] + [cfgfile.format_value(v) for v in value]
            else:
                argv += [flag, cfgfile.format_value(value)]
    return main(argv)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "train-baseline": cmd_train_baseline, "sweep": cmd_sweep,
    "infer": cmd_infer, "footprint": cmd_footprint, "eval-persistence": cmd_eval_persistence,
    "bench": cmd_bench, "gradcheck": cmd_gradcheck, "replay": cmd_replay,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides run.seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: runs/<command>)")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="hitcd", description="Continuous change detection with history embeddings.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the history model")
    sub.add_parser("train-baseline", parents=[common], help="train the bitemporal baseline")
    p = sub.add_parser("sweep", parents=[common], help="sweep fuse stage, history dim or grid")
    p.add_argument("--param", required=True, choices=["fuse", "dim", "grid"])
    p.add_argument("--values", required=True, nargs="+", type=int)
    p.add_argument("--runs", type=int, default=3)
    p = sub.add_parser("infer", parents=[common], help="absorb one frame into a stored history")
    p.add_argument("--store", required=True)
    p.add_argument("--tile", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="HITR raster (bands, H, W)")
    p.add_argument("--timestamp", type=int, default=None)
    p = sub.add_parser("footprint", parents=[common], help="history-embedding storage footprint")
    p.add_argument("--dim", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--table", action="store_true", help="print every reference row")
    p = sub.add_parser("eval-persistence", parents=[common], help="corrupted-frame persistence evaluation")
    p.add_argument("--ckpt", help="history model checkpoint")
    p.add_argument("--baseline-ckpt", help="bitemporal baseline checkpoint")
    p = sub.add_parser("bench", parents=[common], help="throughput of one update plus decode")
    p.add_argument("--ckpt")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the toy model")
    p.add_argument("--entries", type=int, default=20, help="entries probed per tensor (0 = all)")
    p = sub.add_parser("replay", parents=[common], help="repeat a run from its run.cfg manifest")
    p.add_argument("manifest")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = cfgfile.parse_value(value)
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = args.seed
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("no command given")
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(message)s")
        cfg = resolve_config(getattr(args, "config", None), _overrides(args))
        out = Path(getattr(args, "out", None) or Path("runs") / args.command)
        return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hitcd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"hitcd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
