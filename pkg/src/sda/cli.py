"""Command-line entry point: ``sda {synth,pretrain,train,eval,translate,selftest}``.

Any config key can be given as ``--key=value`` (or ``--key value``); flags win over
the ``--config`` file. Exit codes: 0 success, 1 usage error, 2 runtime failure,
3 selftest failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, echo_config, parse_text
from .data import export_domain, to_uint8
from .evalrank import evaluate_encoder
from .experiments import load_benchmark
from .nets import translate_batches
from .trainer import (Checkpoint, RunState, joint_train, load_checkpoint, pretrain_source,
                      save_checkpoint)

log = logging.getLogger("sda")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
COMMANDS = ("synth", "pretrain", "train", "eval", "translate", "selftest")
LOCK_NAME = ".sda.lock"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    seed: int
    out_dir: str
    config_path: str | None
    config: str
    metric_files: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    duration_s: float = 0.0

    def referenced(self) -> list[str]:
        return self.metric_files + ([self.checkpoint] if self.checkpoint else [])


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    missing = [p for p in manifest.referenced() if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"manifest references missing files: {missing}")
    path = out_dir / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


@contextmanager
def locked(out_dir: Path):
    """Exclusive ownership of ``out_dir`` for the lifetime of one run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another run ({lock}); remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sda", description="Structured domain adaptation on re-ID data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name != "selftest":
            s.add_argument("--out", help="output directory")
        if name == "train":
            s.add_argument("--pretrained", help="checkpoint holding Fs/Cs from `pretrain`")
        if name in ("eval", "translate"):
            s.add_argument("--checkpoint", required=True)
        if name == "eval":
            s.add_argument("--model", default=None, help="network to score (default Ft, else Fs)")
        if name == "translate":
            s.add_argument("--count", type=int, default=8)
            s.add_argument("--scale", type=int, default=4, help="nearest-neighbour zoom of the grid")
        if name == "selftest":
            s.add_argument("--batches", type=int, default=5)
    return p


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            value = extra[i]
        else:
            raise UsageError(f"flag --{key} needs a value")
        out[key.replace("-", "_")] = value
        i += 1
    return out


def resolve_config(args, extra: list[str]) -> tuple[RunConfig, int]:
    """Defaults < config file < flags; seed: --seed, then file, then SDA_SEED, then 0."""
    file_pairs = parse_text(Path(args.config).read_text()) if args.config else {}
    flag_pairs = _split_overrides(extra)
    merged = {**file_pairs, **flag_pairs}
    if args.seed is not None:
        merged["seed"] = str(args.seed)
    elif "seed" not in merged and os.environ.get("SDA_SEED"):
        merged["seed"] = os.environ["SDA_SEED"]
    cfg = apply_overrides(RunConfig(), merged)
    return cfg, cfg.train.seed


def _need_out(args) -> Path:
    if not getattr(args, "out", None):
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out).resolve()


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig, seed: int, manifest: RunManifest) -> int:
    source, target = load_benchmark(cfg, seed)
    out = Path(manifest.out_dir)
    export_domain(source, out / "source")
    export_domain(target, out / "target")
    print(json.dumps({"source_train": len(source.train), "target_train": len(target.train),
                      "query": len(target.query), "gallery": len(target.gallery)}))
    return EXIT_OK


def _pretrain(cfg: RunConfig, source) -> dict:
    arch = cfg.train.arch(source.train.images.shape[1:])
    models, _ = pretrain_source(source.train, cfg.train, arch)
    return models


def cmd_pretrain(args, cfg: RunConfig, seed: int, manifest: RunManifest) -> int:
    source, target = load_benchmark(cfg, seed)
    models = _pretrain(cfg, source)
    out = Path(manifest.out_dir)
    state = RunState(models, {}, cfg.train.pretrain_epochs, np.random.default_rng(seed), cfg)
    ckpt = save_checkpoint(Checkpoint.from_state(state, {"stage": "pretrain"}), out / "pretrained.ckpt")
    manifest.checkpoint = str(ckpt)
    if target.query is not None and target.gallery is not None:
        arch = cfg.train.arch(source.train.images.shape[1:])
        m = evaluate_encoder(models["Fs"], arch, target.query, target.gallery)
        metrics = out / "pretrain_metrics.json"
        metrics.write_text(m.to_json() + "\n")
        manifest.metric_files.append(str(metrics))
        print(m.to_json())
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, seed: int, manifest: RunManifest) -> int:
    source, target = load_benchmark(cfg, seed)
    if args.pretrained:
        pretrained = load_checkpoint(args.pretrained).models
    else:
        log.info("no --pretrained checkpoint; pre-training the source encoder first")
        pretrained = _pretrain(cfg, source)
    out = Path(manifest.out_dir)
    csv_path, jsonl = out / "metrics.csv", out / "metrics.jsonl"
    csv_path.unlink(missing_ok=True)
    jsonl.unlink(missing_ok=True)

    def on_epoch(rec):
        if rec.metrics is not None:
            with jsonl.open("a") as fh:
                fh.write(json.dumps({"epoch": rec.epoch, **json.loads(rec.metrics.to_json()),
                                     "relation_gap": rec.relation_gap}, sort_keys=True) + "\n")

    res = joint_train(source, target, pretrained, cfg, csv_path=csv_path, on_epoch=on_epoch)
    ckpt = save_checkpoint(Checkpoint.from_state(res.state, {"stage": "joint"}), out / "final.ckpt")
    manifest.checkpoint = str(ckpt)
    manifest.metric_files += [str(p) for p in (csv_path, jsonl) if p.exists()]
    last = res.history[-1] if res.history else None
    if last is not None and last.metrics is not None:
        print(last.metrics.to_json())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, seed: int, manifest: RunManifest | None) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = ckpt.config
    source, target = load_benchmark(run, run.train.seed)
    if target.query is None or target.gallery is None:
        raise RuntimeError("target data has no query/gallery split to evaluate on")
    name = args.model or ("Ft" if "Ft" in ckpt.models else "Fs")
    if name not in ckpt.models:
        raise UsageError(f"checkpoint has no network {name!r}; has {sorted(ckpt.models)}")
    arch = run.train.arch(source.train.images.shape[1:])
    m = evaluate_encoder(ckpt.models[name], arch, target.query, target.gallery)
    print(m.to_json())
    if manifest is not None:
        path = Path(manifest.out_dir) / "eval.json"
        path.write_text(m.to_json() + "\n")
        manifest.metric_files.append(str(path))
    return EXIT_OK


def image_grid(rows: list[np.ndarray], scale: int = 1) -> np.ndarray:
    """Stack rows of [N,C,H,W] images into one uint8 [H', W', C] mosaic with 1-pixel gutters."""
    tiles = [np.concatenate([np.pad(t, ((0, 1), (0, 1), (0, 0)), constant_values=255)
                             for t in to_uint8(r)], axis=1) for r in rows]
    grid = np.concatenate(tiles, axis=0)
    return grid.repeat(scale, axis=0).repeat(scale, axis=1)


def cmd_translate(args, cfg: RunConfig, seed: int, manifest: RunManifest) -> int:
    from PIL import Image

    ckpt = load_checkpoint(args.checkpoint)
    if "G_st" not in ckpt.models or "G_ts" not in ckpt.models:
        raise UsageError("checkpoint has no translation networks; use one written by `train`")
    run = ckpt.config
    source, target = load_benchmark(run, run.train.seed)
    arch = run.train.arch(source.train.images.shape[1:])
    n = max(1, args.count)
    xs = source.train.images[np.linspace(0, len(source.train) - 1, n).astype(int)]
    xt = target.train.images[np.linspace(0, len(target.train) - 1, n).astype(int)]
    out = Path(manifest.out_dir)
    written = []
    for name, x, g in (("source_to_target", xs, "G_st"), ("target_to_source", xt, "G_ts")):
        path = out / f"{name}.png"
        Image.fromarray(image_grid([x, translate_batches(ckpt.models[g], x, arch.gen)],
                                   args.scale)).save(path)
        written.append(str(path))
    manifest.metric_files += written
    print(json.dumps({"written": written}))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(n_batches=args.batches) else EXIT_SELFTEST


HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "translate": cmd_translate}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.command is None:
            raise UsageError(f"choose a command: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        if args.command == "selftest":
            if extra:
                raise UsageError(f"selftest takes no config flags: {extra}")
            return cmd_selftest(args)
        cfg, seed = resolve_config(args, extra)
    except (UsageError, ConfigError, OSError) as e:
        print(f"sda: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "eval" and not args.out:
            return cmd_eval(args, cfg, seed, None)
        out = _need_out(args)
        with locked(out):
            t0 = time.perf_counter()
            manifest = RunManifest(args.command, seed, str(out), args.config, echo_config(cfg))
            code = HANDLERS[args.command](args, cfg, seed, manifest)
            manifest.duration_s = time.perf_counter() - t0
            write_manifest(manifest, out)
        return code
    except UsageError as e:
        print(f"sda: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to one exit code
        log.debug("run failed", exc_info=True)
        print(f"sda: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def manifest_config(path) -> RunConfig:
    """Re-parse the config echoed into a manifest."""
    text = json.loads(Path(path).read_text())["config"]
    return apply_overrides(RunConfig(), parse_text(text))


if __name__ == "__main__":
    sys.exit(main())
