"""Command-line entry point.

Every command that produces a run directory writes ``config.json`` (the
resolved configuration), ``run.json`` (seed, build id, command line) and a
metrics CSV before or while it works.  Exit codes: 0 success, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import resolve_arch
from .data import AugConfig, load_dataset, read_manifest, subtrain_subval_split, synthetic_dataset, write_dataset
from .errors import ContractError, DimensionError, FormatError, InfeasibleConstraintError, TrainingDivergedError
from .model import ViTRes
from .search import (
    EvoConfig,
    Population,
    SeparableFitness,
    count_params,
    estimate_macs,
    run_search,
    search_state,
)
from .space import SearchSpaceDef, decode, encode, resolve_space
from .supernet import SuperNet
from .train import (
    MetricsLog,
    TrainConfig,
    evaluate_top1,
    fit,
    load_training_checkpoint,
    new_state,
    save_training_checkpoint,
)

logger = logging.getLogger("vitresnas")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "RESNAS_SEED"
CHECKPOINT_NAME = "checkpoint.vrns"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    pass


# --- config handling -------------------------------------------------------------------


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def merge_overrides(config: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(config)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return out


def load_config(path: str | None, overrides: list[str]) -> dict:
    config: dict = {}
    if path:
        try:
            config = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"malformed config {path}: {e}") from e
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
    config = merge_overrides(config, overrides)
    if os.environ.get(SEED_ENV):
        try:
            config["seed"] = int(os.environ[SEED_ENV])
        except ValueError as e:
            raise UsageError(f"{SEED_ENV} must be an integer") from e
    config.setdefault("seed", 0)
    return config


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def prepare_run_dir(out: str, config: dict, argv: list[str]) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        run = {"seed": config.get("seed"), "build_id": build_id(), "argv": argv}
        (path / "run.json").write_text(json.dumps(run, indent=2) + "\n")
    except OSError as e:
        raise UsageError(f"cannot write run directory {path}: {e}") from e
    return path


def _train_config(config: dict) -> TrainConfig:
    train = dict(config.get("train", {}))
    train["seed"] = int(config["seed"])
    return TrainConfig.from_dict(train)


def _aug_config(config: dict) -> AugConfig:
    try:
        return AugConfig(**config.get("aug", {}))
    except TypeError as e:
        raise UsageError(f"bad aug section: {e}") from e


def _load_data(path: str) -> tuple[list, dict]:
    if not Path(path).is_dir():
        raise UsageError(f"data directory {path} not found")
    return load_dataset(path), read_manifest(path)


def _split(samples, cfg: TrainConfig):
    if cfg.per_class_val > 0:
        return subtrain_subval_split(samples, cfg.per_class_val, cfg.seed)
    return list(samples), None


# --- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.size % 14:
        raise UsageError(f"--size {args.size} must be a multiple of 14 (stem stride 2 then patch size 7)")
    if args.classes < 1 or args.count < 1:
        raise UsageError("--classes and --count must be positive")
    samples = synthetic_dataset(args.classes, args.count, args.size, args.seed)
    try:
        write_dataset(args.out, samples, args.classes)
    except OSError as e:
        raise UsageError(f"cannot write {args.out}: {e}") from e
    print(f"wrote {len(samples)} records to {args.out}")
    return EXIT_OK


def _fit_and_save(net, samples, val, cfg, aug, out: Path, state=None, stop_epoch=None) -> None:
    metrics = MetricsLog(out / METRICS_NAME)

    def checkpoint(st):
        save_training_checkpoint(out / CHECKPOINT_NAME, net, st, cfg)

    state = fit(net, samples, cfg, aug, val=val, metrics=metrics, state=state, on_epoch_end=checkpoint, stop_epoch=stop_epoch)
    checkpoint(state)
    losses = metrics.losses()
    if losses:
        print(f"trained {state.step} steps, final loss {losses[-1]:.4f}")


def cmd_train(args, argv) -> int:
    config = load_config(args.config, args.set)
    samples, manifest = _load_data(args.data)
    if args.resume:
        net, state, header = _load_ckpt(args.resume)
        if not isinstance(net, ViTRes):
            raise UsageError("--resume expects a standalone model checkpoint")
        cfg = TrainConfig.from_dict({**header["train_config"], **config.get("train", {})})
        fresh = new_state(len(_split(samples, cfg)[0]), cfg)
        if fresh.total_steps != state.total_steps:
            logger.warning("epoch count changed on resume; schedule length %d -> %d", state.total_steps, fresh.total_steps)
            state.total_steps, state.warmup_steps = fresh.total_steps, fresh.warmup_steps
        config["arch"] = net.arch.to_dict()
    else:
        arch = resolve_arch(config.get("arch", "toy"))
        arch = dataclasses.replace(arch, num_classes=int(manifest["num_classes"]), input_resolution=int(manifest["height"]))
        config["arch"] = arch.to_dict()
        cfg = _train_config(config)
        net, state = ViTRes.build(arch, cfg.seed), None
    config["train"] = dataclasses.asdict(cfg)
    out = prepare_run_dir(args.out, config, argv)
    train_set, val = _split(samples, cfg)
    _fit_and_save(net, train_set, val, cfg, _aug_config(config), out, state, args.stop_after_epoch)
    return EXIT_OK


def _space_for(config: dict, manifest: dict) -> SearchSpaceDef:
    space = resolve_space(config.get("space", "toy"))
    return dataclasses.replace(space, num_classes=int(manifest["num_classes"]), resolution=int(manifest["height"]))


def cmd_train_supernet(args, argv) -> int:
    config = load_config(args.config, args.set)
    samples, manifest = _load_data(args.data)
    space = _space_for(config, manifest)
    config["space"] = space.to_dict()
    cfg = _train_config(config)
    if cfg.batch_size % cfg.num_archs:
        raise UsageError(f"batch_size {cfg.batch_size} is not divisible by num_archs {cfg.num_archs}")
    config["train"] = dataclasses.asdict(cfg)
    out = prepare_run_dir(args.out, config, argv)
    train_set, val = _split(samples, cfg)
    net = SuperNet.build(space, cfg.seed)
    _train_supernet(net, train_set, val, cfg, _aug_config(config), out)
    return EXIT_OK


def _train_supernet(net, train_set, val, cfg, aug, out: Path) -> None:
    metrics = MetricsLog(out / METRICS_NAME)
    warm = out / "warmup.csv"
    with open(warm, "w", newline="") as f:
        csv.writer(f).writerow(["step", "epoch_fraction", "allowed_options", "full_options"])

    class _Log(MetricsLog):
        def append(self, rec):
            metrics.append(rec)
            if rec.extra:
                with open(warm, "a", newline="") as f:
                    csv.writer(f).writerow([rec.step, repr(rec.extra["epoch_fraction"]), rec.extra["allowed"], rec.extra["full"]])

    def checkpoint(st):
        save_training_checkpoint(out / CHECKPOINT_NAME, net, st, cfg)

    state = fit(net, train_set, cfg, aug, val=val, metrics=_Log(), on_epoch_end=checkpoint)
    checkpoint(state)
    print(f"trained super-network for {state.step} steps")


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_training_checkpoint(path)


def _load_evo(path: str | None, workers: int) -> EvoConfig:
    d: dict = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read evo config {path}: {e}") from e
    d.setdefault("workers", workers)
    try:
        return EvoConfig(**d)
    except TypeError as e:
        raise UsageError(f"bad evo config: {e}") from e


def supernet_fitness(net: SuperNet, val, batch_size: int = 64):
    """Sub-validation top-1 of a gene evaluated with inherited super-network weights."""

    def evaluate(gene) -> float:
        choice = decode(gene, net.space)
        return evaluate_top1(lambda x: net(x, [choice]), val, batch_size)

    return evaluate


def cmd_search(args, argv) -> int:
    seed = load_config(None, [])["seed"] if os.environ.get(SEED_ENV) else args.seed
    evo = _load_evo(args.evo_config, args.workers)
    if args.synthetic_fitness:
        space = resolve_space(args.space or "micro")
        fitness = SeparableFitness(space, seed)
    else:
        if not args.supernet_checkpoint or not args.data:
            raise UsageError("search needs --supernet-checkpoint and --data unless --synthetic-fitness is given")
        net, _, header = _load_ckpt(args.supernet_checkpoint)
        if not isinstance(net, SuperNet):
            raise UsageError("--supernet-checkpoint does not hold a super-network")
        if args.space and resolve_space(args.space).to_dict()["stages"] != net.space.to_dict()["stages"]:
            raise UsageError("--space does not match the checkpoint's search space")
        space = net.space
        samples, _ = _load_data(args.data)
        tcfg = TrainConfig.from_dict(header["train_config"])
        if tcfg.per_class_val > 0:
            _, val = subtrain_subval_split(samples, tcfg.per_class_val, tcfg.seed)
        else:
            val = samples
        fitness = supernet_fitness(net, val)
    if args.constraint_macs is not None:
        space = space.with_constraint(args.constraint_macs)
    config = {"seed": seed, "space": space.to_dict(), "evo": dataclasses.asdict(evo), "synthetic_fitness": args.synthetic_fitness}
    out = prepare_run_dir(args.out, config, argv)
    hist = out / "search_history.csv"
    with open(hist, "w", newline="") as f:
        csv.writer(f).writerow(["iteration", "best_fitness", "best_macs", "population"])
    rng = np.random.default_rng(seed)

    def on_iteration(pop: Population) -> None:
        best = pop.best()
        with open(hist, "a", newline="") as f:
            csv.writer(f).writerow([pop.iteration, repr(best.fitness), best.macs, len(pop)])
        (out / "search_state.json").write_text(json.dumps(search_state(pop, space, evo, rng, seed)))

    best = run_search(space, fitness, evo, rng, on_iteration=on_iteration)
    doc = {"gene": list(best.gene), "fitness": best.fitness, "macs": best.macs, "choice": decode(best.gene, space).to_dict()}
    (out / "best_gene.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"best fitness {best.fitness:.6f} at {best.macs / 1e9:.4f}G MACs")
    print(json.dumps(doc["gene"]))
    return EXIT_OK


def cmd_cost(args) -> int:
    arch = resolve_arch(args.arch)
    if args.resolution:
        arch = arch.with_resolution(args.resolution)
    macs, params = estimate_macs(arch), count_params(arch)
    print(f"arch: {args.arch}")
    print(f"resolution: {arch.input_resolution}")
    print(f"seq_lengths: {list(arch.seq_lengths)}")
    print(f"macs: {macs} ({macs / 1e9:.3f}G)")
    print(f"params: {params} ({params / 1e6:.2f}M)")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, _ = _load_ckpt(args.checkpoint)
    samples, _ = _load_data(args.data)
    if isinstance(net, SuperNet):
        if not args.gene:
            raise UsageError("evaluating a super-network checkpoint needs --gene")
        try:
            doc = json.loads(Path(args.gene).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read gene {args.gene}: {e}") from e
        model = net.extract(decode(doc["gene"] if isinstance(doc, dict) else doc, net.space))
    else:
        model = net
    acc = evaluate_top1(model, samples, args.batch_size)
    print(f"top1: {acc:.6f}")
    return EXIT_OK


def cmd_ablate_na(args, argv) -> int:
    """Train one super-network per N_a value on the same data, then search each
    and report the best sub-validation score.  Protocol only; no target."""
    config = load_config(args.config, args.set)
    samples, manifest = _load_data(args.data)
    space = _space_for(config, manifest)
    config["space"] = space.to_dict()
    base = _train_config(config)
    if base.per_class_val < 1:
        base = dataclasses.replace(base, per_class_val=max(1, len(samples) // (10 * int(manifest["num_classes"]))))
    config["train"] = dataclasses.asdict(base)
    out = prepare_run_dir(args.out, config, argv)
    evo = _load_evo(args.evo_config, args.workers)
    train_set, val = _split(samples, base)
    rows = []
    for na in args.num_archs:
        cfg = dataclasses.replace(base, num_archs=na)
        if cfg.batch_size % na:
            raise UsageError(f"batch_size {cfg.batch_size} is not divisible by N_a={na}")
        sub = out / f"na{na}"
        sub.mkdir(exist_ok=True)
        net = SuperNet.build(space, cfg.seed)
        _train_supernet(net, train_set, val, cfg, _aug_config(config), sub)
        best = run_search(space, supernet_fitness(net, val), evo, np.random.default_rng(cfg.seed))
        rows.append((na, best.fitness, best.macs, encode(decode(best.gene, space), space)))
        print(f"N_a={na}: best sub-val top1 {best.fitness:.4f} at {best.macs} MACs")
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["num_archs", "best_top1", "macs", "gene"])
        for na, fit_, macs, gene in rows:
            w.writerow([na, repr(fit_), macs, " ".join(map(str, gene))])
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitresnas", description="ViT-Res training, super-network search and cost reports")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--size", type=int, default=56)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    for name, hlp in (("train", "train a standalone network"), ("train-supernet", "train a super-network")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path config override")
        t.add_argument("--workers", type=int, default=1)
        if name == "train":
            t.add_argument("--resume", help="continue from a checkpoint")
            t.add_argument("--stop-after-epoch", type=int, help="end the run after this epoch (checkpoint kept)")

    s = sub.add_parser("search", help="MAC-constrained evolutionary search")
    s.add_argument("--supernet-checkpoint")
    s.add_argument("--data")
    s.add_argument("--space")
    s.add_argument("--constraint-macs", type=float)
    s.add_argument("--evo-config")
    s.add_argument("--synthetic-fitness", action="store_true", help="search a separable oracle landscape")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)

    c = sub.add_parser("cost", help="print MACs and parameter count")
    c.add_argument("--arch", required=True, help="fixture name or architecture JSON path")
    c.add_argument("--resolution", type=int)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--gene", help="gene JSON, for super-network checkpoints")
    e.add_argument("--batch-size", type=int, default=64)

    a = sub.add_parser("ablate-na", help="compare super-networks trained with different N_a")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--num-archs", type=int, nargs="+", default=[1, 16])
    a.add_argument("--evo-config")
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--workers", type=int, default=1)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": lambda: cmd_gen_data(args),
        "train": lambda: cmd_train(args, argv),
        "train-supernet": lambda: cmd_train_supernet(args, argv),
        "search": lambda: cmd_search(args, argv),
        "cost": lambda: cmd_cost(args),
        "eval": lambda: cmd_eval(args),
        "ablate-na": lambda: cmd_ablate_na(args, argv),
    }
    try:
        return handlers[args.command]()
    except (UsageError, ContractError, DimensionError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, InfeasibleConstraintError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
