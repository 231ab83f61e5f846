"""keyfort command line: keygen, transform, pretrain, finetune, proliferate,
attack, eval, matrix, sweep and replay.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Every command
writes a run manifest next to its outputs; ``keyfort replay MANIFEST`` runs
the recorded command again.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .attacks import AttackConfig, craft, save_adversarial_batch
from .data_io import DataFormatError, Dataset, export_ppm, open_dataset, save_dataset
from .evalharness import GridModel, epsilon_sweep, run_grid, transfer_matrix, write_sweep_tsv
from .keyed_transform import BlockTilingError, InvalidKeyError, Key, generate_key, inverse_transform, transform
from .metrics import accuracy
from .model import ModelConfig, Pipeline, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, finetune, pretrain, proliferate

log = logging.getLogger("keyfort")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    """Bad arguments, configs or inputs; maps to exit code 1."""


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


# argument types


def positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def number(s: str) -> float:
    """Float, also accepting fractions such as 4/255."""
    try:
        return float(Fraction(s.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from e


def number_list(s: str) -> list[float]:
    return [number(p) for p in s.split(",") if p.strip()]


def int_list(s: str) -> list[int]:
    return [int(p) for p in s.split(",") if p.strip()]


def str_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


# manifests and atomic outputs


def git_blob_hash(path: Path) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\0" % path.stat().st_size)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for q in sorted(x for x in p.rglob("*") if x.is_file()):
                out[str(q)] = git_blob_hash(q)
        elif p.exists():
            out[str(p)] = git_blob_hash(p)
    return out


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


class Outputs:
    """Collects output paths; files are written to temporaries and renamed
    into place only when the whole command succeeds."""

    def __init__(self, force: bool):
        self.force = force
        self.pending: list[tuple[Path, Path]] = []

    def claim(self, path, is_dir: bool = False) -> Path:
        path = Path(path)
        if path.exists() and not self.force:
            raise ValidationError(f"{path} exists (use --force to overwrite)")
        path.parent.mkdir(parents=True, exist_ok=True)
        if is_dir:
            tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"))
        else:
            fd, name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            os.close(fd)
            tmp = Path(name)
        self.pending.append((tmp, path))
        return tmp

    def commit(self) -> list[Path]:
        done = []
        for tmp, final in self.pending:
            if final.is_dir() and not final.is_symlink():
                shutil.rmtree(final)
            os.replace(tmp, final)
            done.append(final)
        self.pending = []
        return done

    def discard(self) -> None:
        for tmp, _ in self.pending:
            if tmp.is_dir():
                shutil.rmtree(tmp, ignore_errors=True)
            else:
                tmp.unlink(missing_ok=True)
        self.pending = []


def write_manifest(anchor: Path, command: str, argv: list[str], resolved: dict, seeds: dict,
                   inputs: list, outputs: list[Path], wall_clock: float, timing: Optional[dict] = None) -> Path:
    path = anchor / "manifest.json" if anchor.is_dir() else anchor.with_name(anchor.name + ".manifest.json")
    doc = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "resolved_config": resolved,
        "seeds": seeds,
        "inputs": hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_s": wall_clock,
    }
    if timing:
        doc["timing"] = timing
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# config merging


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    return doc


TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
               "label_smoothing": "label_smoothing", "warmup_fraction": "warmup_fraction",
               "lora_rank": "rank", "lora_alpha": "alpha"}
MODEL_FLAGS = {"vit_patch": "vit_patch", "embed_dim": "embed_dim", "num_heads": "heads",
               "num_blocks": "blocks", "mlp_ratio": "mlp_ratio"}
ATTACK_FLAGS = {"norm": "norm", "epsilon": "epsilon", "steps": "steps", "step_size": "step_size",
                "seed": "attack_seed", "batch_size": "attack_batch"}


def merged(section: dict, args, mapping: dict) -> dict:
    out = dict(section)
    for field_name, attr in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[field_name] = v
    return out


def build_train_config(args, mode: str, cfg: dict) -> TrainConfig:
    d = merged(cfg.get("train", {}), args, TRAIN_FLAGS)
    d["mode"] = mode
    if getattr(args, "no_hflip", False):
        d["hflip"] = False
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"invalid train config: {e}") from e


def build_attack_config(args, cfg: dict, **override) -> AttackConfig:
    d = merged(cfg.get("attack", {}), args, ATTACK_FLAGS)
    d.update(override)
    if getattr(args, "no_random_start", False):
        d["random_start"] = False
    if getattr(args, "target", None) is not None:
        d["targeted"], d["target"] = True, args.target
    try:
        return AttackConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"invalid attack config: {e}") from e


# loaders that turn bad inputs into validation errors


def load_key(path) -> Key:
    try:
        return Key.load(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot load key {path}: {e}") from e


def load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot load checkpoint {path}: {e}") from e


def load_data(path, split: str, subset: Optional[int] = None) -> Dataset:
    try:
        return open_dataset(path, split).subset(subset)
    except (OSError, DataFormatError, ValueError) as e:
        raise ValidationError(f"cannot load {split} split from {path}: {e}") from e


def check_key_fits(key: Key, data: Dataset) -> None:
    c, h, w = data.image_shape
    if key.channels != c:
        raise ValidationError(f"key has {key.channels} channel(s) but images have {c}")
    if h % key.block_size or w % key.block_size:
        raise ValidationError(f"images are {h}x{w}, not divisible by block size {key.block_size}")


def parse_models(items: list[str]) -> list[tuple[str, str]]:
    """``id=path`` or bare ``path`` (id = file stem)."""
    out = []
    for it in items:
        mid, _, path = it.partition("=") if "=" in it else (Path(it).stem, "", it)
        out.append((mid, path))
    ids = [m for m, _ in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate model ids {ids}")
    return out


# commands. Each returns (plan, outputs-anchor info) after validation; plan() does the work.


def cmd_keygen(args, cfg, outs: Outputs):
    if args.block_size < 1 or args.channels < 1:
        raise ValidationError("block size and channels must be >= 1")
    target = outs.claim(args.out)

    def run():
        key = generate_key(args.seed, args.block_size, args.channels)
        key.save(target)
        print(f"perm_length={key.length} crc32={key.checksum:#010x}")
        return {"seeds": {"key": args.seed}, "resolved": key.to_dict() | {"perm": f"<{key.length} entries>"}}

    return run, Path(args.out), []


def cmd_transform(args, cfg, outs: Outputs):
    key = load_key(args.key)
    splits = args.split
    data = {s: load_data(args.input, s) for s in splits}
    for ds in data.values():
        try:
            check_key_fits(key, ds)
        except ValidationError as e:
            raise ValidationError(f"{e} (dims {ds.image_shape[1]}x{ds.image_shape[2]}, P={key.block_size})") from None
    tmp = outs.claim(args.out, is_dir=True)

    def run():
        f = inverse_transform if args.inverse else transform
        for s, ds in data.items():
            out = ds.with_images(f(ds.images, key).astype(np.float32))
            save_dataset(out, tmp)
            if args.export_ppm and s == splits[0]:
                prev = tmp / "previews"
                prev.mkdir(exist_ok=True)
                for i in range(min(args.export_ppm, len(ds))):
                    if ds.channels in (1, 3):
                        export_ppm(ds.images[i], prev / f"{s}_{i:05d}_plain.ppm")
                        export_ppm(out.images[i], prev / f"{s}_{i:05d}_keyed.ppm")
        return {"seeds": {"key": key.seed}, "resolved": {"inverse": args.inverse, "splits": splits}}

    return run, Path(args.out), [args.key, args.input]


def _model_config(args, cfg, data: Dataset) -> ModelConfig:
    d = merged(cfg.get("model", {}), args, MODEL_FLAGS)
    c, h, w = data.image_shape
    d.update(image_size=(h, w), channels=c, num_classes=data.num_classes)
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"invalid model config: {e}") from e


def _write_train_outputs(model, report, ckpt_tmp: Path, final: Path, reproducible: bool):
    timing = {"train_wall_clock_s": report.wall_clock_s}
    if reproducible:
        report.wall_clock_s = None
    report.checkpoint = str(final)
    save_checkpoint(model, ckpt_tmp)
    return report, timing


def cmd_pretrain(args, cfg, outs: Outputs):
    train = load_data(args.data, "train", args.subset)
    val = load_data(args.data, "test", args.val_subset) if args.val_subset != 0 else None
    tc = build_train_config(args, "pretrain", cfg)
    mc = _model_config(args, cfg, train)
    ck = outs.claim(args.out)
    rj = outs.claim(Path(args.out).with_suffix(".report.json"))
    rc = outs.claim(Path(args.out).with_suffix(".report.csv"))

    def run():
        model, report = pretrain(train, tc, mc, val)
        report, timing = _write_train_outputs(model, report, ck, Path(args.out), args.reproducible)
        report.write_json(rj)
        report.append_csv(rc)
        print(f"final train loss {report.final_loss:.4f} (initial {report.initial_loss:.4f})")
        return {"seeds": {"train": tc.seed}, "resolved": {"train": tc.to_dict(), "model": mc.to_dict()},
                "timing": timing}

    return run, Path(args.out), [args.data]


def cmd_finetune(args, cfg, outs: Outputs):
    m0 = load_model(args.base)
    key = load_key(args.key)
    train = load_data(args.data, "train", args.subset)
    val = load_data(args.data, "test", args.val_subset) if args.val_subset != 0 else None
    check_key_fits(key, train)
    tc = build_train_config(args, f"finetune_{args.mode}", cfg)
    ck = outs.claim(args.out)
    rj = outs.claim(Path(args.out).with_suffix(".report.json"))
    rc = outs.claim(Path(args.out).with_suffix(".report.csv"))

    def run():
        model, report = finetune(m0, key, train, tc, val)
        report, timing = _write_train_outputs(model, report, ck, Path(args.out), args.reproducible)
        report.write_json(rj)
        report.append_csv(rc)
        print(f"final train loss {report.final_loss:.4f} (initial {report.initial_loss:.4f})")
        return {"seeds": {"train": tc.seed, "key": key.seed}, "resolved": {"train": tc.to_dict()}, "timing": timing}

    return run, Path(args.out), [args.base, args.key, args.data]


def cmd_proliferate(args, cfg, outs: Outputs):
    m0 = load_model(args.base)
    train = load_data(args.data, "train", args.subset)
    val = load_data(args.data, "test", args.val_subset) if args.val_subset != 0 else None
    if len(set(args.seeds)) != len(args.seeds):
        raise ValidationError(f"duplicate seeds {args.seeds}")
    check_key_fits(generate_key(args.seeds[0], args.block_size, train.channels), train)
    tc = build_train_config(args, f"finetune_{args.mode}", cfg)
    tmp = outs.claim(args.out, is_dir=True)

    def run():
        timing = {}
        for key, model, report in proliferate(m0, args.seeds, train, tc, args.block_size, val):
            stem = f"key{key.seed}"
            key.save(tmp / f"{stem}.key.json")
            timing[stem] = report.wall_clock_s
            if args.reproducible:
                report.wall_clock_s = None
            report.checkpoint = str(Path(args.out) / f"{stem}.ckpt")
            save_checkpoint(model, tmp / f"{stem}.ckpt")
            report.write_json(tmp / f"{stem}.report.json")
            report.append_csv(tmp / "reports.csv")
        return {"seeds": {"train": tc.seed, "keys": args.seeds}, "resolved": {"train": tc.to_dict(), "block_size": args.block_size},
                "timing": timing}

    return run, Path(args.out), [args.base, args.data]


def cmd_attack(args, cfg, outs: Outputs):
    source = load_model(args.source)
    targets = parse_models(args.eval_models or [])
    target_models = [(mid, load_model(p)) for mid, p in targets]
    data = load_data(args.data, args.split, args.subset)
    acfg = build_attack_config(args, cfg)
    out = outs.claim(args.out)

    def run():
        batch = craft(Pipeline(source, source.key), data.images, data.labels, acfg, args.method)
        batch.check_feasible()
        save_adversarial_batch(batch, out)
        print(f"source success rate {float(np.mean(batch.success)):.4f}")
        for mid, m in target_models:
            print(f"{mid}: accuracy {accuracy(Pipeline(m, m.key), batch.adversarial, data.labels):.4f}")
        return {"seeds": {"attack": acfg.seed}, "resolved": {"attack": acfg.to_dict(), "method": args.method}}

    inputs = [args.source, args.data] + [p for _, p in targets]
    return run, Path(args.out), inputs


def _grid_models(args) -> list[GridModel]:
    models = []
    surrogates = dict(parse_models(args.surrogate or []))
    for mid, path in parse_models(args.models):
        sur = load_model(surrogates[mid]) if mid in surrogates else None
        guessed = sur.key.seed if sur is not None and sur.key is not None else None
        if guessed is None and args.guessed_seed is not None:
            guessed = args.guessed_seed
        models.append(GridModel(mid, load_model(path), sur, guessed))
    return models


def _budgets(args, cfg) -> list[AttackConfig]:
    out = []
    for norm in args.norm_list:
        eps = args.epsilon if args.epsilon is not None else (4 / 255 if norm == "inf" else 0.5)
        out.append(build_attack_config(args, cfg, norm=norm, epsilon=eps))
    return out


def cmd_eval(args, cfg, outs: Outputs):
    models = _grid_models(args)
    m_o = load_model(args.pretrained) if args.pretrained else None
    data = load_data(args.data, args.split, args.subset)
    budgets = _budgets(args, cfg)
    needs_train = "adaptive" in args.scenario and any(gm.surrogate is None and gm.model.key is not None for gm in models)
    train = load_data(args.data, "train", args.train_subset) if needs_train else None
    tc = build_train_config(args, "finetune_full", cfg) if needs_train else None
    if "non_adaptive" in args.scenario and m_o is None and any(gm.model.key is not None for gm in models):
        raise ValidationError("non_adaptive scenario needs --pretrained")
    if needs_train and (args.guessed_seed is None or m_o is None):
        raise ValidationError("adaptive scenario without --surrogate needs --guessed-seed and --pretrained")
    prefix = Path(args.out)
    csv_tmp = outs.claim(prefix.with_suffix(".csv"))
    json_tmp = outs.claim(prefix.with_suffix(".json"))

    def run():
        report = run_grid(models, args.scenario, budgets, data, m_o, args.method, train, tc)
        csv_tmp.write_text(report.to_csv())
        json_tmp.write_text(report.to_json())
        for r in report.rows:
            print(f"{r.model_id:>16} {r.scenario:>12} {r.norm:>4} eps={r.epsilon:.5f} acc={r.accuracy:.4f}")
        return {"seeds": {"attack": budgets[0].seed}, "resolved": {"attacks": [b.to_dict() for b in budgets],
                "scenarios": args.scenario, "method": args.method, "train": tc.to_dict() if tc else None}}

    inputs = [p for _, p in parse_models(args.models)] + [p for _, p in parse_models(args.surrogate or [])]
    inputs += [args.data] + ([args.pretrained] if args.pretrained else [])
    return run, prefix.with_suffix(".csv"), inputs


def cmd_matrix(args, cfg, outs: Outputs):
    data = load_data(args.data, args.split, args.subset)
    acfg = build_attack_config(args, cfg)
    if args.models:
        if args.keys is not None:
            raise ValidationError("use either --models or --keys, not both")
        loaded = [GridModel(mid, load_model(p)) for mid, p in parse_models(args.models)]
        build = None
        inputs = [p for _, p in parse_models(args.models)] + [args.data]
    else:
        if args.keys is None or args.base is None:
            raise ValidationError("matrix needs --models, or --keys N with --base")
        if args.keys < 2:
            raise ValidationError("--keys must be >= 2")
        m0 = load_model(args.base)
        seeds = args.seeds if args.seeds else list(range(1, args.keys + 1))
        if len(seeds) != args.keys or len(set(seeds)) != len(seeds):
            raise ValidationError(f"need {args.keys} distinct seeds, got {seeds}")
        train = load_data(args.data, "train", args.train_subset)
        check_key_fits(generate_key(seeds[0], args.block_size, train.channels), train)
        tc = build_train_config(args, f"finetune_{args.mode}", cfg)
        loaded = None
        inputs = [args.base, args.data]

        def build():
            return [GridModel(f"key{k.seed}", m) for k, m, _ in proliferate(m0, seeds, train, tc, args.block_size)]

    out = outs.claim(args.out)

    def run():
        models = loaded if loaded is not None else build()
        tm = transfer_matrix(models, data, acfg, args.method)
        out.write_text(tm.to_csv())
        print(tm.to_csv(), end="")
        return {"seeds": {"attack": acfg.seed, "keys": [gm.model.key.seed for gm in models]},
                "resolved": {"attack": acfg.to_dict(), "method": args.method}}

    return run, Path(args.out), inputs


def cmd_sweep(args, cfg, outs: Outputs):
    models = _grid_models(args)
    m_o = load_model(args.pretrained) if args.pretrained else None
    data = load_data(args.data, args.split, args.subset)
    base = build_attack_config(args, cfg, norm=args.norm, epsilon=0.0)
    eps = args.epsilons
    if not eps or eps[0] != 0 or sorted(eps) != eps:
        raise ValidationError("--epsilons must be ascending and start at 0")
    if args.scenario == "non_adaptive" and m_o is None:
        raise ValidationError("non_adaptive sweep needs --pretrained")
    prefix = Path(args.out)
    csv_tmp = outs.claim(prefix.with_suffix(".csv"))
    tsv_dir = outs.claim(prefix.parent / (prefix.name + "_tsv"), is_dir=True)

    def run():
        rep = epsilon_sweep(models, args.norm, eps, data, base, args.scenario, m_o, args.method)
        csv_tmp.write_text(rep.to_csv())
        write_sweep_tsv(rep, tsv_dir, prefix.name)
        print(rep.to_csv(), end="")
        return {"seeds": {"attack": base.seed}, "resolved": {"attack": base.to_dict(), "epsilons": eps,
                "scenario": args.scenario, "method": args.method}}

    inputs = [p for _, p in parse_models(args.models)] + [args.data] + ([args.pretrained] if args.pretrained else [])
    return run, prefix.with_suffix(".csv"), inputs


def cmd_replay(args, cfg, outs: Outputs):
    try:
        doc = json.loads(Path(args.manifest).read_text())
        argv = list(doc["argv"])
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read manifest {args.manifest}: {e}") from e
    if argv and argv[0] == "replay":
        raise ValidationError("refusing to replay a replay")
    return None, None, argv + (["--force"] if "--force" not in argv else [])


# parser


def _add_common(p):
    p.add_argument("--config", help="JSON config with optional train/model/attack sections")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--threads", type=positive_int, default=None, help="BLAS threads (default $KEYFORT_THREADS or 1)")
    p.add_argument("--no-reproducible", dest="reproducible", action="store_false",
                   help="allow run-dependent fields (wall-clock) in reports")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train(p, lora: bool = False):
    p.add_argument("--epochs", type=nonneg_int)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=number)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-smoothing", type=number)
    p.add_argument("--warmup-fraction", type=number)
    p.add_argument("--no-hflip", action="store_true", help="disable random horizontal flips")
    p.add_argument("--subset", type=positive_int, help="use the first N training images")
    p.add_argument("--val-subset", type=nonneg_int, default=None, help="validation images (0 disables)")
    if lora:
        p.add_argument("--mode", choices=["full", "lora"], default="full")
        p.add_argument("--rank", type=positive_int)
        p.add_argument("--alpha", type=number)


def _add_attack(p):
    p.add_argument("--epsilon", type=number)
    p.add_argument("--steps", type=positive_int)
    p.add_argument("--step-size", type=number)
    p.add_argument("--attack-seed", type=int)
    p.add_argument("--attack-batch", type=positive_int)
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--target", type=int, help="targeted attack towards this label")
    p.add_argument("--method", choices=["pgd", "fgsm"], default="pgd")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--subset", type=positive_int)


def build_parser() -> argparse.ArgumentParser:
    ap = UsageParser(prog="keyfort", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"keyfort {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("keygen", help="generate a block-shuffle key")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--block-size", type=int, required=True)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("transform", help="shuffle (or unshuffle) a dataset with a key")
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--split", type=str_list, default=["train", "test"])
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--export-ppm", type=nonneg_int, default=0, metavar="N", help="write N PPM previews")
    _add_common(p)

    p = sub.add_parser("pretrain", help="train the plain model M_o")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for flag, t in (("--vit-patch", positive_int), ("--embed-dim", positive_int), ("--heads", positive_int),
                    ("--blocks", positive_int), ("--mlp-ratio", positive_int)):
        p.add_argument(flag, type=t)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune M_o on key-shuffled images")
    p.add_argument("--base", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train(p, lora=True)
    _add_common(p)

    p = sub.add_parser("proliferate", help="one key + fine-tuned model per seed")
    p.add_argument("--base", required=True)
    p.add_argument("--seeds", type=int_list, required=True)
    p.add_argument("--block-size", type=positive_int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_train(p, lora=True)
    _add_common(p)

    p = sub.add_parser("attack", help="craft adversarial examples on a source model")
    p.add_argument("--source", required=True, help="checkpoint the examples are crafted on")
    p.add_argument("--eval", dest="eval_models", action="append", help="id=checkpoint to evaluate (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--norm", choices=["inf", "2"], default="inf")
    p.add_argument("--out", required=True, help="adversarial batch container")
    _add_attack(p)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a scenario grid")
    p.add_argument("--models", type=str_list, required=True, help="id=checkpoint,...")
    p.add_argument("--pretrained", help="plain pre-trained checkpoint M_o")
    p.add_argument("--surrogate", type=str_list, help="id=checkpoint of guessed-key surrogates")
    p.add_argument("--guessed-seed", type=int)
    p.add_argument("--scenario", type=str_list, default=["clean"])
    p.add_argument("--norm", dest="norm_list", type=str_list, default=["inf"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output prefix (.csv and .json are written)")
    p.add_argument("--train-subset", type=positive_int)
    _add_attack(p)
    _add_train_flags_for_surrogate(p)
    _add_common(p)

    p = sub.add_parser("matrix", help="cross-key transfer matrix")
    p.add_argument("--models", type=str_list)
    p.add_argument("--keys", type=int)
    p.add_argument("--seeds", type=int_list)
    p.add_argument("--base")
    p.add_argument("--block-size", type=positive_int, default=4)
    p.add_argument("--data", required=True)
    p.add_argument("--norm", choices=["inf", "2"], default="inf")
    p.add_argument("--out", required=True)
    p.add_argument("--train-subset", type=positive_int)
    p.add_argument("--mode", choices=["full", "lora"], default="full")
    _add_attack(p)
    _add_train_flags_for_surrogate(p)
    _add_common(p)

    p = sub.add_parser("sweep", help="accuracy versus epsilon")
    p.add_argument("--models", type=str_list, required=True)
    p.add_argument("--pretrained")
    p.add_argument("--surrogate", type=str_list)
    p.add_argument("--guessed-seed", type=int)
    p.add_argument("--norm", choices=["inf", "2"], default="inf")
    p.add_argument("--epsilons", type=number_list, default=[0, 1 / 255, 2 / 255, 4 / 255, 8 / 255])
    p.add_argument("--scenario", choices=["whitebox", "non_adaptive"], default="whitebox")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    _add_attack(p)
    _add_common(p)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _add_train_flags_for_surrogate(p):
    p.add_argument("--epochs", type=nonneg_int)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=number)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-smoothing", type=number)
    p.add_argument("--warmup-fraction", type=number)
    p.add_argument("--no-hflip", action="store_true")


COMMANDS: dict[str, Callable] = {
    "keygen": cmd_keygen,
    "transform": cmd_transform,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "proliferate": cmd_proliferate,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "sweep": cmd_sweep,
    "replay": cmd_replay,
}


@contextmanager
def _threads(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    outs = Outputs(getattr(args, "force", False))
    try:
        cfg = load_config(getattr(args, "config", None))
        plan, anchor, inputs = COMMANDS[args.command](args, cfg, outs)
    except (ValidationError, InvalidKeyError, BlockTilingError, DataFormatError) as e:
        outs.discard()
        print(f"keyfort {args.command}: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command == "replay":
        log.info("replaying: keyfort %s", " ".join(inputs))
        return main(inputs)
    threads = args.threads or int(os.environ.get("KEYFORT_THREADS", "1") or 1)
    t0 = time.perf_counter()
    try:
        with _threads(threads):
            info = plan() or {}
        wall = time.perf_counter() - t0
        finals = outs.commit()
    except Exception as e:  # noqa: BLE001 - any failure here is a runtime failure
        outs.discard()
        log.debug("runtime failure", exc_info=True)
        print(f"keyfort {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    resolved = dict(info.get("resolved", {}))
    resolved["threads"] = threads
    resolved["reproducible"] = args.reproducible
    write_manifest(anchor, args.command, argv, resolved, info.get("seeds", {}), inputs, finals, wall, info.get("timing"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
