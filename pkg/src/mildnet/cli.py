"""
Command-line entry point: ``mildnet synth | train | infer | rts | eval``.

Every command accepts ``--config FILE`` (JSON), ``--seed`` and ``--out``.
Settings resolve as built-in defaults, then the config file, then flags.
The resolved settings are written to ``config.json`` in the output
directory, and passing that file back with ``--config`` reproduces the run.

Config layout (all sections optional)::

    {
      "seed": 0,
      "synth":   {"count": 8, "size": 256, "grade": "benign", "ambiguous": 0, "val_fraction": 0.2},
      "model":   {... ModelConfig fields ...},
      "train":   {... TrainConfig fields ...},
      "augment": null | {... AugmentSpec fields ...},
      "rts":     {"n": 8, "pool": ["flip-h", ...], "threshold": null, "sweep": []},
      "infer":   {"tile": null}
    }

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentSpec, load_dataset, read_label, read_rgb, synth_glands, write_dataset, write_label, write_rgb
from .data.types import split_indices
from .errors import ConfigError, DataError, MildNetError
from .evaluation import EvalReport, aggregate, evaluate, postprocess
from .inference import predict_image
from .model import MILDNet, ModelConfig
from .training import TrainConfig, instance_edges, train
from .uncertainty import (
    DEFAULT_POOL,
    SweepItem,
    export_map,
    filter_instances,
    instance_uncertainty,
    parse_pool,
    rts_predict,
    uncertainty_sweep,
    write_sweep,
    write_tau_table,
)

SYNTH_DEFAULTS = {"count": 8, "size": 256, "grade": "benign", "ambiguous": 0, "val_fraction": 0.2}
RTS_DEFAULTS = {"n": 8, "pool": [str(t) for t in DEFAULT_POOL], "threshold": None, "sweep": [], "contour_threshold": 0.5}
INFER_DEFAULTS = {"tile": None}
OVERLAY_COLOUR = np.array([0, 255, 0], np.uint8)


# ----------------------------------------------------------------------
# config handling
# ----------------------------------------------------------------------
def _type_error(where: str, want: str, got: Any) -> ConfigError:
    return ConfigError(f"config field {where}: expected {want}, got {got!r}")


def _check_value(where: str, default: Any, value: Any, nullable: bool = False) -> Any:
    """Coerce ``value`` to the kind of ``default`` or raise naming ``where``."""
    if value is None and (nullable or default is None):
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _type_error(where, "true/false", value)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise _type_error(where, "an integer", value)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(where, "a number", value)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise _type_error(where, "a string", value)
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise _type_error(where, "a list", value)
        if default and all(isinstance(d, str) for d in default):
            if not all(isinstance(v, str) for v in value):
                raise _type_error(where, "a list of strings", value)
        elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise _type_error(where, "a list of numbers", value)
        return list(value)
    # optional numeric fields default to None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _type_error(where, "a number or null", value)
    return value


def _merge_section(name: str, defaults: Dict[str, Any], given: Any, nullable=frozenset()) -> Dict[str, Any]:
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise _type_error(name, "an object", given)
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown field(s) {unknown}")
    out = dict(defaults)
    for k, v in given.items():
        out[k] = _check_value(f"{name}.{k}", defaults[k], v, k in nullable)
    return out


def _nullable(cls) -> frozenset:
    return frozenset(f.name for f in dataclasses.fields(cls) if "Optional" in str(f.type) or "None" in str(f.type))


NULLABLE = {"model": _nullable(ModelConfig), "train": _nullable(TrainConfig), "augment": _nullable(AugmentSpec),
            "rts": frozenset({"threshold"}), "infer": frozenset({"tile"})}


def _dataclass_defaults(cls) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = list(f.default) if isinstance(f.default, tuple) else f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    return data


def _resolve(args, sections: Dict[str, Dict[str, Any]], overrides: Dict[Tuple[str, str], Any]) -> Dict[str, Any]:
    """defaults < config file < flags."""
    raw = _read_config(args.config)
    allowed = set(sections) | {"seed", "command", "paths"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown section(s) {unknown} for command {args.command!r}")
    cfg: Dict[str, Any] = {"command": args.command}
    seed = raw.get("seed", 0)
    if args.seed is not None:
        seed = args.seed
    cfg["seed"] = _check_value("seed", 0, seed)
    for name, defaults in sections.items():
        given = raw.get(name)
        if name == "augment" and given is None:
            cfg[name] = None
            continue
        cfg[name] = _merge_section(name, defaults, given, NULLABLE.get(name, frozenset()))
    for (section, key), value in overrides.items():
        if value is None:
            continue
        if cfg.get(section) is None:
            raise ConfigError(f"flag for {section}.{key} needs the {section!r} section enabled")
        cfg[section][key] = _check_value(f"{section}.{key}", sections[section][key], value)
    return cfg


def _write_config(out: Path, cfg: Dict[str, Any], paths: Dict[str, Optional[str]]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    full = dict(cfg)
    full["paths"] = {k: v for k, v in paths.items() if v is not None}
    (out / "config.json").write_text(json.dumps(full, sort_keys=True, indent=1) + "\n")


def _require(value: Optional[str], flag: str, raw: Dict[str, Any], key: str) -> str:
    if value is not None:
        return value
    got = raw.get("paths", {}).get(key) if isinstance(raw.get("paths"), dict) else None
    if got is None:
        raise ConfigError(f"missing required {flag}")
    return got


# ----------------------------------------------------------------------
# image discovery
# ----------------------------------------------------------------------
def _gather_images(path: str) -> List[Tuple[str, np.ndarray, Optional[np.ndarray]]]:
    """(name, image, labels or None) for a dataset directory, a directory
    of PNGs, or a single PNG, sorted by name."""
    p = Path(path)
    if p.is_file():
        return [(p.stem, read_rgb(p), None)]
    if not p.is_dir():
        raise DataError(f"{p}: no such file or directory")
    img_dir = p / "images" if (p / "images").is_dir() else p
    lab_dir = p / "labels" if (p / "labels").is_dir() else None
    out = []
    problems = []
    for f in sorted(img_dir.glob("*.png")):
        try:
            image = read_rgb(f)
        except (OSError, ValueError) as exc:
            problems.append(f"{f.name}: unreadable ({exc})")
            continue
        labels = None
        if lab_dir is not None and (lab_dir / f.name).exists():
            labels = read_label(lab_dir / f.name)
        out.append((f.stem, image, labels))
    if problems:
        raise DataError(f"{p}: {len(problems)} unreadable image(s)", problems)
    if not out:
        raise DataError(f"{p}: no PNG images found")
    return out


def _overlay(image: np.ndarray, instances: np.ndarray) -> np.ndarray:
    out = image.copy()
    out[instance_edges(instances) & (instances > 0)] = OVERLAY_COLOUR
    return out


def _load_model(path: str, tile: Optional[int]) -> MILDNet:
    model = ckpt.load(path).model()
    if model.cfg.in_channels != 3:
        raise ConfigError(f"checkpoint expects {model.cfg.in_channels} input channels; images are RGB")
    if tile is not None and (tile < 8 or tile % 8):
        raise ConfigError(f"tile must be a positive multiple of 8, got {tile}")
    return model


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _resolve(args, {"synth": SYNTH_DEFAULTS}, {
        ("synth", "count"): args.count,
        ("synth", "size"): args.size,
        ("synth", "grade"): args.grade,
        ("synth", "ambiguous"): args.ambiguous,
        ("synth", "val_fraction"): args.val_fraction,
    })
    s = cfg["synth"]
    if not 0 <= s["val_fraction"] < 1:
        raise ConfigError(f"config field synth.val_fraction: must be in [0, 1), got {s['val_fraction']}")
    out = Path(_require(args.out, "--out", _read_config(args.config), "out"))
    samples = synth_glands(s["count"], s["size"], grade=s["grade"], seed=cfg["seed"], ambiguous=s["ambiguous"])
    _, val = split_indices(len(samples), s["val_fraction"], cfg["seed"])
    write_dataset(out, samples, [samples[i].name for i in val])
    _write_config(out, cfg, {"out": str(out)})
    print(f"wrote {len(samples)} images to {out}")
    return 0


def cmd_train(args) -> int:
    model_defaults = _dataclass_defaults(ModelConfig)
    train_defaults = _dataclass_defaults(TrainConfig)
    cfg = _resolve(
        args,
        {"model": model_defaults, "train": train_defaults, "augment": _dataclass_defaults(AugmentSpec)},
        {
            ("model", "variant"): args.variant,
            ("model", "input_size"): args.input_size,
            ("train", "learning_rate"): args.lr,
            ("train", "max_steps"): args.steps,
            ("train", "max_epochs"): args.epochs,
            ("train", "batch_size"): args.batch_size,
            ("train", "target_dice"): args.target_dice,
        },
    )
    raw = _read_config(args.config)
    data = _require(args.data, "--data", raw, "data")
    out = Path(_require(args.out, "--out", raw, "out"))
    cfg["train"]["seed"] = cfg["seed"]
    tcfg = TrainConfig.from_dict(cfg["train"])
    aug = None if cfg["augment"] is None else AugmentSpec.from_dict(cfg["augment"])

    dataset = load_dataset(data, seed=cfg["seed"], val_fraction=tcfg.val_fraction)
    resume = None
    if args.resume is not None:
        resume = ckpt.load(args.resume)
        if resume.config.to_dict() != ModelConfig.from_dict(cfg["model"]).to_dict():
            raise ConfigError(f"{args.resume}: model config differs from the resolved one")
        model = resume.model()
    else:
        mcfg = ModelConfig.from_dict(cfg["model"])
        if mcfg.variant == "plus" and not dataset.has_lumen:
            raise ConfigError(f"--variant plus needs lumen labels, but {data} has no lumen/ directory")
        model = MILDNet(mcfg, seed=cfg["seed"])
    _write_config(out, cfg, {"data": data, "out": str(out), "resume": args.resume})
    result = train(model, dataset, tcfg, aug=aug, out_dir=out, resume=resume)
    print(f"trained {result.step} steps; best validation Dice {result.best_dice:.4f} at step {result.best_step}")
    return 0


def _infer_one(model, name, image, out: Path, tile) -> Dict[str, np.ndarray]:
    probs = predict_image(model, image, tile)
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    for branch, p in probs.items():
        export_map(d, branch, p[1])
    instances = postprocess(probs["gland"][1])
    write_label(d / "instances.png", instances)
    write_rgb(d / "overlay.png", _overlay(image, instances))
    return probs


def cmd_infer(args) -> int:
    cfg = _resolve(args, {"infer": INFER_DEFAULTS}, {("infer", "tile"): args.tile})
    raw = _read_config(args.config)
    checkpoint = _require(args.checkpoint, "--checkpoint", raw, "checkpoint")
    source = _require(args.input, "--input", raw, "input")
    out = Path(_require(args.out, "--out", raw, "out"))
    model = _load_model(checkpoint, cfg["infer"]["tile"])
    items = _gather_images(source)
    _write_config(out, cfg, {"checkpoint": checkpoint, "input": source, "out": str(out)})
    for name, image, _ in items:
        _infer_one(model, name, image, out, cfg["infer"]["tile"])
    print(f"wrote predictions for {len(items)} image(s) to {out}")
    return 0


def cmd_rts(args) -> int:
    cfg = _resolve(args, {"rts": RTS_DEFAULTS, "infer": INFER_DEFAULTS}, {
        ("rts", "n"): args.n,
        ("rts", "pool"): None if args.pool is None else [t for t in args.pool.split(",") if t],
        ("rts", "threshold"): args.threshold,
        ("rts", "sweep"): None if args.sweep is None else [float(t) for t in args.sweep.split(",") if t],
        ("infer", "tile"): args.tile,
    })
    raw = _read_config(args.config)
    checkpoint = _require(args.checkpoint, "--checkpoint", raw, "checkpoint")
    source = _require(args.input, "--input", raw, "input")
    out = Path(_require(args.out, "--out", raw, "out"))
    r = cfg["rts"]
    pool = parse_pool(r["pool"])
    if r["threshold"] is not None and r["threshold"] < 0:
        raise ConfigError(f"config field rts.threshold: must be >= 0, got {r['threshold']}")
    model = _load_model(checkpoint, cfg["infer"]["tile"])
    items = _gather_images(source)
    if r["sweep"]:
        missing = [name for name, _, labels in items if labels is None]
        if missing:
            raise DataError("a threshold sweep needs ground-truth labels", [f"{n}: no label map" for n in missing])
    _write_config(out, cfg, {"checkpoint": checkpoint, "input": source, "out": str(out)})

    sweep_items = []
    for i, (name, image, labels) in enumerate(items):
        um = rts_predict(model, image, n=r["n"], pool=pool, seed=[cfg["seed"], i], tile=cfg["infer"]["tile"],
                         contour_threshold=r["contour_threshold"])
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for branch, p in um.mu.items():
            export_map(d, f"mu_{branch}", p[1])
        for branch, v in um.variance.items():
            export_map(d, "sigma" if branch == "gland" else f"sigma_{branch}", v)
        for branch, v in um.sigma_hat.items():
            export_map(d, "sigma_hat" if branch == "gland" else f"sigma_hat_{branch}", v)
        (d / "transforms.txt").write_text("\n".join(str(t) for t in um.transforms) + "\n")
        instances = postprocess(um.mu["gland"][1])
        taus = {"sigma": instance_uncertainty(um.sigma, instances),
                "sigma_hat": instance_uncertainty(um.gland_sigma_hat, instances)}
        write_tau_table(d / "tau.tsv", taus, r["threshold"])
        write_label(d / "instances.png", instances)
        shown = instances
        if r["threshold"] is not None:
            shown, rep = filter_instances(instances, taus["sigma_hat"], r["threshold"])
            write_label(d / "filtered.png", shown)
        write_rgb(d / "overlay.png", _overlay(image, shown))
        if labels is not None:
            sweep_items.append(SweepItem(instances, labels, taus))
    if r["sweep"]:
        write_sweep(out / "sweep.tsv", uncertainty_sweep(sweep_items, r["sweep"]))
    print(f"wrote RTS outputs for {len(items)} image(s) to {out}")
    return 0


def _find_predictions(pred_dir: Path) -> Dict[str, Path]:
    found = {}
    for sub in sorted(p for p in pred_dir.iterdir() if p.is_dir()):
        if (sub / "instances.png").exists():
            found[sub.name] = sub / "instances.png"
    for f in sorted(pred_dir.glob("*.png")):
        found.setdefault(f.stem, f)
    return found


def cmd_eval(args) -> int:
    cfg = _resolve(args, {}, {})
    raw = _read_config(args.config)
    pred_dir = Path(_require(args.pred, "--pred", raw, "pred"))
    gt_dir = Path(_require(args.gt, "--gt", raw, "gt"))
    out = Path(_require(args.out, "--out", raw, "out"))
    if not pred_dir.is_dir():
        raise DataError(f"{pred_dir}: not a directory")
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir}: not a directory")
    preds = _find_predictions(pred_dir)
    label_dir = gt_dir / "labels" if (gt_dir / "labels").is_dir() else gt_dir
    gts = {f.stem: f for f in sorted(label_dir.glob("*.png"))}
    problems = [f"{n}: prediction without ground truth" for n in sorted(set(preds) - set(gts))]
    problems += [f"{n}: ground truth without prediction" for n in sorted(set(gts) - set(preds))]
    if problems:
        raise DataError(f"{len(problems)} unpaired file(s)", problems)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg, {"pred": str(pred_dir), "gt": str(gt_dir), "out": str(out)})
    reports = []
    for name in sorted(gts):
        pred, gt = read_label(preds[name]), read_label(gts[name])
        if pred.shape != gt.shape:
            raise DataError(f"{name}: prediction {pred.shape} and ground truth {gt.shape} differ in extent")
        rep = evaluate(pred, gt, name)
        (out / f"{name}.report.txt").write_text(rep.to_text())
        reports.append(rep)
    agg = aggregate(reports)
    lines = [EvalReport.SUMMARY_HEADER] + [r.summary_row() for r in reports]
    lines.append(f"mean\t{agg['f1']:.6f}\t{agg['object_dice']:.6f}\t{agg['object_hausdorff']:.6f}"
                 f"\t{agg['tp']}\t{agg['fp']}\t{agg['fn']}")
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    print(f"{agg['images']} image(s): F1 {agg['f1']:.4f}  object Dice {agg['object_dice']:.4f}  "
          f"object Hausdorff {agg['object_hausdorff']:.2f}")
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mildnet", description="Gland instance segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--grade", choices=["benign", "malignant"])
    p.add_argument("--ambiguous", type=int, help="unlabelled decoy glands per image")
    p.add_argument("--val-fraction", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    common(p)
    p.add_argument("--data")
    p.add_argument("--variant", choices=["standard", "plus"])
    p.add_argument("--input-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int, help="stop after this many updates")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--target-dice", type=float)
    p.add_argument("--resume", help="last.ckpt of an earlier run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict probability maps and instances")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="dataset directory, directory of PNGs, or one PNG")
    p.add_argument("--tile", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("rts", help="random transformation sampling with uncertainty maps")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--n", type=int, help="number of sampled transforms")
    p.add_argument("--pool", help="comma-separated transforms, e.g. flip-h,rot90,gaussian-blur(1)")
    p.add_argument("--threshold", type=float, help="drop instances with tau >= threshold")
    p.add_argument("--sweep", help="comma-separated thresholds for the F1 sweep (needs labels)")
    p.add_argument("--tile", type=int)
    p.set_defaults(func=cmd_rts)

    p = sub.add_parser("eval", help="score instance maps against ground truth")
    common(p)
    p.add_argument("--pred", help="directory of instance maps (or infer/rts output)")
    p.add_argument("--gt", help="dataset directory or directory of label PNGs")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MildNetError as exc:
        print(f"mildnet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
