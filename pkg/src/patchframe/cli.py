"""Command-line entry points tying the pipeline together.

Subcommands: synth, train-toy, attack, defend, eval, report. Long
parameter lists live in a plain-text config file (`key = value` per line,
`#` comments); every key can be overridden on the command line. Each run
writes its fully resolved config next to the artifacts, and the sha256 of
that document is the run's config digest.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import artifacts as arts
from . import images
from .attack import AdversarialPatch, AttackConfig, load_palette, optimize_patch
from .data import LabeledDataset, load_dataset, save_dataset
from .defense import DefenseConfig, WhiteFrame, optimize_swf, optimize_uwf
from .detector import TrainConfig, detect, load_toy_detector, save_toy_detector, train_toy_detector
from .evaluation import (
    EvalCondition,
    EvalConfig,
    adaptive_attack_eval,
    emit_plots,
    evaluate_condition,
    objectness_map_report,
    per_image_attack_eval,
    report_from_dict,
    report_to_dict,
    thickness_sweep,
)
from .rng import derive_seed
from .synth import generate_synthetic_dataset


class UsageError(Exception):
    pass


# every recognized config key with its default and parser
_KEYS = {
    "seed": (0, int),
    "n": (100, int),
    "out": ("runs/out", str),
    "dataset": ("", str),
    "detector": ("", str),
    "image": ("", str),
    "patch": ("", str),
    "frame": ("", str),
    "variant": ("adv-patch", str),
    "steps": (200, int),
    "lr": (0.03, float),
    "w_obj": (1.0, float),
    "w_tv": (2.5, float),
    "w_nps": (0.01, float),
    "patch_scale_factor": (0.3, float),
    "patch_side": (32, int),
    "batch_size": (8, int),
    "palette": ("", str),
    "thickness": (80.0, float),
    "epochs": (10, int),
    "patch_steps": (30, int),
    "frame_steps": (30, int),
    "delta": (0.5, float),
    "lr_frame": (0.03, float),
    "norm_k": (2, int),
    "subset_m": (32, int),
    "sweep_cap": (50, int),
    "coarse_stride": (8, int),
    "max_drift": (0.15, float),
    "train_iters": (1500, int),
    "train_batch": (16, int),
    "train_lr": (2e-3, float),
    "target_ap": (0.85, float),
    "stop_ap": (0.90, float),
    "holdout_frac": (0.1, float),
    "iou_thresh": (0.5, float),
    "conditions": ("none:none", str),
    "thicknesses": ("", str),
    "adaptive": (False, lambda v: str(v).lower() in ("1", "true", "yes")),
    "per_image": (False, lambda v: str(v).lower() in ("1", "true", "yes")),
    "eval_steps": (150, int),
}


def _parse_config_file(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    """Defaults <- config file <- command line; unknown keys are rejected."""
    unknown = [k for k in file_values if k not in _KEYS]
    unknown += [k for k in overrides if k not in _KEYS]
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(set(unknown))}; valid keys: {sorted(_KEYS)}")
    resolved = {}
    for key, (default, parse) in _KEYS.items():
        value = default
        if key in file_values:
            value = parse(file_values[key])
        if key in overrides and overrides[key] is not None:
            value = parse(overrides[key])
        resolved[key] = value
    return resolved


def _write_resolved(cfg: dict, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    digest = arts.config_digest(cfg)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump({"config": cfg, "config_digest": digest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def _load_dataset_arg(cfg: dict, split: str = "train") -> LabeledDataset:
    root = cfg["dataset"]
    if not root:
        raise UsageError("--dataset is required")
    img_dir = os.path.join(root, "images")
    ann = os.path.join(root, "annotations.txt")
    if not os.path.isdir(img_dir) or not os.path.exists(ann):
        raise UsageError(f"dataset directory {root!r} needs images/ and annotations.txt")
    return load_dataset(img_dir, ann, split)


def _load_detector_arg(cfg: dict):
    if not cfg["detector"]:
        raise UsageError("--detector is required")
    if not os.path.exists(cfg["detector"]):
        raise UsageError(f"detector weights not found: {cfg['detector']}")
    return load_toy_detector(cfg["detector"])


def _attack_config(cfg: dict, seed_label: str, steps: int | None = None) -> AttackConfig:
    return AttackConfig(
        variant=cfg["variant"],
        steps=steps if steps is not None else cfg["steps"],
        lr=cfg["lr"],
        loss_weights=(cfg["w_obj"], cfg["w_tv"], cfg["w_nps"]),
        patch_scale_factor=cfg["patch_scale_factor"],
        seed=derive_seed(cfg["seed"], seed_label),
        patch_side=cfg["patch_side"],
        batch_size=cfg["batch_size"],
    )


def _defense_config(cfg: dict) -> DefenseConfig:
    return DefenseConfig(
        thickness=cfg["thickness"],
        epochs=cfg["epochs"],
        patch_steps=cfg["patch_steps"],
        frame_steps=cfg["frame_steps"],
        delta=cfg["delta"],
        lr_frame=cfg["lr_frame"],
        norm_k=cfg["norm_k"],
        subset_m=cfg["subset_m"],
        seed=derive_seed(cfg["seed"], "defense"),
        sweep_cap=cfg["sweep_cap"],
        coarse_stride=cfg["coarse_stride"],
        max_drift=cfg["max_drift"],
    )


def _save_patch(path, patch: AdversarialPatch, seed, digest, cfg):
    images.save_png(path, patch.values)
    return arts.write_record(
        path,
        "patch",
        seed,
        digest,
        {"variant": patch.variant, "steps": cfg["steps"], "loss_weights": [cfg["w_obj"], cfg["w_tv"], cfg["w_nps"]],
         "patch_side": patch.side, "patch_digest": patch.digest()},
    )


def load_patch(path) -> AdversarialPatch:
    rec = arts.read_record(path)
    return AdversarialPatch(images.load_png(path), rec.metadata.get("variant", "adv-patch"))


def _save_frame(path, frame: WhiteFrame, seed, digest):
    images.save_png(path, frame.pattern)
    return arts.write_record(
        path,
        "frame",
        seed,
        digest,
        {
            "thickness_416": frame.thickness_416,
            "thickness_px": frame.thickness_px,
            "canonical_hw": list(frame.canonical_hw),
            "universal": frame.universal,
            "err_trace": frame.err_trace,
            "frame_digest": frame.digest(),
        },
    )


def load_frame(path) -> WhiteFrame:
    rec = arts.read_record(path)
    meta = rec.metadata
    pattern = images.load_png(path)
    frame = WhiteFrame(
        int(meta["thickness_px"]),
        tuple(meta["canonical_hw"]),
        pattern,
        universal=bool(meta.get("universal", False)),
        thickness_416=float(meta.get("thickness_416", 0.0)),
        err_trace=list(meta.get("err_trace", [])),
    )
    frame.zero_interior()
    return frame


# ------------------------------------------------------------------
# subcommands
# ------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    digest = _write_resolved(cfg, cfg["out"])
    ds = generate_synthetic_dataset(cfg["n"], derive_seed(cfg["seed"], "synth"))
    save_dataset(ds, os.path.join(cfg["out"], "images"), os.path.join(cfg["out"], "annotations.txt"))
    arts.write_record(os.path.join(cfg["out"], "annotations.txt"), "result", cfg["seed"], digest, {"n": cfg["n"]})
    print(f"wrote {len(ds)} images to {cfg['out']}")
    return 0


def cmd_train_toy(cfg: dict) -> int:
    train = _load_dataset_arg(cfg)
    digest = _write_resolved(cfg, cfg["out"])
    tc = TrainConfig(
        iters=cfg["train_iters"],
        batch_size=cfg["train_batch"],
        lr=cfg["train_lr"],
        seed=derive_seed(cfg["seed"], "train-toy"),
        holdout_frac=cfg["holdout_frac"],
        target_ap=cfg["target_ap"],
        stop_ap=cfg["stop_ap"],
    )
    det = train_toy_detector(train, tc)
    path = os.path.join(cfg["out"], "detector.pfw")
    save_toy_detector(path, det, seed=cfg["seed"], cfg_digest=digest)
    print(f"holdout_ap={det.meta['holdout_ap']:.6f}")
    print(f"wrote {path}")
    return 0


def cmd_attack(cfg: dict) -> int:
    det = _load_detector_arg(cfg)
    train = _load_dataset_arg(cfg)
    digest = _write_resolved(cfg, cfg["out"])
    frame = load_frame(cfg["frame"]) if cfg["frame"] else None
    palette = load_palette(cfg["palette"]) if cfg["palette"] else None
    acfg = _attack_config(cfg, "attack")
    patch = optimize_patch(det, train, acfg, frame=frame, palette=palette)
    path = os.path.join(cfg["out"], "patch.png")
    _save_patch(path, patch, cfg["seed"], digest, cfg)
    print(f"wrote {path}")
    return 0


def cmd_defend(cfg: dict, mode: str) -> int:
    det = _load_detector_arg(cfg)
    dataset = _load_dataset_arg(cfg)
    digest = _write_resolved(cfg, cfg["out"])
    dcfg = _defense_config(cfg)
    acfg = _attack_config(cfg, "defend-attack", steps=1)
    if mode == "swf":
        if not cfg["image"]:
            raise UsageError("defend --mode swf requires --image IMAGE_ID")
        sample = next((s for s in dataset if s.image_id == cfg["image"]), None)
        if sample is None:
            raise UsageError(f"image id {cfg['image']!r} not present in dataset")
        frame, patch = optimize_swf(det, sample.image, sample.boxes, dcfg, attack_cfg=acfg)
        _save_patch(os.path.join(cfg["out"], "swf_patch.png"), patch, cfg["seed"], digest, cfg)
    else:
        frame = optimize_uwf(det, dataset, dcfg, attack_cfg=acfg)
    path = os.path.join(cfg["out"], f"{mode}_frame.png")
    _save_frame(path, frame, cfg["seed"], digest)
    print(f"wrote {path}")
    return 0


def _parse_conditions(spec_str: str) -> list[EvalCondition]:
    conditions = []
    for token in spec_str.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        if len(parts) not in (2, 3):
            raise UsageError(f"condition {token!r} must be attack:defense[:thickness]")
        thickness = float(parts[2]) if len(parts) == 3 else 80.0
        try:
            conditions.append(EvalCondition(parts[0], parts[1], thickness if parts[1] != "none" else 0.0))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not conditions:
        raise UsageError("no conditions given")
    return conditions


def cmd_eval(cfg: dict) -> int:
    det = _load_detector_arg(cfg)
    test = _load_dataset_arg(cfg, "test")
    digest = _write_resolved(cfg, cfg["out"])
    ecfg = EvalConfig(
        seed=derive_seed(cfg["seed"], "eval"),
        patch_scale_factor=cfg["patch_scale_factor"],
        iou_thresh=cfg["iou_thresh"],
    )
    artifacts = {}
    if cfg["patch"]:
        artifacts["patch"] = load_patch(cfg["patch"])
    if cfg["frame"]:
        artifacts["frame"] = load_frame(cfg["frame"])
    if cfg["adaptive"] and "frame" not in artifacts:
        raise UsageError("--adaptive requires --frame")
    if cfg["per_image"] and "frame" not in artifacts:
        raise UsageError("--per-image requires --frame")

    reports = []
    for cond in _parse_conditions(cfg["conditions"]):
        reports.append(evaluate_condition(det, test, cond, artifacts, ecfg))
    if cfg["adaptive"]:
        train = _load_dataset_arg(cfg)
        rep = adaptive_attack_eval(det, train, test, artifacts["frame"], _attack_config(cfg, "adaptive"))
        rep.extras.clear()
        reports.append(rep)
    if cfg["per_image"]:
        rep = per_image_attack_eval(
            det, test, artifacts["frame"], _attack_config(cfg, "per-image", steps=cfg["eval_steps"])
        )
        rep.extras.clear()
        reports.append(rep)
    if cfg["thicknesses"]:
        if "patch" not in artifacts:
            raise UsageError("--thicknesses requires --patch")
        train = _load_dataset_arg(cfg)
        ts = [float(v) for v in cfg["thicknesses"].split(",") if v.strip()]
        sweep = thickness_sweep(det, train, test, ts, artifacts["patch"], _defense_config(cfg), ecfg,
                                attack_cfg=_attack_config(cfg, "defend-attack", steps=1))
        for rep in sweep:
            rep.extras.clear()
        reports.extend(sweep)

    for rep in reports:
        rep.seed = cfg["seed"]
        rep.config_digest = digest
    out_json = os.path.join(cfg["out"], "reports.json")
    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump([report_to_dict(r) for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    files = emit_plots(reports, cfg["out"])
    if cfg["patch"] and cfg["frame"]:
        s = test.samples[0]
        objectness_map_report(det, s.image, s.boxes, artifacts["patch"], artifacts["frame"],
                              os.path.join(cfg["out"], "objectness"), ecfg, image_id=s.image_id)
    for rep in reports:
        print(f"{rep.condition.label()}: ap={rep.ap:.4f} runtime_ms={rep.runtime_ms_per_image:.2f}")
    print(f"wrote {out_json} and {len(files)} plot/csv files")
    return 0


def cmd_report(cfg: dict) -> int:
    src = os.path.join(cfg["out"], "reports.json")
    if not os.path.exists(src):
        raise UsageError(f"no reports.json under {cfg['out']}; run eval first")
    with open(src, "r", encoding="utf-8") as fh:
        reports = [report_from_dict(d) for d in json.load(fh)]
    files = emit_plots(reports, cfg["out"])
    print(f"re-emitted {len(files)} files from {src}")
    return 0


# ------------------------------------------------------------------
# argument wiring
# ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--seed", help="global seed (fans out per component)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", help="dataset directory (images/ + annotations.txt)")
    p.add_argument("--detector", help="detector weights artifact path")


_FLAG_KEYS = [k for k in _KEYS if k not in ("seed", "out", "dataset", "detector")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchframe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset"),
        ("train-toy", "train and persist the toy detector"),
        ("attack", "optimize an adversarial patch"),
        ("defend", "optimize a single or universal white frame"),
        ("eval", "run evaluation conditions and protocols"),
        ("report", "re-emit plots/CSV from saved reports"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        for key in _FLAG_KEYS:
            flag = "--" + key.replace("_", "-")
            if key in ("adaptive", "per_image"):
                p.add_argument(flag, action="store_const", const="true", dest=key)
            else:
                p.add_argument(flag, dest=key)
        if name == "defend":
            p.add_argument("--mode", choices=("swf", "uwf"), required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    overrides = {k: getattr(args, k, None) for k in _KEYS}
    try:
        file_values = _parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, overrides)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train-toy":
            return cmd_train_toy(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "defend":
            return cmd_defend(cfg, args.mode)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
