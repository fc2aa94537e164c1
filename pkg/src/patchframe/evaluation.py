"""Evaluation harness: AP, condition matrix, adaptive protocols, reports."""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import images
from .boxes import BoundingBox, iou
from .data import LabeledDataset
from .detector import detect, objectness_field

ATTACK_KINDS = ("none", "shared-patch", "per-image-patch", "adaptive-patch")
DEFENSE_KINDS = ("none", "swf", "uwf")


@dataclass(frozen=True)
class EvalCondition:
    """One cell of the input-type matrix: what is composited before detect."""

    attack: str = "none"
    defense: str = "none"
    thickness: float = 0.0  # 416-relative units, matches DefenseConfig

    def __post_init__(self):
        if self.attack not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.attack!r}; valid: {ATTACK_KINDS}")
        if self.defense not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.defense!r}; valid: {DEFENSE_KINDS}")
        if self.attack == "adaptive-patch" and self.defense == "none":
            raise ValueError("adaptive-patch requires a defense")

    def label(self) -> str:
        return f"{self.attack}+{self.defense}" + (f"@t{self.thickness:g}" if self.defense != "none" else "")


@dataclass(eq=False)
class EvalReport:
    condition: EvalCondition
    ap: float
    pr_points: list[tuple[float, float]]
    per_image: list[tuple[str, int, int, int]]  # (image_id, tp, fp, fn)
    runtime_ms_per_image: float
    seed: int = 0
    config_digest: str = ""
    extras: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    seed: int = 0
    patch_scale_factor: float = 0.3
    iou_thresh: float = 0.5


def average_precision(
    preds: list[tuple[str, BoundingBox]],
    gt: LabeledDataset,
    iou_thresh: float = 0.5,
) -> tuple[float, list[tuple[float, float]]]:
    """Score-ranked greedy matching and all-points interpolated AP.

    Predictions are (image_id, box-with-score) pairs; each ground-truth box
    can match at most one prediction at IoU >= iou_thresh. Returns the AP
    and the raw (recall, precision) curve point per prediction.
    """
    for image_id, b in preds:
        if b.score is None:
            raise ValueError(f"prediction without score for image {image_id!r}")
    gt_boxes = {s.image_id: [b for b in s.boxes] for s in gt}
    total_gt = sum(len(v) for v in gt_boxes.values())
    if total_gt == 0:
        if preds:
            warnings.warn("no ground-truth boxes but predictions present; AP = 0")
            return 0.0, []
        warnings.warn("no ground truth and no predictions; AP defined as 1")
        return 1.0, []
    if not preds:
        return 0.0, []

    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, preds[i][0], i))
    matched: dict[str, set[int]] = {k: set() for k in gt_boxes}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, pb = preds[i]
        candidates = gt_boxes.get(image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gb in enumerate(candidates):
            if j in matched.get(image_id, set()):
                continue
            v = iou(pb, gb)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[image_id].add(best_j)
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / total_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    pr_points = list(zip(recall.tolist(), precision.tolist()))

    # all-points interpolation: integrate the precision envelope over recall
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, pr_points


def _per_image_counts(preds, gt: LabeledDataset, iou_thresh: float):
    """tp/fp/fn per image at the detector's operating threshold."""
    out = []
    by_image: dict[str, list[BoundingBox]] = {}
    for image_id, b in preds:
        by_image.setdefault(image_id, []).append(b)
    for s in gt:
        dets = sorted(by_image.get(s.image_id, []), key=lambda b: -b.score)
        taken: set[int] = set()
        tp = 0
        for pb in dets:
            best_iou, best_j = 0.0, -1
            for j, gb in enumerate(s.boxes):
                if j in taken:
                    continue
                v = iou(pb, gb)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_thresh:
                taken.add(best_j)
                tp += 1
        out.append((s.image_id, tp, len(dets) - tp, len(s.boxes) - tp))
    return out


# ------------------------------------------------------------------
# condition pipeline
# ------------------------------------------------------------------


def _frame_for(cond: EvalCondition, artifacts: dict, image_id: str):
    if cond.defense == "none":
        return None
    if cond.defense == "uwf":
        frame = artifacts.get("frame")
        if frame is None:
            raise ValueError("condition requires artifact kind 'frame' (universal white frame)")
        return frame
    frames = artifacts.get("frames")
    if frames is None or image_id not in frames:
        raise ValueError(f"condition requires artifact kind 'frames' with an entry for {image_id!r}")
    return frames[image_id]


def _patch_for(cond: EvalCondition, artifacts: dict, image_id: str):
    if cond.attack == "none":
        return None
    if cond.attack in ("shared-patch", "adaptive-patch"):
        patch = artifacts.get("patch")
        if patch is None:
            raise ValueError("condition requires artifact kind 'patch'")
        return patch
    patches = artifacts.get("patches")
    if patches is None or image_id not in patches:
        raise ValueError(f"condition requires artifact kind 'patches' with an entry for {image_id!r}")
    return patches[image_id]


def unmap_framed_boxes(boxes, orig_hw, t_px: int):
    """Map detections from the framed canvas back to image coordinates.

    Detections whose centers fall inside the frame margin are dropped:
    the margin carries no scene content.
    """
    h, w = orig_hw
    ch, cw = h + 2 * t_px, w + 2 * t_px
    out = []
    for b in boxes:
        cx = (b.cx * cw - t_px) / w
        cy = (b.cy * ch - t_px) / h
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            continue
        out.append(BoundingBox(cx, cy, min(b.w * cw / w, 1.0), min(b.h * ch / h, 1.0), score=b.score))
    return out


def evaluate_condition(
    d,
    test: LabeledDataset,
    cond: EvalCondition,
    artifacts: dict,
    cfg: EvalConfig | None = None,
) -> EvalReport:
    """Run the patch -> frame -> detector pipeline per image and score AP."""
    from .attack import apply_patch, transform_for_image
    from .defense import apply_frame

    cfg = cfg or EvalConfig()
    preds = []
    runtimes = []
    for s in test:
        patch = _patch_for(cond, artifacts, s.image_id)
        frame = _frame_for(cond, artifacts, s.image_id)
        t0 = time.perf_counter()
        x = s.image
        if patch is not None:
            t = transform_for_image(s.image_id, cfg.seed, tps=getattr(patch, "variant", "") == "adv-tshirt")
            x = apply_patch(x, s.boxes, patch, t, scale_factor=cfg.patch_scale_factor)
        region = None
        if frame is not None:
            x = apply_frame(x, frame)
            ch, cw = x.shape[0], x.shape[1]
            tpx = frame.thickness_px
            region = (tpx / ch, tpx / cw, 1.0 - tpx / ch, 1.0 - tpx / cw)
        boxes = detect(d, x, content_region=region).boxes
        if frame is not None:
            boxes = unmap_framed_boxes(boxes, (s.image.shape[0], s.image.shape[1]), frame.thickness_px)
        runtimes.append((time.perf_counter() - t0) * 1000.0)
        preds.extend((s.image_id, b) for b in boxes)
    ap, pr_points = average_precision(preds, test, cfg.iou_thresh)
    return EvalReport(
        condition=cond,
        ap=ap,
        pr_points=pr_points,
        per_image=_per_image_counts(preds, test, cfg.iou_thresh),
        runtime_ms_per_image=float(np.median(runtimes)) if runtimes else 0.0,
        seed=cfg.seed,
        config_digest="",
    )


def adaptive_attack_eval(d, train: LabeledDataset, test: LabeledDataset, frame, cfg) -> EvalReport:
    """Re-optimize a shared patch against the frozen frame, then score it.

    The patch sees frame-composited forward passes on the train split; the
    frame is never updated. The optimized patch rides in extras["patch"].
    """
    from .attack import optimize_patch

    if not frame.universal:
        raise ValueError("adaptive attack protocol requires a universal frame")
    patch = optimize_patch(d, train, cfg, frame=frame)
    cond = EvalCondition("adaptive-patch", "uwf", frame.thickness_416)
    report = evaluate_condition(
        d, test, cond, {"patch": patch, "frame": frame}, EvalConfig(seed=cfg.seed, patch_scale_factor=cfg.patch_scale_factor)
    )
    report.extras["patch"] = patch
    return report


def per_image_attack_eval(d, test: LabeledDataset, frame, cfg) -> EvalReport:
    """Individual adaptive patches, one per test image, against the frozen frame."""
    from .attack import optimize_patch
    from .data import LabeledDataset as DS
    from .rng import derive_seed

    if not frame.universal:
        raise ValueError("per-image attack protocol requires a universal frame")
    patches = {}
    for s in test:
        per_cfg = replace(cfg, seed=derive_seed(cfg.seed, "per-image", s.image_id))
        patches[s.image_id] = optimize_patch(d, DS([s], test.split_tag), per_cfg, frame=frame)
    cond = EvalCondition("per-image-patch", "uwf", frame.thickness_416)
    report = evaluate_condition(
        d, test, cond, {"patches": patches, "frame": frame}, EvalConfig(seed=cfg.seed, patch_scale_factor=cfg.patch_scale_factor)
    )
    report.extras["patches"] = patches
    return report


def thickness_sweep(d, train, test, thicknesses, patch, defense_cfg, eval_cfg=None, attack_cfg=None):
    """One UWF per thickness (shared seed), each scored under the shared patch."""
    from .defense import optimize_uwf

    if not thicknesses:
        raise ValueError("thicknesses must be non-empty")
    reports = []
    for t in thicknesses:
        cfg_t = replace(defense_cfg, thickness=t)
        frame = optimize_uwf(d, train, cfg_t, attack_cfg=attack_cfg)
        cond = EvalCondition("shared-patch", "uwf", t)
        rep = evaluate_condition(d, test, cond, {"patch": patch, "frame": frame}, eval_cfg)
        rep.extras["frame"] = frame
        reports.append(rep)
    return reports


# ------------------------------------------------------------------
# objectness-map report and plot/CSV emission
# ------------------------------------------------------------------


def _heatmap_png(path, field2d: np.ndarray, upscale: int = 16) -> None:
    lo, hi = float(field2d.min()), float(field2d.max())
    norm = (field2d - lo) / (hi - lo) if hi > lo else np.zeros_like(field2d)
    big = np.repeat(np.repeat(norm, upscale, axis=0), upscale, axis=1)
    images.save_png(path, np.stack([big, big, big], axis=-1))


def _geometry_matched_clean(f_clean: np.ndarray, t_px: int, clean_hw) -> np.ndarray:
    """Clean field passed through the same border-inset resampling round trip.

    A framed pipeline that leaves interior predictions untouched produces
    exactly this map after resampling back to the clean grid, so it is the
    fair reference for the defended branch: perfect restoration scores 0.
    """
    from patchframe import autograd as ag

    from .defense import resample_field_to_clean_grid

    gh, gw = f_clean.shape[0], f_clean.shape[1]
    h, w = clean_hw
    uy = ((np.arange(gh) + 0.5) / gh * (h + 2 * t_px) - t_px) / h
    ux = ((np.arange(gw) + 0.5) / gw * (w + 2 * t_px) - t_px) / w
    gy = np.clip(uy * gh - 0.5, 0.0, gh - 1.0)
    gx = np.clip(ux * gw - 0.5, 0.0, gw - 1.0)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    pushed = ag.sample_points(ag.Var(f_clean), yy.ravel(), xx.ravel()).data.reshape(f_clean.shape)
    return resample_field_to_clean_grid(pushed, t_px, clean_hw)


def objectness_map_report(d, x, boxes, patch, frame, out_dir, cfg: EvalConfig | None = None, image_id: str = "image"):
    """Write clean / patched / patched+defended heat maps plus scalar summaries.

    The defended map is resampled onto the clean grid for display, and its
    distance entry is measured against the geometry-matched clean
    reference (the border inset changes the spatial mapping; the reference
    absorbs that so the scalar isolates restoration quality).
    """
    from .attack import apply_patch, transform_for_image
    from .defense import apply_frame, resample_field_to_clean_grid

    cfg = cfg or EvalConfig()
    os.makedirs(out_dir, exist_ok=True)
    t = transform_for_image(image_id, cfg.seed, tps=getattr(patch, "variant", "") == "adv-tshirt")
    clean = objectness_field(d, x).data
    patched_img = apply_patch(x, boxes, patch, t, scale_factor=cfg.patch_scale_factor)
    patched = objectness_field(d, patched_img).data
    defended_img = apply_frame(patched_img, frame)
    defended_raw = objectness_field(d, defended_img).data
    defended = resample_field_to_clean_grid(defended_raw, frame.thickness_px, x.shape[:2])
    defended_ref = _geometry_matched_clean(clean, frame.thickness_px, x.shape[:2])

    def dist2(a, b):
        return float(np.sqrt(np.sum((a - b) ** 2)))

    summary = {}
    for name, fld, ref in (("clean", clean, clean), ("patched", patched, clean), ("defended", defended, defended_ref)):
        _heatmap_png(os.path.join(out_dir, f"objectness_{name}.png"), fld[:, :, 0])
        summary[name] = {
            "max_objectness": float(fld.max()),
            "mean_objectness": float(fld.mean()),
            "distance_to_clean_k2": dist2(fld, ref),
        }
    out_json = os.path.join(out_dir, "objectness_summary.json")
    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def emit_plots(reports: list[EvalReport], out_dir) -> list[str]:
    """PR-curve images (grouped by condition, overlaid per thickness) + CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise ValueError("no reports to plot")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    groups: dict[tuple[str, str], list[EvalReport]] = {}
    for rep in reports:
        groups.setdefault((rep.condition.attack, rep.condition.defense), []).append(rep)
    for (attack, defense), reps in groups.items():
        fig, ax = plt.subplots(figsize=(5, 4))
        for rep in reps:
            pts = rep.pr_points
            if pts:
                # anchor the curve at recall 0 with the first point's precision
                rs = [0.0] + [p[0] for p in pts]
                ps = [pts[0][1]] + [p[1] for p in pts]
            else:
                rs, ps = [0.0], [0.0]
            ax.plot(rs, ps, label=f"t={rep.condition.thickness:g} AP={rep.ap:.3f}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{attack} / {defense}")
        ax.legend(loc="lower left", fontsize=8)
        fname = os.path.join(out_dir, f"pr_{attack}_{defense}.png")
        fig.savefig(fname, dpi=110)
        plt.close(fig)
        written.append(fname)

    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("condition,attack,defense,thickness,ap,runtime_ms,seed,config_digest\n")
        for rep in reports:
            fh.write(
                f"{rep.condition.label()},{rep.condition.attack},{rep.condition.defense},"
                f"{rep.condition.thickness:g},{rep.ap:.10g},{rep.runtime_ms_per_image:.6g},"
                f"{rep.seed},{rep.config_digest}\n"
            )
    written.append(csv_path)
    return written


def report_to_dict(rep: EvalReport) -> dict:
    return {
        "condition": {
            "attack": rep.condition.attack,
            "defense": rep.condition.defense,
            "thickness": rep.condition.thickness,
        },
        "ap": rep.ap,
        "pr_points": rep.pr_points,
        "per_image": rep.per_image,
        "runtime_ms_per_image": rep.runtime_ms_per_image,
        "seed": rep.seed,
        "config_digest": rep.config_digest,
    }


def report_from_dict(payload: dict) -> EvalReport:
    cond = EvalCondition(**payload["condition"])
    return EvalReport(
        condition=cond,
        ap=payload["ap"],
        pr_points=[tuple(p) for p in payload["pr_points"]],
        per_image=[tuple(p) for p in payload["per_image"]],
        runtime_ms_per_image=payload["runtime_ms_per_image"],
        seed=payload.get("seed", 0),
        config_digest=payload.get("config_digest", ""),
    )
