"""Toy one-stage grid detector exposing a differentiable objectness field.

The network is a small fully-convolutional stack: three stride-2 conv
stages (104 -> 52 -> 26 -> 13), a global-average-pooled context branch
added back onto the 13x13 features, one refinement conv, and a 1x1 head
producing 5 channels per cell (x, y, w, h, objectness). The context
branch gives every output cell a whole-image receptive field, so pixels
anywhere in the input (including an appended border) influence every
objectness score.

Weights are frozen during attack/defense optimization; gradients flow
only to the input image there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import images
from .artifacts import config_digest, load_arrays, save_arrays, write_record
from .boxes import BoundingBox, nms
from .data import LabeledDataset
from .optim import Adam
from .rng import generator
from .synth import generate_synthetic_dataset  # noqa: F401  (re-export)

GRID = 13
NATIVE_SIZE = 104
CHANNELS = (16, 32, 32)


@dataclass(eq=False)
class ObjectnessField:
    """Per-prior objectness scores in [0, 1]; may wrap an autograd Var."""

    scores: object
    grid_h: int = GRID
    grid_w: int = GRID
    priors_per_cell: int = 1

    @property
    def data(self) -> np.ndarray:
        return self.scores.data if isinstance(self.scores, ag.Var) else self.scores


@dataclass(eq=False)
class DetectorOutput:
    boxes: list[BoundingBox]
    raw_field: ObjectnessField
    input_size: tuple[int, int]


@dataclass
class TrainConfig:
    """Budget and loss constants for toy-detector training."""

    iters: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    holdout_frac: float = 0.1
    target_ap: float = 0.85
    stop_ap: float = 0.90
    pos_weight: float = 5.0
    box_weight: float = 5.0
    augment: bool = True
    native_size: int = NATIVE_SIZE

    def as_dict(self) -> dict:
        return dict(vars(self))


def _init_params(seed: int) -> dict[str, np.ndarray]:
    rng = generator(seed, "toy-init")
    c1, c2, c3 = CHANNELS

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    params = {
        "c1w": he((3, 3, 3, c1), 27),
        "c1b": np.zeros(c1),
        "c2w": he((3, 3, c1, c2), 9 * c1),
        "c2b": np.zeros(c2),
        "c3w": he((3, 3, c2, c3), 9 * c2),
        "c3b": np.zeros(c3),
        "f1w": he((c3, c3), c3),
        "f1b": np.zeros(c3),
        "gw": he((c3, c3), c3),
        "gb": np.zeros(c3),
        "bw": he((c3, c3), c3),
        "bb": np.zeros(c3),
        "c4w": he((3, 3, c3, c3), 9 * c3),
        "c4b": np.zeros(c3),
        "c5w": he((3, 3, c3, c3), 9 * c3),
        "c5b": np.zeros(c3),
        "c6w": he((3, 3, c3, c3), 9 * c3),
        "c6b": np.zeros(c3),
        "hw": he((1, 1, c3, 5), c3),
        "hb": np.zeros(5),
    }
    params["hb"][4] = -2.0  # low objectness prior at init
    return params


def _forward(pv: dict[str, ag.Var], x: ag.Var) -> ag.Var:
    """Batch forward, (N, S, S, 3) -> (N, 13, 13, 5) raw logits.

    A pooled context vector gates the grid features channel-wise (and adds
    a bias), then dilated convs spread spatially structured influence, so
    every input pixel, border included, reaches every objectness score
    both multiplicatively and additively.
    """
    h = ag.leaky_relu(ag.conv2d(x, pv["c1w"], pv["c1b"], stride=2, pad=1))
    h = ag.leaky_relu(ag.conv2d(h, pv["c2w"], pv["c2b"], stride=2, pad=1))
    h = ag.leaky_relu(ag.conv2d(h, pv["c3w"], pv["c3b"], stride=2, pad=1))
    ctx = ag.leaky_relu(ag.matmul(ag.smean(h, axis=(1, 2)), pv["f1w"]) + pv["f1b"])  # (N, C)
    gate = ag.sigmoid(ag.matmul(ctx, pv["gw"]) + pv["gb"]) * 2.0
    bias = ag.matmul(ctx, pv["bw"]) + pv["bb"]
    n, c = gate.shape
    h = ag.leaky_relu(h * ag.reshape(gate, (n, 1, 1, c)) + ag.reshape(bias, (n, 1, 1, c)))
    h = ag.leaky_relu(ag.conv2d(h, pv["c4w"], pv["c4b"], stride=1, pad=1))
    h = ag.leaky_relu(ag.conv2d(h, pv["c5w"], pv["c5b"], stride=1, pad=2, dil=2))
    h = ag.leaky_relu(ag.conv2d(h, pv["c6w"], pv["c6b"], stride=1, pad=4, dil=4))
    return ag.conv2d(h, pv["hw"], pv["hb"], stride=1, pad=0)


class ToyDetector:
    """Detector handle: frozen weights, preprocess policy, thresholds."""

    kind = "toy"
    grid = GRID
    priors_per_cell = 1

    def __init__(
        self,
        params: dict[str, np.ndarray] | None,
        native_size: int = NATIVE_SIZE,
        preprocess: str = "resize",
        detection_threshold: float = 0.5,
        nms_iou: float = 0.45,
        meta: dict | None = None,
    ):
        if preprocess not in ("resize", "pad-square"):
            raise ValueError(f"unknown preprocess kind: {preprocess!r}")
        self.params = params
        self.native_size = native_size
        self.preprocess = preprocess
        self.detection_threshold = detection_threshold
        self.nms_iou = nms_iou
        self.meta = meta or {}

    def _require_params(self) -> dict[str, ag.Var]:
        if self.params is None:
            raise RuntimeError("detector weights are uninitialized; train or load first")
        return {k: ag.Var(v) for k, v in self.params.items()}

    def preprocess_var(self, x) -> ag.Var:
        xv = x if isinstance(x, ag.Var) else ag.Var(images.ensure_image(x))
        if self.preprocess == "pad-square":
            xv = images.pad_to_square(xv, fill=0.5)
        return ag.resize_bilinear(xv, self.native_size, self.native_size)

    def raw_single(self, x) -> ag.Var:
        """(H, W, 3) image -> (13, 13, 5) raw logits, graph-tracked."""
        pv = self._require_params()
        xin = self.preprocess_var(x)
        s = self.native_size
        raw = _forward(pv, ag.reshape(xin, (1, s, s, 3)))
        return raw[0]

    def objectness_var(self, x) -> ag.Var:
        return ag.sigmoid(self.raw_single(x)[:, :, 4:5])

    def weights_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params or {}):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()


def objectness_field(d, x) -> ObjectnessField:
    """Differentiable objectness field of S(.) for one image."""
    track = isinstance(x, ag.Var)
    scores = d.objectness_var(x)
    return ObjectnessField(
        scores if track else scores.data,
        grid_h=scores.shape[0],
        grid_w=scores.shape[1],
        priors_per_cell=scores.shape[2],
    )


def max_objectness(d, x):
    """Maximum grid score floored at 0; Var in, Var out."""
    track = isinstance(x, ag.Var)
    m = ag.maximum_scalar(ag.vmax(d.objectness_var(x)), 0.0)
    return m if track else m.item()


def encode_box(box: BoundingBox, grid: int = GRID) -> tuple[int, int, float, float, float, float]:
    col = min(int(box.cx * grid), grid - 1)
    row = min(int(box.cy * grid), grid - 1)
    return row, col, box.cx * grid - col, box.cy * grid - row, box.w, box.h


def decode_cell(row: int, col: int, tx: float, ty: float, w: float, h: float, grid: int = GRID) -> BoundingBox:
    return BoundingBox(
        cx=min(max((col + tx) / grid, 0.0), 1.0),
        cy=min(max((row + ty) / grid, 0.0), 1.0),
        w=min(max(w, 1e-6), 1.0),
        h=min(max(h, 1e-6), 1.0),
    )


def _decode_raw(raw: np.ndarray, threshold: float, grid: int = GRID) -> list[BoundingBox]:
    s = 1.0 / (1.0 + np.exp(-raw))
    obj = s[:, :, 4]
    rows, cols = np.where(obj >= threshold)
    out = []
    for r, c in zip(rows, cols):
        b = decode_cell(r, c, s[r, c, 0], s[r, c, 1], s[r, c, 2], s[r, c, 3], grid)
        out.append(b.with_score(float(obj[r, c])))
    return out


def detect(d: ToyDetector, x, content_region=None) -> DetectorOutput:
    """Threshold + NMS + map back to the input image's coordinate frame.

    content_region, when given as normalized (y0, x0, y1, x1), drops
    candidates centered outside it before NMS; used by framed pipelines
    where the border is known to carry no scene content.
    """
    img = images.ensure_image(x.data if isinstance(x, ag.Var) else x)
    h, w = img.shape[0], img.shape[1]
    raw = d.raw_single(img).data
    cands = _decode_raw(raw, d.detection_threshold, d.grid)
    if content_region is not None:
        y0, x0, y1, x1 = content_region
        cands = [b for b in cands if y0 <= b.cy <= y1 and x0 <= b.cx <= x1]
    kept = nms(cands, d.nms_iou)
    if d.preprocess == "pad-square" and h != w:
        n = max(h, w)
        mapped = []
        for b in kept:
            cx, cy = b.cx * n / w, b.cy * n / h
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                continue  # detection centered in the padding region
            mapped.append(
                BoundingBox(cx, cy, min(b.w * n / w, 1.0), min(b.h * n / h, 1.0), score=b.score)
            )
        kept = mapped
    field = ObjectnessField(1.0 / (1.0 + np.exp(-raw[:, :, 4:5])))
    kept.sort(key=lambda b: (-b.score, b.cx, b.cy))
    return DetectorOutput(kept, field, (h, w))


# ------------------------------------------------------------------
# training
# ------------------------------------------------------------------


def _fill_texture(rng, size):
    """Border/canvas fill sampled from a wide family of patterns.

    The breadth matters: at eval time the appended border is an arbitrary
    optimized pattern, and detection must stay calibrated for any of them.
    """
    kind = rng.integers(0, 5)
    if kind == 0:  # flat color + grain
        return np.clip(rng.uniform(0.1, 0.9, size=3)[None, None, :] + rng.normal(0, 0.05, (size, size, 3)), 0, 1)
    if kind == 1:  # iid noise
        return rng.uniform(0.0, 1.0, size=(size, size, 3))
    if kind == 2:  # gaussian pattern around mid-gray
        return np.clip(rng.normal(0.5, 0.15, size=(size, size, 3)), 0, 1)
    if kind == 3:  # coarse random blocks
        cells = int(rng.integers(4, 14))
        blocks = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
        reps = int(np.ceil(size / cells))
        big = np.repeat(np.repeat(blocks, reps, axis=0), reps, axis=1)[:size, :size]
        return np.clip(big + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    # smooth low-frequency texture like the synthetic backgrounds
    from .synth import _background

    return _background(rng, size, size)


def _augment(img, boxes, rng, size):
    if rng.random() < 0.5:
        img = img[:, ::-1, :].copy()
        boxes = [BoundingBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id) for b in boxes]
    roll = rng.random()
    if roll < 0.45:
        # border-ring zoom-out: content centered inside a textured ring,
        # the geometry a white-frame defense produces at eval time
        t = int(rng.integers(6, 27))
        hs = max(8, int(round(size * size / (size + 2 * t))))
        small = images.resize(img, hs, hs)
        canvas = _fill_texture(rng, size)
        oy = (size - hs) // 2
        ox = (size - hs) // 2
        canvas[oy : oy + hs, ox : ox + hs] = small
        img = canvas
        boxes = [
            BoundingBox((ox + b.cx * hs) / size, (oy + b.cy * hs) / size, b.w * hs / size, b.h * hs / size, b.class_id)
            for b in boxes
        ]
    elif roll < 0.7:
        # free zoom-out at a random offset
        s = rng.uniform(0.68, 0.95)
        hs = max(8, int(round(size * s)))
        small = images.resize(img, hs, hs)
        canvas = _fill_texture(rng, size)
        oy = int(rng.integers(0, size - hs + 1))
        ox = int(rng.integers(0, size - hs + 1))
        canvas[oy : oy + hs, ox : ox + hs] = small
        img = canvas
        boxes = [
            BoundingBox((ox + b.cx * hs) / size, (oy + b.cy * hs) / size, b.w * hs / size, b.h * hs / size, b.class_id)
            for b in boxes
        ]
    return img, boxes


def _targets(batch_boxes: list[list[BoundingBox]], grid: int):
    n = len(batch_boxes)
    tobj = np.zeros((n, grid, grid))
    tbox = np.zeros((n, grid, grid, 4))
    for i, boxes in enumerate(batch_boxes):
        for b in boxes:
            row, col, tx, ty, w, h = encode_box(b, grid)
            tobj[i, row, col] = 1.0
            tbox[i, row, col] = (tx, ty, w, h)
    return tobj, tbox


def _detection_loss(raw: ag.Var, tobj, tbox, cfg: TrainConfig) -> ag.Var:
    z_obj = raw[:, :, :, 4]
    bce = ag.maximum_scalar(z_obj, 0.0) - z_obj * tobj + ag.log(ag.exp(-ag.vabs(z_obj)) + 1.0)
    weight = 1.0 + (cfg.pos_weight - 1.0) * tobj
    obj_loss = ag.ssum(bce * weight) * (1.0 / tobj.size)
    npos = max(1.0, float(tobj.sum()))
    diff = (ag.sigmoid(raw[:, :, :, 0:4]) - tbox) * tobj[:, :, :, None]
    box_loss = ag.ssum(diff * diff) * (cfg.box_weight / npos)
    return obj_loss + box_loss


def holdout_split(train: LabeledDataset, holdout_frac: float) -> tuple[LabeledDataset, LabeledDataset]:
    n = len(train)
    k = max(1, int(round(n * holdout_frac))) if n > 1 else 0
    fit = LabeledDataset(train.samples[: n - k], train.split_tag)
    held = LabeledDataset(train.samples[n - k :], "holdout")
    return fit, held


def holdout_ap(d: ToyDetector, held: LabeledDataset) -> float:
    from .evaluation import average_precision

    preds = []
    for s in held:
        for b in detect(d, s.image).boxes:
            preds.append((s.image_id, b))
    ap, _ = average_precision(preds, held)
    return ap


def train_toy_detector(train: LabeledDataset, cfg: TrainConfig | None = None) -> ToyDetector:
    """Train until held-out AP meets cfg.target_ap; deterministic given seed."""
    cfg = cfg or TrainConfig()
    if len(train) == 0:
        raise ValueError("training dataset is empty")
    fit, held = holdout_split(train, cfg.holdout_frac)
    if len(fit) == 0:
        fit = train
    params = _init_params(cfg.seed)
    adam = Adam(params, cfg.lr)
    det = ToyDetector(params, native_size=cfg.native_size)
    size = cfg.native_size

    n_fit = len(fit)
    check_at = sorted({int(cfg.iters * f) for f in (0.4, 0.6, 0.8, 1.0)})
    iters_run = 0
    ap = 0.0
    for it in range(1, cfg.iters + 1):
        rng = generator(cfg.seed, "train-iter", it)
        idx = rng.integers(0, n_fit, size=min(cfg.batch_size, n_fit))
        imgs, all_boxes = [], []
        for slot, i in enumerate(idx):
            s = fit.samples[int(i)]
            img, boxes = s.image, s.boxes
            if img.shape[0] != size or img.shape[1] != size:
                img = images.resize(img, size, size)
            if cfg.augment:
                img, boxes = _augment(img, boxes, generator(cfg.seed, "aug", it, slot), size)
            imgs.append(img)
            all_boxes.append(boxes)
        tobj, tbox = _targets(all_boxes, GRID)
        pv = {k: ag.Var(v, requires_grad=True) for k, v in params.items()}
        raw = _forward(pv, ag.Var(np.stack(imgs)))
        loss = _detection_loss(raw, tobj, tbox, cfg)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite training loss at iteration {it}")
        loss.backward()
        adam.step({k: pv[k].grad for k in params})
        iters_run = it
        if it in check_at:
            ap = holdout_ap(det, held)
            if ap >= cfg.stop_ap:
                break
    if ap < cfg.target_ap:
        ap = holdout_ap(det, held)
    if ap < cfg.target_ap:
        raise RuntimeError(
            f"toy detector reached held-out AP {ap:.3f} < {cfg.target_ap:.2f} after "
            f"{iters_run} iterations; increase the training budget"
        )
    det.meta = {
        "seed": cfg.seed,
        "iters_run": iters_run,
        "holdout_ap": ap,
        "holdout_ids": held.image_ids(),
        "train_config": cfg.as_dict(),
        "config_digest": config_digest(cfg.as_dict()),
    }
    return det


# ------------------------------------------------------------------
# persistence
# ------------------------------------------------------------------


def save_toy_detector(path, det: ToyDetector, seed: int | None = None, cfg_digest: str | None = None):
    if det.params is None:
        raise RuntimeError("cannot save an uninitialized detector")
    save_arrays(path, det.params)
    arch = {
        "native_size": det.native_size,
        "grid": det.grid,
        "channels": list(CHANNELS),
        "preprocess": det.preprocess,
        "detection_threshold": det.detection_threshold,
        "nms_iou": det.nms_iou,
    }
    extra = {"arch": arch, "train_meta": {k: v for k, v in det.meta.items() if k != "train_config"}}
    seed = det.meta.get("seed", 0) if seed is None else seed
    cfg_digest = cfg_digest or det.meta.get("config_digest", config_digest({}))
    return write_record(path, "detector-weights", seed, cfg_digest, extra)


def load_toy_detector(path) -> ToyDetector:
    from .artifacts import read_record

    rec = read_record(path)
    arch = rec.metadata.get("arch", {})
    params = load_arrays(path)
    return ToyDetector(
        params,
        native_size=arch.get("native_size", NATIVE_SIZE),
        preprocess=arch.get("preprocess", "resize"),
        detection_threshold=arch.get("detection_threshold", 0.5),
        nms_iou=arch.get("nms_iou", 0.45),
        meta=rec.metadata.get("train_meta", {}),
    )
