"""Small trainable RGB-T person scorers across four fusion stages.

Every architecture reduces an aligned pair to a per-cell objectness grid
(sigmoid confidences at stride 4). Early fusion concatenates the four
input channels; mid fusion runs one two-conv stem per modality and fuses
features; late fusion averages the confidences of two complete
single-modality scorers; the independent variants see one modality only.
"""

import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .compose import REF_DISTANCE_M, REF_HEIGHT_PX, RgbtImage
from .seeding import rng_for

MODEL_MAGIC = b"RGTD"
MODEL_FORMAT_VERSION = 1
STRIDE = 4
BOX_ASPECT = 2.4  # person box height : width


class DetectorError(Exception):
    pass


class FusionArch(str, Enum):
    EARLY = "early"
    MID = "mid"
    LATE = "late"
    INDEP_RGB = "indep_rgb"
    INDEP_T = "indep_t"


@dataclass
class DetectorModel:
    arch: FusionArch
    weights: dict              # name -> ndarray (float64)
    stride: int = STRIDE
    width: int = 8
    seed: int = 0
    size_scale: float = 1.0    # decode box height / nominal person height
    train_meta: dict = field(default_factory=dict)

    def weight_tensors(self, requires_grad=False):
        return {
            k: ad.Tensor(v, requires_grad=requires_grad, name=k)
            for k, v in self.weights.items()
        }


@dataclass(frozen=True)
class Detection:
    box: tuple        # (x0, y0, x1, y1)
    confidence: float


# -- architecture wiring ------------------------------------------------------


def _scorer_spec(in_ch, width):
    """(kernel, stride, cin, cout) per conv; total stride is 4."""
    w = width
    return [
        ("c1", 5, 2, in_ch, w),
        ("c2", 3, 2, w, 2 * w),
        ("c3", 3, 1, 2 * w, 2 * w),
        ("c4", 3, 1, 2 * w, 2 * w),
        ("head", 1, 1, 2 * w, 1),
    ]


def _stem_spec(in_ch, width):
    w = width
    return [("s1", 5, 2, in_ch, w), ("s2", 3, 2, w, 2 * w)]


def _head_spec(in_ch, width):
    w = width
    return [("h1", 3, 1, in_ch, 2 * w), ("h2", 3, 1, 2 * w, 2 * w),
            ("head", 1, 1, 2 * w, 1)]


def _layer_specs(arch, width):
    if arch == FusionArch.EARLY:
        return {"stem": _scorer_spec(4, width)}
    if arch == FusionArch.MID:
        return {
            "rgb": _stem_spec(3, width),
            "thm": _stem_spec(1, width),
            "joint": _head_spec(4 * width, width),
        }
    if arch == FusionArch.LATE:
        return {"rgb": _scorer_spec(3, width), "thm": _scorer_spec(1, width)}
    if arch == FusionArch.INDEP_RGB:
        return {"stem": _scorer_spec(3, width)}
    if arch == FusionArch.INDEP_T:
        return {"stem": _scorer_spec(1, width)}
    raise DetectorError(f"unknown arch {arch!r}")


def build(arch, seed=0, width=8):
    """Freshly initialized detector; deterministic in the seed."""
    arch = FusionArch(arch)
    rng = rng_for(seed, f"detector-init-{arch.value}")
    weights = {}
    for group, layers in sorted(_layer_specs(arch, width).items()):
        for name, k, _s, cin, cout in layers:
            fan_in = k * k * cin
            weights[f"{group}.{name}.w"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (k, k, cin, cout)
            )
            bias = -2.0 if name == "head" else 0.0
            weights[f"{group}.{name}.b"] = np.full(cout, bias)
    return DetectorModel(arch=arch, weights=weights, width=width, seed=seed)


def _run_stack(wt, group, layers, x):
    out = x
    for i, (name, k, s, _cin, _cout) in enumerate(layers):
        w = wt[f"{group}.{name}.w"]
        b = wt[f"{group}.{name}.b"]
        out = ad.conv2d(out, w, stride=s, pad=k // 2) + b
        if name != "head":
            out = ad.relu(out)
    return out  # logits [h, w, 1]


def _pair_tensors(pair):
    if isinstance(pair, RgbtImage):
        return ad.Tensor(pair.rgb), ad.Tensor(pair.thermal)
    rgb_t, thm_t = pair
    return ad.as_tensor(rgb_t), ad.as_tensor(thm_t)


def _check_divisible(shape_hw, stride):
    h, w = shape_hw
    if h % stride or w % stride:
        raise DetectorError(
            f"input {h}x{w} not divisible by stride {stride}"
        )


def forward(model, pair, weight_tensors=None):
    """Per-cell person confidence grid (sigmoid), differentiable."""
    rgb_t, thm_t = _pair_tensors(pair)
    if rgb_t.shape[:2] != thm_t.shape:
        raise DetectorError(
            f"pair misaligned: rgb {rgb_t.shape} vs thermal {thm_t.shape}"
        )
    _check_divisible(thm_t.shape, model.stride)
    wt = weight_tensors if weight_tensors is not None else model.weight_tensors()
    logits = _training_logits(model, (rgb_t, thm_t), wt)
    if model.arch == FusionArch.LATE:
        return late_fuse(ad.sigmoid(logits[0]), ad.sigmoid(logits[1]))
    return ad.sigmoid(logits[0])


def late_fuse(grid_rgb, grid_t):
    """Prediction-stage fusion: per-cell arithmetic mean of confidences."""
    grid_rgb = ad.as_tensor(grid_rgb)
    grid_t = ad.as_tensor(grid_t)
    if grid_rgb.shape != grid_t.shape:
        raise DetectorError(
            f"late_fuse: grid shapes {grid_rgb.shape} vs {grid_t.shape}"
        )
    return (grid_rgb + grid_t) * 0.5


# -- decoding -----------------------------------------------------------------


def _box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def nominal_height_px(distance_m):
    return REF_HEIGHT_PX * REF_DISTANCE_M / distance_m


def decode(grid, conf_threshold, stride=STRIDE, box_height_px=None,
           size_scale=1.0, nms_iou=0.5):
    """Thresholded cells to detections with fixed-aspect boxes plus NMS.

    Box height defaults to the reference person height scaled by the
    model's learned size scalar; evaluation passes the scene's nominal
    height so boxes track the pinhole geometry.
    """
    if not 0.0 < conf_threshold <= 1.0:
        raise DetectorError("conf_threshold must lie in (0,1]")
    g = grid.data if isinstance(grid, ad.Tensor) else np.asarray(grid)
    if box_height_px is None:
        box_height_px = REF_HEIGHT_PX
    bh = box_height_px * size_scale
    bw = bh / BOX_ASPECT
    rows, cols = np.nonzero(g >= conf_threshold)
    if rows.size == 0:
        return []
    confs = g[rows, cols]
    order = np.lexsort((cols, rows, -confs))
    candidates = []
    for k in order:
        cy = rows[k] * stride + stride / 2.0
        cx = cols[k] * stride + stride / 2.0
        box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        candidates.append(Detection(box=box, confidence=float(confs[k])))
    kept = []
    for det in candidates:
        if all(_box_iou(det.box, k.box) < nms_iou for k in kept):
            kept.append(det)
    return kept


def region_cells(gt_box, grid_shape, stride=STRIDE):
    """Slice (r0, r1, c0, c1) of cells whose centers fall inside gt_box."""
    x0, y0, x1, y1 = gt_box
    centers_y = np.arange(grid_shape[0]) * stride + stride / 2.0
    centers_x = np.arange(grid_shape[1]) * stride + stride / 2.0
    rs = np.nonzero((centers_y >= y0) & (centers_y < y1))[0]
    cs = np.nonzero((centers_x >= x0) & (centers_x < x1))[0]
    if rs.size == 0 or cs.size == 0:
        raise DetectorError(f"gt_box {gt_box} covers no cell centers")
    return int(rs[0]), int(rs[-1]) + 1, int(cs[0]), int(cs[-1]) + 1


def smooth_max(values, temperature=0.05):
    """Softmax-weighted mean: a smooth, (min,max)-bounded max surrogate."""
    values = ad.as_tensor(values)
    shift = float(values.data.max())
    weights = ad.exp((values - shift) * (1.0 / temperature))
    return ad.sum_(weights * values) / ad.sum_(weights)


def objectness(model_or_models, pair, gt_box, temperature=0.05,
               weight_tensors=None):
    """Smooth-max person confidence over the target's box (differentiable).

    For an independent RGB/T pair passed as a sequence, returns the sum
    of the two models' smooth-maxes (joint attack loss).
    """
    if isinstance(model_or_models, (list, tuple)):
        total = None
        wts = weight_tensors if weight_tensors is not None \
            else [None] * len(model_or_models)
        for m, wt in zip(model_or_models, wts):
            term = objectness(m, pair, gt_box, temperature, weight_tensors=wt)
            total = term if total is None else total + term
        return total
    model = model_or_models
    grid = forward(model, pair, weight_tensors=weight_tensors)
    r0, r1, c0, c1 = region_cells(gt_box, grid.shape, model.stride)
    region = grid[r0:r1, c0:c1]
    return smooth_max(region, temperature)


# -- training -----------------------------------------------------------------


def _bce_with_logits(logits, targets, pos_weight):
    """Stable weighted binary cross-entropy on a logit grid."""
    t = ad.Tensor(targets)
    w = ad.Tensor(np.where(targets > 0.5, pos_weight, 1.0))
    abs_z = ad.relu(logits) + ad.relu(-logits)
    softplus = ad.relu(logits) + ad.log(1.0 + ad.exp(-abs_z))
    per_cell = softplus - t * logits
    return ad.sum_(w * per_cell) / float(targets.size)


def _training_logits(model, pair, wt):
    """Pre-sigmoid logit grids to train on.

    Late fusion returns both single-modality grids so each scorer learns
    to detect on its own; the inference-time mean of confidences then
    behaves like a prediction-stage vote.
    """
    rgb_t, thm_t = _pair_tensors(pair)
    specs = _layer_specs(model.arch, model.width)
    thm3 = ad.reshape(thm_t, thm_t.shape + (1,))
    if model.arch == FusionArch.EARLY:
        x = ad.concat([rgb_t, thm3], axis=2)
        return [_run_stack(wt, "stem", specs["stem"], x)[:, :, 0]]
    if model.arch == FusionArch.MID:
        f_rgb = _run_stack(wt, "rgb", specs["rgb"], rgb_t)
        f_thm = _run_stack(wt, "thm", specs["thm"], thm3)
        joint = ad.concat([f_rgb, f_thm], axis=2)
        return [_run_stack(wt, "joint", specs["joint"], joint)[:, :, 0]]
    if model.arch == FusionArch.LATE:
        return [
            _run_stack(wt, "rgb", specs["rgb"], rgb_t)[:, :, 0],
            _run_stack(wt, "thm", specs["thm"], thm3)[:, :, 0],
        ]
    if model.arch == FusionArch.INDEP_RGB:
        return [_run_stack(wt, "stem", specs["stem"], rgb_t)[:, :, 0]]
    if model.arch == FusionArch.INDEP_T:
        return [_run_stack(wt, "stem", specs["stem"], thm3)[:, :, 0]]
    raise DetectorError(f"unknown arch {model.arch!r}")


def _cell_targets(gt_box, grid_shape, stride):
    t = np.zeros(grid_shape)
    if gt_box is None:
        return t
    try:
        r0, r1, c0, c1 = region_cells(gt_box, grid_shape, stride)
    except DetectorError:
        return t
    t[r0:r1, c0:c1] = 1.0
    return t


class _Adam:
    def __init__(self, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {n: 0.0 for n in names}
        self.v = {n: 0.0 for n in names}
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        for n, g in grads.items():
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mhat = self.m[n] / (1 - self.b1**self.t)
            vhat = self.v[n] / (1 - self.b2**self.t)
            weights[n] = weights[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _decode_height_for(sample, model):
    """Nominal decode height: scene geometry when known, gt as fallback."""
    if sample.meta and "distance" in sample.meta:
        return nominal_height_px(sample.meta["distance"]), model.size_scale
    if sample.gt_box is not None:
        return sample.gt_box[3] - sample.gt_box[1], 1.0
    return REF_HEIGHT_PX, model.size_scale


def evaluate_detector(model, samples, conf_threshold=0.6, iou_threshold=0.5):
    """Scene-level recall/precision via decode against tight boxes."""
    tp = fp = fn = 0
    for s in samples:
        grid = forward(model, s.image)
        bh, scale = _decode_height_for(s, model)
        dets = decode(grid, conf_threshold, model.stride,
                      box_height_px=bh, size_scale=scale)
        if s.label and s.gt_box is not None:
            hit = any(
                d.confidence >= conf_threshold
                and _box_iou(d.box, s.gt_box) >= iou_threshold
                for d in dets
            )
            tp += int(hit)
            fn += int(not hit)
            fp += sum(
                1 for d in dets if _box_iou(d.box, s.gt_box) < iou_threshold
            )
        else:
            fp += len(dets)
    recall = tp / max(tp + fn, 1)
    precision = tp / max(tp + fp, 1) if (tp + fp) else 1.0
    return {"recall": recall, "precision": precision,
            "tp": tp, "fp": fp, "fn": fn}


def train(arch, dataset, epochs=12, lr=3e-3, seed=0, width=8, batch_size=8,
          pos_weight=6.0, val_fraction=0.2):
    """BCE training on per-cell targets; deterministic in the seed.

    Cells whose centers fall in the ground-truth box are positive. The
    decode size scalar is calibrated on training positives after the
    last epoch. epochs=0 returns the untouched initialization.
    """
    labels = {bool(s.label) for s in dataset}
    if len(labels) < 2:
        raise DetectorError("training data must contain both labels")
    model = build(arch, seed=seed, width=width)
    split_rng = rng_for(seed, "train-split")
    order = np.arange(len(dataset))
    split_rng.shuffle(order)
    n_val = max(int(round(len(dataset) * val_fraction)), 1)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len({bool(dataset[i].label) for i in train_idx}) < 2:
        raise DetectorError("training split lost one of the classes")

    opt = _Adam(model.weights.keys(), lr)
    for epoch in range(epochs):
        ep_rng = rng_for(seed, "train-epoch", epoch)
        idx = train_idx.copy()
        ep_rng.shuffle(idx)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            wt = model.weight_tensors(requires_grad=True)
            leaves = list(wt.values())
            names = list(wt.keys())

            def batch_loss(*leaf_list):
                wmap = dict(zip(names, leaf_list))
                total = None
                for i in chunk:
                    s = dataset[i]
                    for logits in _training_logits(model, s.image, wmap):
                        targets = _cell_targets(
                            s.gt_box if s.label else None,
                            logits.shape, model.stride,
                        )
                        term = _bce_with_logits(logits, targets, pos_weight)
                        total = term if total is None else total + term
                return total / float(len(chunk))

            _, grads = ad.value_and_grad(batch_loss, leaves)
            opt.step(model.weights,
                     {n: g.data for n, g in zip(names, grads)})

    # calibrate the decode size scalar on training positives
    ratios = []
    for i in train_idx:
        s = dataset[i]
        if s.label and s.gt_box is not None and "distance" in s.meta:
            gt_h = s.gt_box[3] - s.gt_box[1]
            ratios.append(gt_h / nominal_height_px(s.meta["distance"]))
    model.size_scale = float(np.mean(ratios)) if ratios else 1.0

    val_samples = [dataset[i] for i in val_idx]
    metrics = evaluate_detector(model, val_samples)
    model.train_meta = {
        "epochs": epochs, "lr": lr, "seed": seed,
        "n_train": int(len(train_idx)), "n_val": int(len(val_idx)),
        "val_recall": metrics["recall"], "val_precision": metrics["precision"],
    }
    return model


# -- persistence --------------------------------------------------------------


def save(model, path):
    """Binary weight blob with a JSON header; round-trips bit-exactly."""
    names = sorted(model.weights.keys())
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "arch": model.arch.value,
        "stride": model.stride,
        "width": model.width,
        "seed": model.seed,
        "size_scale": model.size_scale,
        "train_meta": model.train_meta,
        "tensors": [
            {"name": n, "shape": list(model.weights[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.weights[n], dtype=np.float64)
                     .tobytes())


def load(path, expect_arch=None):
    """Inverse of save; errors on corrupt files or an arch mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise DetectorError(f"{path} is not a detector model file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise DetectorError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DetectorError(f"{path} has a corrupt header") from None
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise DetectorError(
            f"model format version {header.get('format_version')} "
            f"is not {MODEL_FORMAT_VERSION}"
        )
    arch = FusionArch(header["arch"])
    if expect_arch is not None and FusionArch(expect_arch) != arch:
        raise DetectorError(
            f"expected arch {FusionArch(expect_arch).value!r}, "
            f"file holds {arch.value!r}"
        )
    offset = 8 + hlen
    weights = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(raw):
            raise DetectorError(f"{path} is truncated (weights)")
        weights[spec["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype=np.float64
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DetectorError(f"{path} has trailing bytes")
    return DetectorModel(
        arch=arch, weights=weights, stride=header["stride"],
        width=header["width"], seed=header["seed"],
        size_scale=header["size_scale"], train_meta=header["train_meta"],
    )
