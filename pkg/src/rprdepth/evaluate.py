"""Inference from a compressed prior bank, depth metrics and ablation reports."""
import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EvaluationError, ValidationError
from .geometry import MAX_DEPTH, MIN_DEPTH, disp_to_depth

log = logging.getLogger(__name__)

MIN_EVAL_DEPTH = 1e-3
DEFAULT_CAP = 80.0
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3")


@dataclass(frozen=True)
class MetricsRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    cap_m: float = DEFAULT_CAP
    scaling: str = "median"

    def values(self):
        return np.array([getattr(self, k) for k in METRIC_NAMES])

    def row(self):
        return "  ".join(f"{v:8.4f}" for v in self.values())

    @staticmethod
    def header():
        return "  ".join(f"{k:>8s}" for k in METRIC_NAMES)


def compute_metrics(pred, gt, cap=DEFAULT_CAP, scaling="median"):
    """Standard depth error and accuracy metrics over pixels with ``0 < gt <= cap``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if scaling not in ("none", "median"):
        raise ValidationError(f"unknown scaling mode {scaling!r}")
    mask = (gt > 0) & (gt <= cap) & np.isfinite(gt)
    if not mask.any():
        raise EvaluationError("no valid ground-truth pixels")
    p = pred[mask]
    g = gt[mask]
    if scaling == "median":
        # scale before clamping so the result cannot depend on the raw scale
        p = np.maximum(p, MIN_EVAL_DEPTH)
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, MIN_EVAL_DEPTH, cap)
    thresh = np.maximum(p / g, g / p)
    return MetricsRecord(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        d1=float(np.mean(thresh < 1.25)),
        d2=float(np.mean(thresh < 1.25 ** 2)),
        d3=float(np.mean(thresh < 1.25 ** 3)),
        cap_m=float(cap), scaling=scaling)


def mean_metrics(records):
    if not records:
        raise EvaluationError("nothing to average")
    vals = np.mean([r.values() for r in records], axis=0)
    return MetricsRecord(*map(float, vals), cap_m=records[0].cap_m, scaling=records[0].scaling)


class InferenceEngine:
    """Frozen student plus a stored bank; the teacher is never needed."""

    def __init__(self, student, bank=None, postprocess=False, require_selected=True):
        if student.use_bank:
            if bank is None:
                raise ValidationError("this student fuses a prior bank; pass one")
            if require_selected and not bank.selected:
                raise ValidationError("deployed engines run from an AGFS-selected bank")
            if bank.c_s != student.channels:
                raise ValidationError("bank matched features do not fit the student")
        self.student = student.eval()
        for p in self.student.parameters():
            p.requires_grad_(False)
        if bank is not None and student.use_bank:
            bank = _matched_for(student, bank)
        self.bank = bank
        self.postprocess = postprocess
        self._bank_tensors = bank.tensors() if bank is not None and student.use_bank else None
        stride = student.encoder.stride
        self.stride = stride

    @classmethod
    def load(cls, checkpoint, bank_path=None, postprocess=False, require_selected=True):
        from .networks import load_model
        from .refbank import load_bank

        bank = load_bank(bank_path) if bank_path else None
        return cls(load_model(checkpoint), bank, postprocess, require_selected)

    def disparity(self, image):
        """``B x 3 x h x w`` image batch -> ``B x 1 x h x w`` disparity."""
        size = tuple(image.shape[-2:])
        expected = self.student.input_size
        if expected is not None and size != expected:
            raise ValidationError(f"image is {size[1]}x{size[0]} but the engine expects "
                                  f"{expected[1]}x{expected[0]}")
        if size[0] % self.stride or size[1] % self.stride:
            raise ValidationError("image resolution does not fit the encoder stride")
        with torch.no_grad():
            if self._bank_tensors is None:
                return self.student(image)["disp"]
            raw, matched, depths = self._bank_tensors
            return self.student(image, raw, depths, features_matched=matched)["disp"]


def _matched_for(student, bank):
    """The bank with matched features from this student's ``Conv_m``.

    A bank saved before fine-tuning carries matched features from older
    ``Conv_m`` weights; recomputing them is cheap for a compressed bank.
    """
    from .refbank import refresh_matched

    fresh = refresh_matched(bank, student.conv_m)
    if not np.allclose(fresh.features_matched, bank.features_matched, atol=1e-4):
        log.warning("bank matched features are stale for this student; recomputed")
    return fresh


def _as_batch(image):
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        if image.dim() == 3:
            image = image.permute(2, 0, 1)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return image.float()


def infer(engine, image):
    """Depth in meters at the input resolution."""
    return disp_to_depth(engine.disparity(_as_batch(image)), MIN_DEPTH, MAX_DEPTH)


def infer_postprocessed(engine, image):
    """Average of the plain prediction and the re-flipped prediction of the
    horizontally flipped image."""
    image = _as_batch(image)
    d1 = infer(engine, image)
    d2 = torch.flip(infer(engine, torch.flip(image, dims=[-1])), dims=[-1])
    return (d1 + d2) / 2


def predict(engine, image, postprocess=None):
    postprocess = engine.postprocess if postprocess is None else postprocess
    return infer_postprocessed(engine, image) if postprocess else infer(engine, image)


def evaluate_split(engine, dataset, cap=DEFAULT_CAP, scaling="median", postprocess=None,
                   batch_size=8):
    """Mean metrics over a split; predictions are resized to the ground truth."""
    items = list(dataset)
    if not items:
        raise EvaluationError("empty evaluation split")
    records = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        image = torch.from_numpy(np.stack([t.lr_target for t in chunk])).permute(0, 3, 1, 2)
        depth = predict(engine, image, postprocess)
        for t, d in zip(chunk, depth):
            if t.gt_depth is None:
                raise EvaluationError(f"sample {t.sample_id} has no ground truth")
            up = F.interpolate(d[None], size=t.gt_depth.shape, mode="bilinear",
                               align_corners=False)[0, 0]
            records.append(compute_metrics(up.numpy(), t.gt_depth, cap, scaling))
    return mean_metrics(records)


# ---------------------------------------------------------------------------
# depth export
# ---------------------------------------------------------------------------

# anchor colours of a dark-to-bright perceptual ramp, near (dark) to far
_RAMP = np.array([[0.99, 0.99, 0.75], [0.99, 0.60, 0.36], [0.87, 0.29, 0.41],
                  [0.55, 0.14, 0.51], [0.23, 0.06, 0.44], [0.0, 0.0, 0.02]])


def colorize(depth):
    """8-bit RGB rendering of a depth map, mapped through inverse depth so
    near structure gets most of the ramp."""
    inv = 1.0 / np.maximum(np.asarray(depth, dtype=np.float64), MIN_EVAL_DEPTH)
    lo, hi = np.percentile(inv, 1), np.percentile(inv, 99)
    t = 1.0 - np.clip((inv - lo) / max(hi - lo, 1e-12), 0, 1)
    pos = t * (len(_RAMP) - 1)
    i = np.minimum(pos.astype(int), len(_RAMP) - 2)
    frac = (pos - i)[..., None]
    rgb = _RAMP[i] * (1 - frac) + _RAMP[i + 1] * frac
    return np.round(rgb * 255).astype(np.uint8)


def export_depth(depth, path):
    """Write ``path`` as a depth file and a colorized PNG beside it.

    Returns the PNG path.
    """
    from PIL import Image

    from .data import write_depth

    depth = np.asarray(depth, dtype=np.float32)
    if not np.all(np.isfinite(depth)):
        raise EvaluationError("refusing to export a non-finite depth map")
    write_depth(path, depth)
    png = os.path.splitext(path)[0] + ".png"
    Image.fromarray(colorize(depth)).save(png)
    return png


# ---------------------------------------------------------------------------
# ablation reporting
# ---------------------------------------------------------------------------

VARIANTS = ("Baseline", "+PDF", "+AGFS", "+RGL", "Full")
TABLE_COLUMNS = ("abs_rel", "rmse", "d1")


def save_metrics(record, path):
    with open(path, "w") as f:
        json.dump(asdict(record), f, indent=1, sort_keys=True)


def load_metrics(path):
    with open(path) as f:
        return MetricsRecord(**json.load(f))


def ablation_report(metrics_dir, variants=VARIANTS):
    """Format stored per-variant metrics as a table.

    Returns ``(text, missing)``; absent variants appear as empty rows.
    """
    lines = [f"{'Components':<14s}" + "".join(f"{c:>10s}" for c in ("Abs Rel", "RMSE", "d<1.25"))]
    missing = []
    for name in variants:
        path = os.path.join(metrics_dir, f"{variant_slug(name)}.json")
        if not os.path.exists(path):
            missing.append(name)
            lines.append(f"{name:<14s}" + "".join(f"{'absent':>10s}" for _ in TABLE_COLUMNS))
            continue
        rec = load_metrics(path)
        lines.append(f"{name:<14s}" + "".join(f"{getattr(rec, c):10.4f}" for c in TABLE_COLUMNS))
    return "\n".join(lines), missing


def variant_slug(name):
    return {"Baseline": "baseline", "+PDF": "pdf", "+AGFS": "agfs", "+RGL": "rgl",
            "Full": "full", "Full-bank": "full_bank"}[name]


# (use_bank, rich_loss, AGFS) per variant; AGFS variants fine-tune on the
# selected bank of the matching full-bank student
VARIANT_SETTINGS = {
    "Baseline": (False, False, False),
    "+PDF": (True, False, False),
    "+AGFS": (True, False, True),
    "+RGL": (False, True, False),
    "Full": (True, True, True),
}


def run_ablation(config, out_dir, variants=VARIANTS, splits=None, pipeline=None):
    """Train and evaluate each variant on the test split.

    The teacher, pseudo labels and reference bank are shared; students with
    the same loss and fusion settings are trained once. Per-variant metrics,
    checkpoints and banks are written under ``out_dir``. Returns
    ``(report_text, missing, records, timings)``.
    """
    from .networks import save_model
    from .refbank import save_bank
    from .train import Pipeline, make_splits

    unknown = [v for v in variants if v not in VARIANT_SETTINGS]
    if unknown:
        raise ValidationError(f"unknown ablation variants {unknown}")
    splits = splits or make_splits(config)
    if not list(splits["test"]):
        raise EvaluationError("empty test split")
    pipe = pipeline or Pipeline(config, splits)
    timings = {}
    for stage, run in (("teacher", pipe.run_teacher), ("pseudo_labels", pipe.run_pseudo_labels),
                       ("bank", pipe.run_bank)):
        if stage not in pipe.done:
            start = time.perf_counter()
            run()
            timings[stage] = time.perf_counter() - start
    os.makedirs(out_dir, exist_ok=True)
    trained, records = {}, {}
    for name in variants:
        use_bank, rich, agfs = VARIANT_SETTINGS[name]
        cfg = config.replace(use_bank=use_bank, rich_loss=rich)
        start = time.perf_counter()
        if (use_bank, rich) not in trained:
            trained[use_bank, rich] = pipe.run_student(cfg)
        student, pose_net, bank = trained[use_bank, rich]
        if agfs:
            selected = pipe.run_selection(student, bank)
            student, pose_net, bank = pipe.run_finetune(copy.deepcopy(student), selected,
                                                        copy.deepcopy(pose_net), cfg)
        engine = InferenceEngine(student, bank if use_bank else None, require_selected=agfs)
        records[name] = evaluate_split(engine, splits["test"])
        timings[name] = time.perf_counter() - start
        slug = variant_slug(name)
        os.makedirs(os.path.join(out_dir, slug), exist_ok=True)
        save_model(student, os.path.join(out_dir, slug, "student.ckpt"), student.step)
        if use_bank:
            save_bank(bank, os.path.join(out_dir, slug, "bank.rprb"))
        save_metrics(records[name], os.path.join(out_dir, f"{slug}.json"))
        log.info("%s: %s (%.0f s)", name, records[name].row(), timings[name])
    text, missing = ablation_report(out_dir, variants)
    return text, missing, records, timings
