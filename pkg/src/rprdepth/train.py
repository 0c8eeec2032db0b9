"""Training stages: teacher, pseudo labels, reference bank, student, AGFS
selection and fine-tuning."""
import copy
import dataclasses
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import refbank
from .data import (SPLITS, PseudoLabelStore, assign_splits, build_pseudo_labels,
                   generate_synthetic_scene, load_dataset, teacher_input)
from .errors import ConfigError, NumericError, StageOrderError, ValidationError
from .geometry import disp_to_depth
from .losses import (auxiliary_loss, consistency_loss, reconstruction_loss, total_loss,
                     upsample_disp)
from .networks import PoseNet, StudentNet, TeacherNet, parameter_checksum

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    train_seed: int = 0
    n_train: int = 200
    n_ref: int = 20
    n_val: int = 20
    n_test: int = 20
    lr_width: int = 64
    lr_height: int = 32
    rr_scale: int = 2
    stride: int = 4
    heads: int = 4
    teacher_epochs: int = 40
    student_epochs: int = 15
    finetune_epochs: int = 3
    batch_size: int = 4
    learning_rate: float = 3e-4
    lr_decay_at: float = 0.75
    lr_decay_factor: float = 0.5
    alpha: float = 1.0
    beta: float = 0.1
    bank_cap: int = 4096
    pixel_fraction: float = 0.5
    agfs_ratio: float = 0.01
    agfs_k: int = 0
    use_bank: bool = True
    rich_loss: bool = True
    use_gt_poses: bool = False
    scale_norm: bool = True
    deterministic: bool = True
    data_dir: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        counts = ("n_train", "n_ref", "n_val", "n_test", "batch_size", "bank_cap", "heads", "stride")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("teacher_epochs", "student_epochs", "finetune_epochs", "agfs_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.rr_scale not in (2, 3, 4):
            raise ConfigError("rr_scale must be 2, 3 or 4")
        if self.lr_width % self.stride or self.lr_height % self.stride:
            raise ConfigError("LR resolution must be divisible by the encoder stride")
        if not 0 < self.pixel_fraction <= 1 or not 0 < self.agfs_ratio <= 1:
            raise ConfigError("pixel_fraction and agfs_ratio must be in (0, 1]")
        if self.learning_rate <= 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("learning rate must be positive and loss weights non-negative")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    @classmethod
    def from_text(cls, text):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(fields[key].type, value, key)
        return cls(**values)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _parse_value(typ, value, key):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool,
                                             "str": str}[typ]
    try:
        if typ is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def config_counts(config):
    return {"ref": config.n_ref, "val": config.n_val, "test": config.n_test, "train": config.n_train}


def make_splits(config):
    """Splits named by the config: read from ``data_dir`` when set, otherwise
    rendered in memory from ``seed``."""
    if config.data_dir:
        return {name: list(load_dataset(config.data_dir, name)) for name in SPLITS}
    counts = config_counts(config)
    triplets = generate_synthetic_scene(config.seed, sum(counts.values()),
                                        (config.lr_width, config.lr_height), config.rr_scale)
    return assign_splits(triplets, counts)


def set_determinism(config):
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class TensorData:
    """Triplets converted once into stacked float32 tensors."""

    def __init__(self, triplets, pseudo_labels=None):
        triplets = list(triplets)
        if not triplets:
            raise ValidationError("empty dataset")
        self.ids = [t.sample_id for t in triplets]
        self.lr = torch.from_numpy(np.stack([t.lr_target for t in triplets])).permute(0, 3, 1, 2).float()
        frames = np.stack([t.frames for t in triplets])  # N x 3 x H x W x 3
        self.frames = torch.from_numpy(frames).permute(0, 1, 4, 2, 3).float().contiguous()
        self.K_rr = torch.from_numpy(np.stack([t.intrinsics_rr.matrix() for t in triplets])).float()
        self.K_lr = torch.from_numpy(np.stack([t.intrinsics_lr.matrix() for t in triplets])).float()
        self.scale = triplets[0].rr_scale
        self.teacher_in = teacher_input(triplets)
        if all(t.gt_poses is not None for t in triplets):
            self.gt_R = torch.from_numpy(np.stack([[p.rotation for p in t.gt_poses] for t in triplets])).float()
            self.gt_t = torch.from_numpy(np.stack([[p.translation for p in t.gt_poses] for t in triplets])).float()
        else:
            self.gt_R = self.gt_t = None
        self.pseudo = None
        if pseudo_labels is not None:
            missing = [i for i in self.ids if i not in pseudo_labels]
            if missing:
                raise StageOrderError(f"pseudo labels missing for samples {missing[:5]}")
            self.pseudo = torch.from_numpy(np.stack([pseudo_labels[i] for i in self.ids]))[:, None]

    def __len__(self):
        return len(self.ids)

    def batches(self, batch_size, generator=None):
        order = torch.randperm(len(self), generator=generator) if generator is not None \
            else torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]


def _poses(pose_net, data, idx, use_gt):
    """``[(R, t)]`` for sources t-1 and t+1.

    The pose network is a training-time component, so it reads the
    rich-resolution frames.
    """
    if use_gt:
        if data.gt_R is None:
            raise ValidationError("use_gt_poses requires ground-truth poses")
        return [(data.gt_R[idx, k], data.gt_t[idx, k]) for k in (0, 1)]
    # pairs are always fed in temporal order so a shared forward-motion
    # estimate serves both sources; the backward pose is then inverted
    frames = data.frames[idx]
    prev, target, nxt = frames[:, 0], frames[:, 1], frames[:, 2]
    R, t = pose_net(prev, target)
    R_inv = R.transpose(1, 2)
    return [(R_inv, -(R_inv @ t.unsqueeze(-1)).squeeze(-1)), pose_net(target, nxt)]


def _scale_norm(config):
    # metric gt poses fix the scale themselves
    return config.scale_norm and not config.use_gt_poses


def _lr_frames(data, idx):
    f = data.frames[idx]
    b, n, c, h, w = f.shape
    return F.avg_pool2d(f.reshape(b * n, c, h, w), data.scale).reshape(b, n, c, h // data.scale,
                                                                        w // data.scale)


def _optimizer(params, config, epochs):
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    milestone = max(1, int(math.floor(config.lr_decay_at * epochs)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [milestone], gamma=config.lr_decay_factor)
    return opt, sched


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def train_teacher(config, dataset, history=None, return_pose_net=False):
    """Train the rich-resource teacher on high-resolution two-frame input.

    With ``return_pose_net`` the jointly trained pose network is returned as
    well, so students can start from it.
    """
    set_determinism(config)
    data = dataset if isinstance(dataset, TensorData) else TensorData(dataset)
    torch.manual_seed(config.train_seed)
    teacher = TeacherNet(stride=config.stride)
    pose_net = PoseNet()
    opt, sched = _optimizer(list(teacher.parameters()) + list(pose_net.parameters()), config,
                            config.teacher_epochs)
    gen = torch.Generator().manual_seed(config.train_seed)
    step = 0
    for epoch in range(config.teacher_epochs):
        losses = []
        for idx in data.batches(config.batch_size, gen):
            frames = data.frames[idx]
            lr_frames = _lr_frames(data, idx)
            _, disp = teacher(data.teacher_in[idx])
            poses = _poses(pose_net, data, idx, config.use_gt_poses)
            loss = reconstruction_loss(disp, frames[:, 1], [frames[:, 0], frames[:, 2]], poses,
                                       data.K_rr[idx], normalize_scale=_scale_norm(config))
            if not torch.isfinite(loss):
                raise NumericError(f"teacher loss diverged at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        sched.step()
        log.info("teacher epoch %d loss %.4f", epoch, np.mean(losses))
        if history is not None:
            history.append(float(np.mean(losses)))
    teacher.step = step
    teacher = teacher.freeze()
    return (teacher, pose_net) if return_pose_net else teacher


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def student_step_loss(model, pose_net, data, idx, bank_rows, config):
    """Forward one batch and return ``(LossBreakdown, model outputs)``."""
    lr_frames = _lr_frames(data, idx)
    image = data.lr[idx]
    if model.use_bank:
        raw, depths = bank_rows
        out = model(image, raw, depths)
    else:
        out = model(image)
    poses = _poses(pose_net, data, idx, config.use_gt_poses)
    zero = out["disp"].new_zeros(())
    if config.rich_loss:
        frames = data.frames[idx]
        l_vp = reconstruction_loss(out["disp"], frames[:, 1], [frames[:, 0], frames[:, 2]], poses,
                                   data.K_rr[idx], normalize_scale=_scale_norm(config))
        if data.pseudo is None:
            raise StageOrderError("the rich-resource loss needs pseudo labels")
        pseudo = data.pseudo[idx]
        depth_up = disp_to_depth(upsample_disp(out["disp"], pseudo.shape[-2:]))
        l_c = consistency_loss(depth_up, pseudo)
    else:
        l_vp = reconstruction_loss(out["disp"], lr_frames[:, 1], [lr_frames[:, 0], lr_frames[:, 2]],
                                   poses, data.K_lr[idx], normalize_scale=_scale_norm(config))
        l_c = zero
    if model.use_bank:
        if data.pseudo is None:
            raise StageOrderError("the auxiliary loss needs pseudo labels")
        l_aux = auxiliary_loss(out["D_c"], data.pseudo[idx])
    else:
        l_aux = zero
    return total_loss(l_vp, l_c, l_aux, config.alpha, config.beta), out


class BankSampler:
    """Uniform per-step subsampling of bank rows, capped at ``cap``."""

    def __init__(self, bank, cap, generator):
        self.raw, _, self.depths = bank.tensors()
        self.cap = cap
        self.generator = generator
        self.peak_rows = 0

    def __call__(self):
        R = len(self.depths)
        if self.cap is None or R <= self.cap:
            rows = (self.raw, self.depths)
        else:
            idx = torch.randperm(R, generator=self.generator)[:self.cap]
            rows = (self.raw[idx], self.depths[idx])
        self.peak_rows = max(self.peak_rows, len(rows[1]))
        return rows


def _student_loop(model, pose_net, data, bank, config, epochs, cap, history=None, sampler_out=None):
    params = [p for p in model.parameters() if p.requires_grad] + list(pose_net.parameters())
    opt, sched = _optimizer(params, config, epochs)
    gen = torch.Generator().manual_seed(config.train_seed + 1)
    sampler = BankSampler(bank, cap, gen) if model.use_bank else None
    if sampler_out is not None:
        sampler_out.append(sampler)
    model.train()
    step = getattr(model, "step", 0)
    for epoch in range(epochs):
        epoch_losses = []
        for idx in data.batches(config.batch_size, gen):
            rows = sampler() if sampler is not None else None
            breakdown, _ = student_step_loss(model, pose_net, data, idx, rows, config)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            epoch_losses.append(breakdown.as_floats())
            step += 1
        sched.step()
        mean = {k: float(np.mean([l[k] for l in epoch_losses])) for k in epoch_losses[0]}
        log.info("student epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in mean.items()))
        if history is not None:
            history.append(mean)
    model.step = step
    model.eval()
    return model


def train_student(config, dataset, teacher, bank, pseudo_labels, history=None, pose_net=None):
    """Train the LR student with prior fusion (or the no-bank baseline).

    Returns ``(student, pose_net, bank)`` where the bank carries matched
    features refreshed with the trained ``Conv_m``.
    """
    if teacher is not None:
        if any(p.requires_grad for p in teacher.parameters()):
            raise StageOrderError("the teacher must be frozen before student training")
        checksum = parameter_checksum(teacher)
    if config.use_bank and bank is None:
        raise StageOrderError("prior fusion needs a reference bank; build it first")
    if (config.use_bank or config.rich_loss) and pseudo_labels is None:
        raise StageOrderError("pseudo labels must be generated before student training")
    set_determinism(config)
    data = dataset if isinstance(dataset, TensorData) else TensorData(dataset, pseudo_labels)
    torch.manual_seed(config.train_seed)
    c_t = bank.c_t if bank is not None else 128
    model = StudentNet(stride=config.stride, teacher_channels=c_t, heads=config.heads,
                       use_bank=config.use_bank,
                       input_size=tuple(data.lr.shape[-2:]))
    pose_net = pose_net or PoseNet()
    _student_loop(model, pose_net, data, bank, config, config.student_epochs, config.bank_cap,
                  history)
    if teacher is not None and parameter_checksum(teacher) != checksum:
        raise RuntimeError("teacher parameters changed during student training")
    if config.use_bank:
        bank = refbank.refresh_matched(bank, model.conv_m)
    return model, pose_net, bank


def select_features(model, bank, val_split, k=None, ratio=0.01):
    """AGFS: aggregate attention/affinity weights on validation images and
    keep the top ``k`` bank rows."""
    weights = refbank.average_over_validation(model, bank, val_split)
    k = k or refbank.default_k(len(bank), ratio)
    indices = refbank.select_top_k(weights, k)
    return refbank.compress_bank(bank, indices), weights


def finetune_with_selected_bank(student, compressed_bank, config, dataset, pseudo_labels,
                                pose_net=None, history=None, sampler_out=None):
    """Continue training on the AGFS bank with no per-step subsampling.

    Returns ``(student, pose_net, bank)`` with refreshed matched features.
    """
    if not compressed_bank.selected:
        raise StageOrderError("fine-tuning requires an AGFS-selected bank")
    if not student.use_bank:
        raise ConfigError("cannot fine-tune a student without prior fusion on a bank")
    set_determinism(config)
    data = dataset if isinstance(dataset, TensorData) else TensorData(dataset, pseudo_labels)
    torch.manual_seed(config.train_seed + 2)
    pose_net = pose_net or PoseNet()
    if config.finetune_epochs > 0:
        _student_loop(student, pose_net, data, compressed_bank, config, config.finetune_epochs,
                      None, history, sampler_out)
    return student, pose_net, refbank.refresh_matched(compressed_bank, student.conv_m)


# ---------------------------------------------------------------------------
# stage orchestration
# ---------------------------------------------------------------------------

STAGES = ("teacher", "pseudo_labels", "bank", "student", "selection", "finetune")


class Pipeline:
    """Runs the stages in order, refusing any stage whose inputs do not exist."""

    def __init__(self, config, splits):
        self.config = config
        self.splits = splits
        self.done = []
        self.teacher = self.pseudo = self.bank = self.teacher_pose = None
        self.student = self.pose_net = self.student_bank = None
        self.selected_bank = self.weights = None
        self._tensors = None

    def _require(self, stage):
        needed = STAGES[:STAGES.index(stage)]
        missing = [s for s in needed if s not in self.done]
        if missing:
            raise StageOrderError(f"stage {stage!r} requires {missing} first")

    def _mark(self, stage):
        if stage not in self.done:
            self.done.append(stage)

    def train_data(self):
        if self._tensors is None:
            self._tensors = TensorData(self.splits["train"], self.pseudo)
        return self._tensors

    def run_teacher(self, history=None):
        self.teacher, self.teacher_pose = train_teacher(self.config, self.splits["train"], history,
                                                        return_pose_net=True)
        self._mark("teacher")
        return self.teacher

    def run_pseudo_labels(self):
        self._require("pseudo_labels")
        self.pseudo = build_pseudo_labels(self.teacher, self.splits["train"])
        self._tensors = None
        self._mark("pseudo_labels")
        return self.pseudo

    def run_bank(self):
        self._require("bank")
        self.bank = refbank.sample_reference_bank(self.teacher, self.splits["ref"],
                                                  self.config.pixel_fraction, self.config.seed)
        self._mark("bank")
        return self.bank

    def run_student(self, config=None, history=None):
        self._require("student")
        cfg = config or self.config
        pose = copy.deepcopy(self.teacher_pose) if self.teacher_pose is not None else None
        student, pose_net, bank = train_student(cfg, self.train_data(), self.teacher, self.bank,
                                                self.pseudo, history, pose_net=pose)
        if cfg is self.config:
            self.student, self.pose_net, self.student_bank = student, pose_net, bank
            self._mark("student")
        return student, pose_net, bank

    def run_selection(self, student=None, bank=None):
        # an explicitly supplied student stands in for the student stage
        self._require("selection" if student is None else "student")
        k = self.config.agfs_k or None
        selected, weights = select_features(student or self.student, bank or self.student_bank,
                                            self.splits["val"], k, self.config.agfs_ratio)
        if student is None:
            self.selected_bank, self.weights = selected, weights
            self._mark("selection")
        return selected

    def run_finetune(self, student=None, bank=None, pose_net=None, config=None):
        self._require("finetune" if student is None else "student")
        cfg = config or self.config
        result = finetune_with_selected_bank(student or self.student, bank or self.selected_bank,
                                             cfg, self.train_data(), self.pseudo,
                                             pose_net or self.pose_net)
        if student is None:
            self.student, self.pose_net, self.selected_bank = result
            self._mark("finetune")
        return result


def save_pipeline_artifacts(pipeline, out_dir):
    from .networks import save_model

    os.makedirs(out_dir, exist_ok=True)
    if pipeline.teacher is not None:
        save_model(pipeline.teacher, os.path.join(out_dir, "teacher.ckpt"), pipeline.teacher.step)
    if pipeline.student is not None:
        save_model(pipeline.student, os.path.join(out_dir, "student.ckpt"), pipeline.student.step)
        save_model(pipeline.pose_net, os.path.join(out_dir, "pose.ckpt"))
    if pipeline.student_bank is not None:
        refbank.save_bank(pipeline.student_bank, os.path.join(out_dir, "bank_full.rprb"))
    if pipeline.selected_bank is not None:
        refbank.save_bank(pipeline.selected_bank, os.path.join(out_dir, "bank_selected.rprb"))


def load_pseudo_labels(root):
    return PseudoLabelStore.load(root)
