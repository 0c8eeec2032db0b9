"""Reference feature bank: offline sampling, persistence and attention
guided feature selection (AGFS)."""
import math
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataIOError, FormatError, ValidationError
from .geometry import MAX_DEPTH, MIN_DEPTH, disp_to_depth

BANK_MAGIC = b"RPRB"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")
PROVENANCE_DTYPE = np.dtype([("image_id", "<u4"), ("row", "<u2"), ("col", "<u2")])


@dataclass(frozen=True)
class ReferenceBank:
    features_raw: np.ndarray  # R x C_t
    features_matched: np.ndarray  # R x C_s
    depths: np.ndarray  # R, meters
    provenance: np.ndarray  # R records of PROVENANCE_DTYPE
    selected: bool = False

    def __post_init__(self):
        R = len(self.depths)
        if R == 0:
            raise ValidationError("a reference bank needs at least one row")
        if (self.features_raw.shape[0] != R or self.features_matched.shape[0] != R
                or len(self.provenance) != R):
            raise ValidationError("bank arrays disagree on the number of rows")
        for name in ("features_raw", "features_matched", "depths"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"bank {name} contains non-finite values")
        if not np.all(self.depths > 0):
            raise ValidationError("bank depths must be positive")

    def __len__(self):
        return len(self.depths)

    @property
    def c_t(self):
        return self.features_raw.shape[1]

    @property
    def c_s(self):
        return self.features_matched.shape[1]

    def tensors(self, dtype=torch.float32):
        """Torch views of (features_raw, features_matched, depths)."""
        return (torch.from_numpy(self.features_raw).to(dtype),
                torch.from_numpy(self.features_matched).to(dtype),
                torch.from_numpy(self.depths).to(dtype))

    def with_matched(self, matched):
        return replace(self, features_matched=np.asarray(matched, dtype=np.float32))


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("weights must aggregate at least one image")
        if np.any(self.values < 0):
            raise ValidationError("aggregated weights must be non-negative")


def rows_per_image(pixels, pixel_fraction):
    """Bank rows sampled from one image of ``pixels`` feature pixels."""
    if not 0 < pixel_fraction <= 1:
        raise ConfigError(f"pixel_fraction must be in (0, 1], got {pixel_fraction}")
    return math.ceil(pixel_fraction * pixels)


def bank_rows(n_images, pixels, pixel_fraction):
    return n_images * rows_per_image(pixels, pixel_fraction)


def sample_reference_bank(teacher, ref_split, pixel_fraction, seed, student_channels=64,
                          batch_size=8):
    """Sample ``ceil(pixel_fraction * M)`` teacher feature pixels per ref image.

    Matched features are zero until :func:`refresh_matched` runs them through
    a trained ``Conv_m``.
    """
    from .data import teacher_input

    rows_per_image(1, pixel_fraction)  # validates the fraction up front
    items = list(ref_split)
    if not items:
        raise ConfigError("the ref split is empty")
    rng = np.random.default_rng(seed)
    teacher.eval()
    feats, depths, prov = [], [], []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            f, disp = teacher(teacher_input(chunk))
            stride = disp.shape[-1] // f.shape[-1]
            disp_f = F.avg_pool2d(disp, stride)
            depth_f = disp_to_depth(disp_f, MIN_DEPTH, MAX_DEPTH)
            _, c, hf, wf = f.shape
            m = hf * wf
            n = rows_per_image(m, pixel_fraction)
            for t, fi, di in zip(chunk, f, depth_f):
                idx = np.sort(rng.choice(m, size=n, replace=False))
                feats.append(fi.reshape(c, m).T[idx].numpy())
                depths.append(di.reshape(m)[idx].numpy())
                rec = np.empty(n, dtype=PROVENANCE_DTYPE)
                rec["image_id"] = t.sample_id
                rec["row"] = idx // wf
                rec["col"] = idx % wf
                prov.append(rec)
    raw = np.concatenate(feats).astype(np.float32)
    return ReferenceBank(raw, np.zeros((len(raw), student_channels), np.float32),
                         np.concatenate(depths).astype(np.float32), np.concatenate(prov))


def refresh_matched(bank, conv_m):
    """Snapshot ``Conv_m(features_raw)`` into the bank."""
    with torch.no_grad():
        matched = conv_m(torch.from_numpy(bank.features_raw)).numpy()
    return bank.with_matched(matched)


def _check_stochastic(rows, name):
    if not torch.allclose(rows.sum(-1), torch.ones((), dtype=rows.dtype), atol=1e-5):
        raise ValidationError(f"{name} rows must sum to 1")


def accumulate_weights(affinity, mha_weights):
    """Per-bank-row importance of one image: mean over targets of
    (affinity + head-averaged attention). Shapes ``M x R`` and ``h x M x R``."""
    affinity = torch.as_tensor(affinity)
    mha_weights = torch.as_tensor(mha_weights)
    if mha_weights.dim() == 2:
        mha_weights = mha_weights.unsqueeze(0)
    if mha_weights.shape[1:] != affinity.shape:
        raise ValidationError(f"affinity {tuple(affinity.shape)} and attention "
                              f"{tuple(mha_weights.shape)} shapes disagree")
    _check_stochastic(affinity, "affinity")
    _check_stochastic(mha_weights, "attention")
    return (mha_weights.mean(0) + affinity).mean(0)


def average_over_validation(model, bank, val_split, batch_size=8):
    """Average :func:`accumulate_weights` over every validation image."""
    items = list(val_split)
    if not items:
        raise ConfigError("the validation split is empty")
    if not model.use_bank:
        raise ConfigError("feature selection needs a student trained with prior fusion")
    model.eval()
    raw, _, depths = bank.tensors()
    total = torch.zeros(len(bank), dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            image = torch.from_numpy(np.stack([t.lr_target for t in chunk])).permute(0, 3, 1, 2)
            out = model(image, raw, depths)
            for A, attn in zip(out["A"], out["attention"]):
                total += accumulate_weights(A.double(), attn.double())
    return WeightVector((total / len(items)).numpy(), len(items))


def select_top_k(weights, k):
    """Indices of the ``k`` largest weights, descending, ties by ascending index."""
    values = np.asarray(weights.values if isinstance(weights, WeightVector) else weights)
    if not 1 <= k <= len(values):
        raise ValidationError(f"k must be in [1, {len(values)}], got {k}")
    return np.argsort(-values, kind="stable")[:k]


def default_k(n_rows, ratio=0.01):
    return max(1, math.ceil(ratio * n_rows))


def compress_bank(bank, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if len(np.unique(indices)) != len(indices):
        raise ValidationError("selection indices must be unique")
    if len(indices) == 0 or indices.min() < 0 or indices.max() >= len(bank):
        raise ValidationError("selection indices out of range")
    return ReferenceBank(bank.features_raw[indices], bank.features_matched[indices],
                         bank.depths[indices], bank.provenance[indices], selected=True)


def save_bank(bank, path):
    if len(bank) == 0:
        raise ValidationError("refusing to save an empty bank")
    header = _HEADER.pack(BANK_MAGIC, BANK_VERSION, len(bank), bank.c_t, bank.c_s,
                          int(bank.selected))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(bank.features_raw, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bank.features_matched, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bank.depths, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bank.provenance, dtype=PROVENANCE_DTYPE).tobytes())


def load_bank(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise DataIOError(f"missing bank file: {path}") from e
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, R, c_t, c_s, selected = _HEADER.unpack_from(blob)
    if magic != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    sizes = [R * c_t * 4, R * c_s * 4, R * 4, R * PROVENANCE_DTYPE.itemsize]
    if len(blob) != _HEADER.size + sum(sizes):
        raise FormatError(f"{path}: expected {_HEADER.size + sum(sizes)} bytes, found {len(blob)}")
    off = _HEADER.size
    arrays = []
    for size, dtype, shape in zip(sizes, ("<f4", "<f4", "<f4", PROVENANCE_DTYPE),
                                  ((R, c_t), (R, c_s), (R,), (R,))):
        arrays.append(np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=off)
                      .reshape(shape).copy())
        off += size
    return ReferenceBank(arrays[0].astype(np.float32), arrays[1].astype(np.float32),
                         arrays[2].astype(np.float32), arrays[3], selected=bool(selected))
