"""Student, teacher and pose networks plus the checkpoint container."""
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataIOError, FormatError, ValidationError
from .fusion import PriorDepthFusion
from .geometry import MAX_DEPTH, MIN_DEPTH, Pose, axis_angle_to_matrix, disp_to_depth

STUDENT_WIDTHS = (8, 16, 32, 64)
TEACHER_WIDTHS = (16, 32, 64, 128)


def _stage_strides(stride, n_stages=4):
    n_down = int(round(np.log2(stride)))
    if 2 ** n_down != stride or n_down > n_stages:
        raise ConfigError(f"encoder stride must be a power of two <= {2 ** n_stages}, got {stride}")
    return [2] * n_down + [1] * (n_stages - n_down)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")


def coordinate_channels(x):
    """Normalised (x, y) pixel coordinates in [-1, 1] as two extra channels."""
    b, _, h, w = x.shape
    ys = torch.linspace(-1, 1, h, dtype=x.dtype, device=x.device)
    xs = torch.linspace(-1, 1, w, dtype=x.dtype, device=x.device)
    grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), 0)
    return torch.cat([x, grid.expand(b, -1, -1, -1)], 1)


INIT_DISP_LOGIT = -4.6
ROT_SCALE = 0.01
TRANS_SCALE = 1.0
CORR_SHARPNESS = 100.0


class Encoder(nn.Module):
    """Four-stage convolutional pyramid.

    Coordinate channels are appended to the input so the network can tie
    depth to image position (ground plane, horizon). Besides the final map
    the intermediate outputs finer than the final stride are exposed as
    decoder skips, ordered coarse to fine.
    """

    def __init__(self, in_channels=3, widths=STUDENT_WIDTHS, stride=4):
        super().__init__()
        self.stride = stride
        stages, cin, factor, skips = [], in_channels + 2, 1, []
        for i, (w, s) in enumerate(zip(widths, _stage_strides(stride, len(widths)))):
            stages.append(nn.Sequential(conv3x3(cin, w, s), nn.ELU(), conv3x3(w, w), nn.ELU()))
            factor *= s
            cin = w
            if factor < stride and (i + 1 == len(widths) or _stage_strides(stride, len(widths))[i + 1] == 2):
                skips.append((i, w))
        self.stages = nn.ModuleList(stages)
        self._skip_stages = [i for i, _ in reversed(skips)]
        self.skip_channels = [w for _, w in reversed(skips)]
        self.out_channels = cin

    def forward(self, x, return_skips=False):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input {w}x{h} is not divisible by encoder stride {self.stride}")
        x = coordinate_channels(x)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        if return_skips:
            return x, [outputs[i] for i in self._skip_stages]
        return x


class DepthDecoder(nn.Module):
    """Upsampling decoder ending in a sigmoid disparity at input resolution."""

    def __init__(self, in_channels, stride=4, widths=(32, 16), skip_channels=()):
        super().__init__()
        n_up = int(round(np.log2(stride)))
        widths = list(widths) + [widths[-1]] * max(0, n_up - len(widths))
        blocks, cin = [], in_channels
        for i, w in enumerate(widths[:n_up]):
            blocks.append(nn.Sequential(conv3x3(cin, w), nn.ELU()))
            cin = w + (skip_channels[i] if i < len(skip_channels) else 0)
        self.blocks = nn.ModuleList(blocks)
        self.refine = nn.Sequential(conv3x3(cin, widths[n_up - 1]), nn.ELU())
        self.out = conv3x3(widths[n_up - 1], 1)
        # start near 10 m rather than at the 0.2 m a zero logit would give
        nn.init.constant_(self.out.bias, INIT_DISP_LOGIT)

    def forward(self, features, skips=()):
        x = features
        for i, block in enumerate(self.blocks):
            x = F.interpolate(block(x), scale_factor=2, mode="nearest")
            if i < len(skips):
                x = torch.cat([x, skips[i]], 1)
        return torch.sigmoid(self.out(self.refine(x)))


class MatchDims(nn.Module):
    """1x1 convolution mapping teacher channels onto student channels."""

    def __init__(self, c_t, c_s):
        super().__init__()
        self.conv = nn.Conv2d(c_t, c_s, 1)

    def forward(self, f_r):
        if f_r.dim() == 4:
            return self.conv(f_r)
        # bank rows, R x C_t
        return F.linear(f_r, self.conv.weight.flatten(1), self.conv.bias)


def local_correlation(a, b, radius=3):
    """Negative mean absolute difference between ``a`` and ``b`` shifted by
    every offset in ``[-radius, radius]^2``: ``B x (2r+1)^2 x H x W``."""
    h, w = a.shape[-2:]
    padded = F.pad(b, (radius, radius, radius, radius), mode="replicate")
    costs = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            costs.append(-(a - padded[..., dy:dy + h, dx:dx + w]).abs().mean(1))
    return torch.stack(costs, 1)


class PoseNet(nn.Module):
    """Regresses the transform taking frame-a camera points into frame b.

    A local correlation volume at half resolution supplies the motion cue;
    plain convolutions over stacked frames learn it far too slowly.
    """

    kind = "pose"

    def __init__(self, widths=(32, 64, 64, 64), radius=3, zero_init=False):
        super().__init__()
        self.descriptor = {"kind": self.kind, "widths": list(widths), "radius": radius}
        self.radius = radius
        layers, cin = [], (2 * radius + 1) ** 2 + 3
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.ELU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 6, 1)
        if zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        else:
            # near-identity start; exact zeros would tie with the identity
            # error and stall the auto-mask
            with torch.no_grad():
                self.head.weight.mul_(0.01)
                self.head.bias.zero_()

    def forward(self, frame_a, frame_b):
        if frame_a.shape != frame_b.shape:
            raise ValidationError("pose frames must share resolution")
        a = F.avg_pool2d(frame_a, 2)
        b = F.avg_pool2d(frame_b, 2)
        # per-pixel soft match distribution; raw costs differ by ~1e-2 only
        match = torch.softmax(CORR_SHARPNESS * local_correlation(a, b, self.radius), dim=1)
        x = torch.cat([match, a], 1)
        out = self.head(self.body(x)).mean(dim=(2, 3))
        # rotations between neighbouring frames are small, translations are
        # tenths of a meter; scale the raw outputs accordingly
        return axis_angle_to_matrix(ROT_SCALE * out[:, :3]), TRANS_SCALE * out[:, 3:]


def estimate_pose(pose_net, frame_a, frame_b):
    """Single-pair convenience wrapper returning a :class:`Pose`."""
    with torch.no_grad():
        R, t = pose_net(frame_a, frame_b)
    return Pose(R[0].double().numpy(), t[0].double().numpy())


class TeacherNet(nn.Module):
    """Rich-resource model: high-resolution frame t stacked with frame t-1."""

    kind = "teacher"

    def __init__(self, in_channels=6, widths=TEACHER_WIDTHS, stride=4):
        super().__init__()
        self.descriptor = {"kind": self.kind, "in_channels": in_channels,
                           "widths": list(widths), "stride": stride}
        self.encoder = Encoder(in_channels, widths, stride)
        self.decoder = DepthDecoder(self.encoder.out_channels, stride,
                                    skip_channels=self.encoder.skip_channels)

    @property
    def channels(self):
        return self.encoder.out_channels

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x):
        f, skips = self.encoder(x, return_skips=True)
        return f, self.decoder(f, skips)

    def predict_depth(self, x):
        return disp_to_depth(self(x)[1], MIN_DEPTH, MAX_DEPTH)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


class StudentNet(nn.Module):
    """LR single-image model with optional prior depth fusion."""

    kind = "student"

    def __init__(self, widths=STUDENT_WIDTHS, stride=4, teacher_channels=TEACHER_WIDTHS[-1],
                 heads=4, use_bank=True, input_size=None):
        super().__init__()
        self.descriptor = {"kind": self.kind, "widths": list(widths), "stride": stride,
                           "teacher_channels": teacher_channels, "heads": heads,
                           "use_bank": bool(use_bank),
                           "input_size": list(input_size) if input_size else None}
        self.use_bank = bool(use_bank)
        # LR (height, width) the student was trained at; None accepts any
        self.input_size = tuple(input_size) if input_size else None
        self.encoder = Encoder(3, widths, stride)
        c_s = self.encoder.out_channels
        if self.use_bank:
            self.conv_m = MatchDims(teacher_channels, c_s)
            self.fusion = PriorDepthFusion(c_s, teacher_channels, heads)
        self.decoder = DepthDecoder(c_s, stride, skip_channels=self.encoder.skip_channels)

    @property
    def channels(self):
        return self.encoder.out_channels

    def forward(self, image, features_raw=None, depths=None, features_matched=None):
        """Predict disparity for an LR batch.

        During training pass raw bank rows and depths; ``Conv_m`` then runs
        online. At inference ``features_matched`` from a stored bank skips it.
        """
        F_s, skips = self.encoder(image, return_skips=True)
        out = {"F_s": F_s}
        if self.use_bank:
            if features_raw is None or depths is None:
                raise ValidationError("prior fusion needs bank features and depths")
            F_r = self.conv_m(features_raw) if features_matched is None else features_matched
            out.update(self.fusion(F_s, F_r, features_raw, depths))
            F_o = out["F_o"]
        else:
            F_o = F_s
        out["disp"] = self.decoder(F_o, skips)
        return out


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = "RPRCKPT 1"


@dataclass
class ModelCheckpoint:
    """Architecture descriptor, named float32 parameters and a step counter.

    File layout: a magic line, one JSON line holding the descriptor and step,
    then per tensor a line ``TENSOR <name> <d0,d1,...>`` followed by its
    little-endian float32 bytes, and a closing ``END`` line.
    """

    descriptor: dict
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def from_model(cls, model, step=0):
        params = OrderedDict((k, v.detach().cpu().numpy().astype("<f4"))
                             for k, v in model.state_dict().items())
        return cls(dict(model.descriptor), params, int(step))

    def build(self):
        model = build_model(self.descriptor)
        expected = model.state_dict()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))[:5]
            raise FormatError(f"checkpoint parameters do not match architecture: {missing}")
        state = OrderedDict()
        for k, v in expected.items():
            if tuple(v.shape) != self.params[k].shape:
                raise FormatError(f"shape mismatch for {k}: {self.params[k].shape} vs {tuple(v.shape)}")
            state[k] = torch.from_numpy(np.array(self.params[k], dtype=np.float32))
        model.load_state_dict(state)
        return model

    def save(self, path):
        with open(path, "wb") as f:
            f.write((CKPT_MAGIC + "\n").encode())
            f.write((json.dumps({"descriptor": self.descriptor, "step": self.step},
                                sort_keys=True) + "\n").encode())
            for name, arr in self.params.items():
                shape = ",".join(str(d) for d in arr.shape)
                f.write(f"TENSOR {name} {shape}\n".encode())
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            f.write(b"END\n")

    @classmethod
    def load(cls, path):
        try:
            fh = open(path, "rb")
        except FileNotFoundError as e:
            raise DataIOError(f"missing checkpoint: {path}") from e
        with fh as f:
            if f.readline().decode(errors="replace").strip() != CKPT_MAGIC:
                raise FormatError(f"{path} is not a checkpoint file")
            try:
                meta = json.loads(f.readline())
            except ValueError as e:
                raise FormatError(f"corrupt descriptor in {path}") from e
            params = OrderedDict()
            while True:
                line = f.readline().decode(errors="replace").strip()
                if line == "END":
                    break
                parts = line.split()
                if len(parts) not in (2, 3) or parts[0] != "TENSOR":
                    raise FormatError(f"corrupt tensor header in {path}: {line[:40]!r}")
                shape = tuple(int(d) for d in parts[2].split(",")) if len(parts) == 3 else ()
                n = int(np.prod(shape)) if shape else 1
                buf = f.read(4 * n)
                if len(buf) != 4 * n:
                    raise FormatError(f"truncated tensor {parts[1]} in {path}")
                params[parts[1]] = np.frombuffer(buf, dtype="<f4").reshape(shape)
        return cls(meta["descriptor"], params, int(meta.get("step", 0)))


def build_model(descriptor):
    d = dict(descriptor)
    kind = d.pop("kind", None)
    if kind == "teacher":
        return TeacherNet(d["in_channels"], tuple(d["widths"]), d["stride"])
    if kind == "student":
        return StudentNet(tuple(d["widths"]), d["stride"], d["teacher_channels"], d["heads"],
                          d["use_bank"], d.get("input_size"))
    if kind == "pose":
        return PoseNet(tuple(d["widths"]), d.get("radius", 3))
    raise FormatError(f"unknown architecture kind {kind!r}")


def save_model(model, path, step=0):
    ModelCheckpoint.from_model(model, step).save(path)


def load_model(source):
    """Build a model from a :class:`ModelCheckpoint` or a checkpoint path."""
    ckpt = source if isinstance(source, ModelCheckpoint) else ModelCheckpoint.load(source)
    model = ckpt.build()
    model.step = ckpt.step
    return model


def parameter_checksum(model):
    """SHA-256 over every parameter's raw bytes, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
