"""Synthetic triplet generation, on-disk dataset layout and pseudo labels.

Scenes are built from Lambertian textured planes and boxes and ray cast
from three camera positions along a short linear trajectory, so
photometric constancy holds exactly between the frames of a triplet.
"""
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, DataIOError, FormatError, ValidationError
from .geometry import Pose

SPLITS = ("train", "ref", "val", "test")
MIN_SCENE_DEPTH = 1.0
MAX_SCENE_DEPTH = 80.0
MIN_FRAME_TRANSLATION = 0.05
FOCAL_RATIO = 0.58


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def downscale(self, factor):
        """Intrinsics of the image obtained by ``factor x factor`` block averaging."""
        return CameraIntrinsics(self.fx / factor, self.fy / factor,
                                (self.cx + 0.5) / factor - 0.5,
                                (self.cy + 0.5) / factor - 0.5,
                                self.width // factor, self.height // factor)

    @classmethod
    def from_matrix(cls, K, width, height):
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
                   int(width), int(height))


@dataclass
class ImageTriplet:
    """Frames t-1, t, t+1 at rich resolution plus the low-resolution target."""

    sample_id: int
    frames: np.ndarray  # 3 x H x W x 3, order (t-1, t, t+1)
    lr_target: np.ndarray
    intrinsics_lr: CameraIntrinsics
    intrinsics_rr: CameraIntrinsics
    gt_depth: Optional[np.ndarray] = None
    gt_poses: Optional[tuple] = None  # (t -> t-1, t -> t+1)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] != 3 or self.frames.shape[-1] != 3:
            raise ValidationError(f"frames must be 3 x H x W x 3, got {self.frames.shape}")
        h, w = self.frames.shape[1:3]
        lh, lw = self.lr_target.shape[:2]
        if h % lh or w % lw or h // lh != w // lw or h // lh < 2:
            raise ValidationError("rich resolution must be an integer multiple (>= 2) of LR")
        if self.gt_depth is not None:
            if self.gt_depth.shape != (h, w):
                raise ValidationError("gt_depth must match the rich resolution")
            if not (np.all(np.isfinite(self.gt_depth)) and np.all(self.gt_depth > 0)):
                raise ValidationError("gt_depth must be finite and positive")

    @property
    def rr_target(self):
        return self.frames[1]

    @property
    def rr_scale(self):
        return self.frames.shape[1] // self.lr_target.shape[0]


# ---------------------------------------------------------------------------
# procedural renderer
# ---------------------------------------------------------------------------

def _rotation(rx, ry, rz):
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


DIRECTIONS_PER_OCTAVE = 3


@dataclass
class _Texture:
    """Solid (world-anchored) multi-octave sinusoidal albedo.

    Octaves fade out where their on-screen wavelength, as seen from the
    frame-t camera, drops below ``fade_px``; the fade is a fixed function of
    the 3D point, so photometric constancy between frames is preserved while
    texture density still encodes distance.
    """

    base: np.ndarray
    directions: np.ndarray  # k x 3 unit vectors
    wavelengths: np.ndarray  # meters
    phases: np.ndarray
    amplitudes: np.ndarray  # k x 3

    @classmethod
    def random(cls, rng, palette=((0.3, 0.3, 0.3), (0.7, 0.7, 0.7)),
               octaves=(0.15, 0.3, 0.6, 1.2, 2.4, 4.8, 9.6)):
        # several random directions per octave: a noise-like pattern avoids
        # the aperture ambiguity of single gratings
        octaves = np.repeat(np.asarray(octaves), DIRECTIONS_PER_OCTAVE)
        k = len(octaves)
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(base=rng.uniform(*palette),
                   directions=dirs,
                   wavelengths=np.asarray(octaves) * rng.uniform(0.8, 1.25, k),
                   phases=rng.uniform(0, 2 * np.pi, k),
                   amplitudes=rng.uniform(-0.1, 0.1, (k, 3)))

    def __call__(self, points, normals, focal, fade_px=(4.0, 8.0)):
        dist2 = (points ** 2).sum(1)
        # worst-case screen-space stretch of one meter on the surface
        cos = np.abs((points * normals).sum(1)) / np.sqrt(dist2)
        px_per_m = focal * np.maximum(cos, 1e-3) / np.sqrt(dist2)
        lo, hi = fade_px
        value = np.tile(self.base, (len(points), 1))
        for d, lam, phi, amp in zip(self.directions, self.wavelengths, self.phases,
                                    self.amplitudes):
            fade = np.clip((lam * px_per_m - lo) / (hi - lo), 0.0, 1.0)
            fade = fade * fade * (3 - 2 * fade)
            value += (fade * np.sin(2 * np.pi * (points @ d) / lam + phi))[:, None] * amp
        return np.clip(value, 0.0, 1.0)


@dataclass
class _Plane:
    normal: np.ndarray
    offset: float  # points p with normal . p = offset
    texture: _Texture

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ self.normal) / denom
        t[~np.isfinite(t) | (np.abs(denom) < 1e-9)] = np.inf
        t[t <= 1e-6] = np.inf
        return t

    def normals(self, points):
        return np.broadcast_to(self.normal, points.shape)


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: _Texture

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (self.lo - origin) * inv
            t1 = (self.hi - origin) * inv
        t0 = np.nan_to_num(t0, nan=-np.inf)
        t1 = np.nan_to_num(t1, nan=np.inf)
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        t = np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)
        return t

    def normals(self, points):
        # the face whose slab is closest to the hit point
        centre = (self.lo + self.hi) / 2
        half = (self.hi - self.lo) / 2
        axis = np.argmax(np.abs(points - centre) / half, axis=1)
        n = np.zeros_like(points)
        n[np.arange(len(points)), axis] = 1.0
        return n


@dataclass
class SyntheticScene:
    """A static world plus a three-frame camera trajectory."""

    surfaces: list
    cam_rotations: list  # camera-to-world, frames (t-1, t, t+1)
    cam_centers: list
    K_ref: np.ndarray

    def relative_pose(self, index):
        """Pose mapping frame-t camera coordinates into frame ``index``."""
        R = self.cam_rotations[index].T
        return Pose(R, -R @ self.cam_centers[index])

    def render(self, index, K, width, height):
        """Ray cast one frame; returns (rgb H x W x 3, depth H x W, surface id H x W)."""
        ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
        pix = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], 1)
        rays_cam = pix @ np.linalg.inv(K).T  # unit z component
        R = self.cam_rotations[index]
        origin = self.cam_centers[index]
        dirs = rays_cam @ R.T
        hits = np.stack([s.intersect(origin, dirs) for s in self.surfaces], 1)
        ids = np.argmin(hits, axis=1)
        depth = hits[np.arange(len(ids)), ids]
        if not np.all(np.isfinite(depth)):
            raise ValidationError("scene leaves rays without a surface")
        points = origin + dirs * depth[:, None]
        rgb = np.empty((len(ids), 3))
        for i, s in enumerate(self.surfaces):
            sel = ids == i
            if sel.any():
                rgb[sel] = s.texture(points[sel], s.normals(points[sel]), self.K_ref[0, 0])
        depth = np.clip(depth, MIN_SCENE_DEPTH, MAX_SCENE_DEPTH)
        return (rgb.reshape(height, width, 3), depth.reshape(height, width),
                ids.reshape(height, width))


# per-class base colour ranges (low, high); like road, sky and buildings in
# street scenes they make surface type, and so depth, inferable from a single image
PALETTES = {
    "ground": ((0.35, 0.33, 0.30), (0.50, 0.48, 0.45)),
    "far": ((0.45, 0.55, 0.70), (0.60, 0.70, 0.90)),
    "side": ((0.55, 0.30, 0.20), (0.75, 0.45, 0.30)),
    "box": ((0.10, 0.10, 0.10), (0.90, 0.90, 0.90)),
}


def random_scene(rng, K_ref):
    """Sample ground, far wall, optional side walls and boxes, and a trajectory."""
    cam_height = rng.uniform(1.3, 1.7)
    surfaces = [_Plane(np.array([0.0, 1.0, 0.0]), cam_height,
                       _Texture.random(rng, PALETTES["ground"]))]
    wall_depth = rng.uniform(35.0, 60.0)
    n = _rotation(rng.uniform(-0.05, 0.05), rng.uniform(-0.17, 0.17), 0.0) @ np.array([0.0, 0.0, 1.0])
    surfaces.append(_Plane(n, wall_depth * n[2], _Texture.random(rng, PALETTES["far"])))
    for side in (-1.0, 1.0):
        if rng.random() < 0.5:
            yaw = rng.uniform(-0.15, 0.15)
            n = _rotation(0.0, yaw, 0.0) @ np.array([side, 0.0, 0.0])
            surfaces.append(_Plane(n, rng.uniform(3.0, 8.0), _Texture.random(rng, PALETTES["side"])))
    for _ in range(rng.integers(2, 6)):
        size = rng.uniform(0.8, 3.0, 3)
        cx, cz = rng.uniform(-5.0, 5.0), rng.uniform(5.0, 30.0)
        lo = np.array([cx - size[0] / 2, cam_height - size[1], cz - size[2] / 2])
        hi = np.array([cx + size[0] / 2, cam_height + 0.01, cz + size[2] / 2])
        surfaces.append(_Box(lo, hi, _Texture.random(rng, PALETTES["box"])))

    while True:
        velocity = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.01, 0.01),
                             rng.uniform(0.3, 0.8)])
        if np.linalg.norm(velocity) >= MIN_FRAME_TRANSLATION:
            break
    angular = np.array([rng.uniform(-0.005, 0.005), rng.uniform(-0.02, 0.02), 0.0])
    rotations = [_rotation(*(s * angular)) for s in (-1, 0, 1)]
    centers = [s * velocity for s in (-1, 0, 1)]
    return SyntheticScene(surfaces, rotations, centers, K_ref)


def block_mean(image, factor):
    """Average ``factor x factor`` pixel blocks of an H x W (x C) array."""
    h, w = image.shape[:2]
    blocks = image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:])
    return blocks.mean(axis=(1, 3))


def generate_synthetic_scene(seed, n_triplets, lr_size, rr_scale, return_scenes=False):
    """Render ``n_triplets`` deterministic triplets.

    ``lr_size`` is ``(width, height)``; the rich tier is ``rr_scale`` times
    larger per axis.
    """
    lw, lh = lr_size
    if lw < 32 or lh < 32:
        raise ConfigError(f"lr_size must be at least 32 px per axis, got {lr_size}")
    if rr_scale not in (2, 3, 4):
        raise ConfigError(f"rr_scale must be 2, 3 or 4, got {rr_scale}")
    if n_triplets < 1:
        raise ConfigError("n_triplets must be >= 1")
    w, h = lw * rr_scale, lh * rr_scale
    f = FOCAL_RATIO * w
    K_rr = CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    K_lr = K_rr.downscale(rr_scale)
    rng = np.random.default_rng(seed)
    triplets, scenes = [], []
    for i in range(n_triplets):
        scene = random_scene(rng, K_rr.matrix())
        frames, depth = [], None
        for idx in range(3):
            rgb, d, _ = scene.render(idx, K_rr.matrix(), w, h)
            frames.append(rgb)
            if idx == 1:
                depth = d
        frames = np.stack(frames).astype(np.float32)
        triplets.append(ImageTriplet(
            sample_id=i, frames=frames,
            lr_target=block_mean(frames[1], rr_scale).astype(np.float32),
            intrinsics_lr=K_lr, intrinsics_rr=K_rr,
            gt_depth=depth.astype(np.float32),
            gt_poses=(scene.relative_pose(0), scene.relative_pose(2))))
        scenes.append(scene)
    return (triplets, scenes) if return_scenes else triplets


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"DPTH v1 {w} {h}\n".encode("ascii"))
        f.write(np.ascontiguousarray(depth).tobytes())


def read_depth(path):
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("ascii", errors="replace").split()
            payload = f.read()
    except FileNotFoundError as e:
        raise DataIOError(f"missing depth file: {path}") from e
    if len(header) != 4 or header[:2] != ["DPTH", "v1"]:
        raise FormatError(f"bad depth header in {path}")
    w, h = int(header[2]), int(header[3])
    if len(payload) != 4 * w * h:
        raise FormatError(f"truncated depth payload in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def _save_png(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise DataIOError(f"missing image: {path}") from e


def split_counts(n, ref_fraction=0.1, val_fraction=0.1, test_fraction=0.1):
    counts = {"ref": int(round(n * ref_fraction)), "val": int(round(n * val_fraction)),
              "test": int(round(n * test_fraction))}
    counts["train"] = n - sum(counts.values())
    if counts["train"] < 0:
        raise ConfigError("split fractions exceed the number of triplets")
    return counts


def assign_splits(triplets, counts):
    """Deterministically partition triplets: ref, val, test, then train."""
    out, start = {}, 0
    for name in ("ref", "val", "test", "train"):
        out[name] = list(triplets[start:start + counts[name]])
        start += counts[name]
    return out


def write_triplet(directory, t):
    os.makedirs(directory, exist_ok=True)
    for offset, frame in zip((-1, 0, 1), t.frames):
        _save_png(os.path.join(directory, f"frame_{offset}.png"), frame)
    _save_png(os.path.join(directory, "lr.png"), t.lr_target)
    _save_png(os.path.join(directory, "rr.png"), t.rr_target)
    np.savetxt(os.path.join(directory, "intrinsics.txt"), t.intrinsics_rr.matrix().reshape(1, 9),
               fmt="%.10g")
    if t.gt_depth is not None:
        write_depth(os.path.join(directory, "depth.f32"), t.gt_depth)
    if t.gt_poses is not None:
        rows = [np.hstack([p.rotation, p.translation[:, None]]).ravel() for p in t.gt_poses]
        np.savetxt(os.path.join(directory, "poses.txt"), np.stack(rows), fmt="%.12g")


def write_dataset(root, triplets, ref_fraction=0.1, val_fraction=0.1, test_fraction=0.1,
                  counts=None):
    counts = counts or split_counts(len(triplets), ref_fraction, val_fraction, test_fraction)
    for split, items in assign_splits(triplets, counts).items():
        for t in items:
            write_triplet(os.path.join(root, split, f"{t.sample_id:06d}"), t)
    return counts


def read_triplet(directory, sample_id):
    frames = np.stack([_load_png(os.path.join(directory, f"frame_{o}.png")) for o in (-1, 0, 1)])
    lr = _load_png(os.path.join(directory, "lr.png"))
    kpath = os.path.join(directory, "intrinsics.txt")
    if not os.path.exists(kpath):
        raise DataIOError(f"missing intrinsics: {kpath}")
    K = np.loadtxt(kpath).reshape(3, 3)
    h, w = frames.shape[1:3]
    K_rr = CameraIntrinsics.from_matrix(K, w, h)
    depth_path = os.path.join(directory, "depth.f32")
    depth = read_depth(depth_path) if os.path.exists(depth_path) else None
    poses = None
    pose_path = os.path.join(directory, "poses.txt")
    if os.path.exists(pose_path):
        rows = np.loadtxt(pose_path).reshape(2, 3, 4)
        poses = tuple(Pose(r[:, :3], r[:, 3]) for r in rows)
    return ImageTriplet(sample_id=sample_id, frames=frames, lr_target=lr,
                        intrinsics_lr=K_rr.downscale(h // lr.shape[0]), intrinsics_rr=K_rr,
                        gt_depth=depth, gt_poses=poses)


class TripletDataset:
    """Read-only, lazily loaded view of one split on disk."""

    def __init__(self, root, split, ids):
        self.root = root
        self.split = split
        self.ids = list(ids)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        sid = self.ids[index]
        return read_triplet(os.path.join(self.root, self.split, f"{sid:06d}"), sid)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _split_ids(root, split):
    path = os.path.join(root, split)
    if not os.path.isdir(path):
        return None
    return sorted(int(name) for name in os.listdir(path) if name.isdigit())


def load_dataset(root, split):
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    if not os.path.isdir(root):
        raise DataIOError(f"dataset root does not exist: {root}")
    ids = _split_ids(root, split)
    if ids is None:
        raise DataIOError(f"missing split directory: {os.path.join(root, split)}")
    train_ids, ref_ids = _split_ids(root, "train"), _split_ids(root, "ref")
    if train_ids and ref_ids:
        overlap = set(train_ids) & set(ref_ids)
        if overlap:
            raise ValidationError(f"train and ref splits share ids {sorted(overlap)[:5]}")
    return TripletDataset(root, split, ids)


# ---------------------------------------------------------------------------
# pseudo labels
# ---------------------------------------------------------------------------

class PseudoLabelStore(dict):
    """Teacher depth maps at rich resolution keyed by sample id."""

    def __setitem__(self, key, value):
        value = np.asarray(value, dtype=np.float32)
        if not (np.all(np.isfinite(value)) and np.all(value > 0)):
            raise ValidationError(f"pseudo label {key} must be finite and positive")
        super().__setitem__(int(key), value)

    def save(self, root):
        for sid, depth in self.items():
            d = os.path.join(root, "pseudo", f"{sid:06d}")
            os.makedirs(d, exist_ok=True)
            write_depth(os.path.join(d, "depth.f32"), depth)

    @classmethod
    def load(cls, root):
        base = os.path.join(root, "pseudo")
        if not os.path.isdir(base):
            raise DataIOError(f"no pseudo labels under {base}")
        store = cls()
        for name in sorted(os.listdir(base)):
            if name.isdigit():
                store[int(name)] = read_depth(os.path.join(base, name, "depth.f32"))
        return store


def build_pseudo_labels(teacher, dataset, batch_size=8):
    """Run the frozen teacher over ``dataset`` and collect its depth maps."""
    import torch

    from .networks import TeacherNet, load_model

    if not isinstance(teacher, TeacherNet):
        teacher = load_model(teacher)
        if not isinstance(teacher, TeacherNet):
            raise ValidationError("checkpoint does not describe a teacher network")
    if len(dataset) == 0:
        raise ConfigError("cannot build pseudo labels for an empty dataset")
    teacher.eval()
    store = PseudoLabelStore()
    items = list(dataset)
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            depth = teacher.predict_depth(teacher_input(chunk))
            for t, d in zip(chunk, depth):
                store[t.sample_id] = d[0].numpy()
    return store


def teacher_input(triplets):
    """Rich-resource input: frame t and frame t-1 stacked along channels."""
    import torch

    arr = np.stack([np.concatenate([t.frames[1], t.frames[0]], axis=-1) for t in triplets])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float()
