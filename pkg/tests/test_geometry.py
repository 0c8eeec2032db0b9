import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rprdepth.data import generate_synthetic_scene
from rprdepth.errors import ConfigError, NumericError, ValidationError
from rprdepth.geometry import (Pose, axis_angle_to_matrix, backproject, depth_to_disp,
                               disp_to_depth, project, psnr, warp)

K = torch.tensor([[50.0, 0.0, 15.5], [0.0, 48.0, 11.5], [0.0, 0.0, 1.0]], dtype=torch.float64)


def test_disp_to_depth_midpoint():
    # 1 / (0.01 + 9.99 * 0.5), exact rational evaluation
    assert disp_to_depth(torch.tensor(0.5, dtype=torch.float64)).item() == pytest.approx(
        0.1998001998001998, abs=1e-12)


def test_disp_to_depth_limits():
    d = disp_to_depth(torch.tensor([1 - 1e-9, 1e-9], dtype=torch.float64))
    assert 0.1 < d[0] < 0.1 + 1e-6
    assert 100 - 1e-3 < d[1] < 100


def test_disp_to_depth_errors():
    with pytest.raises(NumericError):
        disp_to_depth(torch.tensor([float("nan")]))
    with pytest.raises(ConfigError):
        disp_to_depth(torch.tensor([0.5]), 1.0, 0.5)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_disp_to_depth_strictly_monotone(a, b):
    if abs(a - b) < 1e-9:
        return
    da, db = disp_to_depth(np.float64(a)), disp_to_depth(np.float64(b))
    assert (da > db) == (a < b)


@given(st.floats(0.11, 99.0))
def test_depth_disp_inverse(d):
    assert disp_to_depth(depth_to_disp(np.float64(d))) == pytest.approx(d, rel=1e-10)


def test_backproject_principal_point_and_unit_tangent():
    depth = torch.full((1, 1, 24, 32), 7.0, dtype=torch.float64)
    Kc = torch.tensor([[10.0, 0, 5], [0, 10.0, 6], [0, 0, 1]], dtype=torch.float64)
    pts = backproject(depth, Kc)[0]
    assert torch.allclose(pts[:, 6, 5], torch.tensor([0, 0, 7.0], dtype=torch.float64))
    assert torch.allclose(pts[:, 6, 15], torch.tensor([7.0, 0, 7.0], dtype=torch.float64))


def test_backproject_matches_linear_solve():
    rng = np.random.default_rng(0)
    depth = torch.from_numpy(rng.uniform(1, 50, (1, 1, 24, 32)))
    pts = backproject(depth, K)[0].numpy()
    Kn = K.numpy()
    for _ in range(20):
        v, u = rng.integers(24), rng.integers(32)
        ref = np.linalg.solve(Kn, np.array([u, v, 1.0])) * depth[0, 0, v, u].item()
        assert np.allclose(pts[:, v, u], ref, atol=1e-12)


def test_identity_round_trip_grid():
    depth = torch.rand(2, 1, 24, 32, dtype=torch.float64) * 40 + 1
    pix, valid = project(backproject(depth, K), K)
    ys, xs = torch.meshgrid(torch.arange(24.0), torch.arange(32.0), indexing="ij")
    assert valid.all()
    assert (pix[..., 0] - xs.double()).abs().max() < 1e-4
    assert (pix[..., 1] - ys.double()).abs().max() < 1e-4


def test_z_translation_doubles_displacement():
    # a point at depth 4 whose camera moves 2 m forward sits at depth 2
    depth = torch.full((1, 1, 24, 32), 4.0, dtype=torch.float64)
    pix, _ = project(backproject(depth, K), K, torch.eye(3, dtype=torch.float64),
                     torch.tensor([0.0, 0.0, -2.0], dtype=torch.float64))
    u, v = 25, 3
    before = np.array([u - 15.5, v - 11.5])
    after = pix[0, v, u].numpy() - np.array([15.5, 11.5])
    assert np.allclose(after, 2 * before, atol=1e-9)


def test_points_behind_camera_invalid():
    depth = torch.full((1, 1, 4, 4), 1.0, dtype=torch.float64)
    _, valid = project(backproject(depth, K), K, torch.eye(3, dtype=torch.float64),
                       torch.tensor([0.0, 0.0, -1.5], dtype=torch.float64))
    assert not valid.any()


def test_warp_identity_reproduces_source():
    src = torch.rand(1, 3, 24, 32, dtype=torch.float64)
    depth = torch.rand(1, 1, 24, 32, dtype=torch.float64) * 10 + 1
    out, mask = warp(src, depth, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), K)
    assert mask.all()
    assert psnr(out, src, mask) > 40


def test_warp_all_invalid_depth():
    src = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    depth = torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64)
    _, mask = warp(src, depth, torch.eye(3, dtype=torch.float64),
                   torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64), K)
    assert not mask.any()


def test_warp_resolution_mismatch():
    with pytest.raises(ValidationError):
        warp(torch.rand(1, 3, 8, 8), torch.rand(1, 1, 4, 4) + 1, torch.eye(3), torch.zeros(3), K.float())


def test_warp_gt_cross_check():
    t = generate_synthetic_scene(0, 2, (64, 32), 2)
    for trip in t:
        frames = torch.from_numpy(trip.frames).permute(0, 3, 1, 2).double()
        depth = torch.from_numpy(trip.gt_depth).double()[None, None]
        Kr = torch.from_numpy(trip.intrinsics_rr.matrix())
        for src, pose in ((frames[0:1], trip.gt_poses[0]), (frames[2:3], trip.gt_poses[1])):
            out, mask = warp(src, depth, torch.from_numpy(pose.rotation),
                             torch.from_numpy(pose.translation), Kr)
            assert psnr(out, frames[1:2], mask) > 30


def test_warp_depth_gradient_finite_differences():
    rng = np.random.default_rng(1)
    src = torch.from_numpy(rng.uniform(0, 1, (1, 3, 8, 8)))
    depth = torch.from_numpy(rng.uniform(4, 8, (1, 1, 8, 8))).requires_grad_(True)
    R = axis_angle_to_matrix(torch.tensor([[0.01, -0.02, 0.005]], dtype=torch.float64))
    t = torch.tensor([[0.1, 0.05, -0.2]], dtype=torch.float64)
    weights = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))

    def f(d):
        out, _ = warp(src, d, R, t, K)
        return (out * weights).sum()

    f(depth).backward()
    h = 1e-3
    checked = 0
    for idx in rng.permutation(64):
        v, u = divmod(int(idx), 8)
        plus, minus = depth.detach().clone(), depth.detach().clone()
        plus[0, 0, v, u] += h
        minus[0, 0, v, u] -= h
        fd = (f(plus) - f(minus)).item() / (2 * h)
        an = depth.grad[0, 0, v, u].item()
        if abs(fd) < 1e-6:
            continue
        assert abs(an - fd) / abs(fd) < 1e-3
        checked += 1
    assert checked > 20


@settings(max_examples=50)
@given(st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_axis_angle_is_rotation(v):
    R = axis_angle_to_matrix(torch.tensor([v], dtype=torch.float64))[0].numpy()
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


def test_pose_validation_and_inverse():
    with pytest.raises(ValidationError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    R = axis_angle_to_matrix(torch.tensor([[0.1, 0.2, -0.3]], dtype=torch.float64))[0].numpy()
    p = Pose(R, np.array([1.0, 2.0, 3.0]))
    assert np.allclose(p.compose(p.inverse()).matrix(), np.eye(4), atol=1e-12)
