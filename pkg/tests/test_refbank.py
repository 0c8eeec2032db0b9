import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rprdepth.data import ImageTriplet
from rprdepth.errors import ConfigError, FormatError, ValidationError
from rprdepth.networks import StudentNet, TeacherNet
from rprdepth.refbank import (PROVENANCE_DTYPE, ReferenceBank, WeightVector, accumulate_weights,
                              average_over_validation, bank_rows, compress_bank, default_k,
                              load_bank, sample_reference_bank, save_bank, select_top_k)


def random_bank(R, c_t=6, c_s=4, seed=0):
    rng = np.random.default_rng(seed)
    prov = np.zeros(R, dtype=PROVENANCE_DTYPE)
    prov["image_id"] = rng.integers(0, 100, R)
    prov["row"] = rng.integers(0, 8, R)
    prov["col"] = rng.integers(0, 16, R)
    return ReferenceBank(rng.normal(size=(R, c_t)).astype(np.float32),
                         rng.normal(size=(R, c_s)).astype(np.float32),
                         rng.uniform(1, 80, R).astype(np.float32), prov)


def test_full_scale_bank_sizes():
    # 1% of 128,000 feature pixels from each of 2000 reference images
    assert bank_rows(2000, 128_000, 0.01) == 2_560_000
    assert default_k(2_560_000) == 25_600


def test_sample_full_fraction_single_image(tiny_triplets):
    t = tiny_triplets[0]
    # crop to a 64x32 rich frame so the stride-4 teacher yields 16x8 features
    small = ImageTriplet(0, t.frames[:, :32, :64].copy(), t.lr_target[:16, :32].copy(),
                         t.intrinsics_lr, t.intrinsics_rr)
    bank = sample_reference_bank(TeacherNet().freeze(), [small], 1.0, seed=0)
    assert len(bank) == 128
    assert sorted(zip(bank.provenance["row"], bank.provenance["col"])) == \
        [(r, c) for r in range(8) for c in range(16)]


def test_sampling_deterministic(tiny_triplets):
    teacher = TeacherNet().freeze()
    a = sample_reference_bank(teacher, tiny_triplets[:2], 0.1, seed=4)
    b = sample_reference_bank(teacher, tiny_triplets[:2], 0.1, seed=4)
    assert np.array_equal(a.provenance, b.provenance)
    assert np.array_equal(a.features_raw, b.features_raw)
    assert len(a) == 2 * 26  # ceil(0.1 * 256) per image
    assert set(a.provenance["image_id"]) == {t.sample_id for t in tiny_triplets[:2]}
    with pytest.raises(ConfigError):
        sample_reference_bank(teacher, [], 0.1, 0)
    with pytest.raises(ConfigError):
        sample_reference_bank(teacher, tiny_triplets[:1], 0.0, 0)


def test_accumulate_trivial_cases():
    R, M = 5, 3
    uni = torch.full((M, R), 1 / R, dtype=torch.float64)
    assert torch.allclose(accumulate_weights(uni, uni[None]), torch.full((R,), 2 / R, dtype=torch.float64))
    onehot = torch.zeros(M, R, dtype=torch.float64)
    onehot[:, 2] = 1
    w = accumulate_weights(onehot, uni[None])
    expected = torch.full((R,), 1 / R, dtype=torch.float64)
    expected[2] = 1 + 1 / R
    assert torch.allclose(w, expected, atol=1e-12)
    with pytest.raises(ValidationError):
        accumulate_weights(uni, uni[None, :2])
    with pytest.raises(ValidationError):
        accumulate_weights(uni * 2, uni[None])


def _stochastic(rng, *shape):
    x = rng.uniform(size=shape)
    return torch.from_numpy(x / x.sum(-1, keepdims=True))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_accumulate_duplication_and_permutation(seed):
    rng = np.random.default_rng(seed)
    A, W = _stochastic(rng, 4, 6), _stochastic(rng, 3, 4, 6)
    base = accumulate_weights(A, W)
    doubled = accumulate_weights(torch.cat([A, A]), torch.cat([W, W], 1))
    perm = torch.from_numpy(rng.permutation(4))
    permuted = accumulate_weights(A[perm], W[:, perm])
    assert torch.allclose(base, doubled, atol=1e-12)
    assert torch.allclose(base, permuted, atol=1e-12)


def test_average_over_validation(tiny_triplets):
    torch.manual_seed(0)
    model = StudentNet(teacher_channels=6, heads=2)
    bank = random_bank(40)
    raw, _, depths = bank.tensors()
    val = tiny_triplets[:3]
    got = average_over_validation(model, bank, val, batch_size=2)
    assert got.n_samples == 3
    # loop-and-average oracle, one image at a time
    total = np.zeros(40)
    with torch.no_grad():
        for t in val:
            out = model(torch.from_numpy(t.lr_target).permute(2, 0, 1)[None], raw, depths)
            A, W = out["A"][0].double().numpy(), out["attention"][0].double().numpy()
            for r in range(40):
                total[r] += np.mean(A[:, r] + W[:, :, r].mean(0))
    assert np.allclose(got.values, total / 3, atol=1e-6)
    single = average_over_validation(model, bank, val[:1])
    twice = average_over_validation(model, bank, [val[0], val[0]])
    assert np.allclose(single.values, twice.values, atol=1e-12)
    with pytest.raises(ConfigError):
        average_over_validation(model, bank, [])


def test_weight_vector_invariants():
    with pytest.raises(ValidationError):
        WeightVector(np.array([0.1, -0.1]), 1)
    with pytest.raises(ValidationError):
        WeightVector(np.array([0.1]), 0)


def test_select_top_k_cases():
    assert list(select_top_k(np.array([0.1, 0.9, 0.5]), 2)) == [1, 2]
    assert list(select_top_k(np.ones(5), 3)) == [0, 1, 2]
    rng = np.random.default_rng(0)
    w = rng.uniform(size=10_000)
    oracle = sorted(range(10_000), key=lambda i: (-w[i], i))[:100]
    assert list(select_top_k(w, 100)) == oracle
    for k in (0, 10_001):
        with pytest.raises(ValidationError):
            select_top_k(w, k)


@given(arrays(np.float64, st.integers(1, 60), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])),
       st.data())
def test_select_top_k_matches_sort_with_ties(w, data):
    k = data.draw(st.integers(1, len(w)))
    assert list(select_top_k(w, k)) == sorted(range(len(w)), key=lambda i: (-w[i], i))[:k]


def test_compress_bank():
    bank = random_bank(50)
    idx = select_top_k(np.random.default_rng(1).uniform(size=50), 7)
    small = compress_bank(bank, idx)
    assert small.selected and len(small) == 7
    assert np.array_equal(small.provenance, bank.provenance[idx])
    assert np.array_equal(small.depths, bank.depths[idx])
    full = compress_bank(bank, np.arange(50))
    assert np.array_equal(full.features_raw, bank.features_raw) and not bank.selected
    # selecting every row is a permutation of the original rows
    perm = compress_bank(bank, select_top_k(np.random.default_rng(2).uniform(size=50), 50))
    assert sorted(perm.depths.tolist()) == sorted(bank.depths.tolist())
    with pytest.raises(ValidationError):
        compress_bank(bank, [1, 1])


def test_compress_full_scale():
    R = 2_560_000
    prov = np.zeros(R, dtype=PROVENANCE_DTYPE)
    prov["image_id"] = np.arange(R) // 1280
    bank = ReferenceBank(np.zeros((R, 1), np.float32), np.zeros((R, 1), np.float32),
                         np.ones(R, np.float32), prov)
    w = np.random.default_rng(0).uniform(size=R)
    small = compress_bank(bank, select_top_k(w, 25_000))
    assert len(small) == 25_000


def test_bank_file_round_trip(tmp_path):
    bank = compress_bank(random_bank(30), np.arange(0, 30, 3))
    path = str(tmp_path / "b.rprb")
    save_bank(bank, path)
    back = load_bank(path)
    assert back.selected
    for name in ("features_raw", "features_matched", "depths", "provenance"):
        assert getattr(back, name).tobytes() == getattr(bank, name).tobytes()
    size = os.path.getsize(path)
    assert size == 21 + 10 * (6 * 4 + 4 * 4 + 4 + 8)


def test_bank_file_errors(tmp_path):
    path = str(tmp_path / "b.rprb")
    save_bank(random_bank(5), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-3])
    with pytest.raises(FormatError):
        load_bank(path)
    open(path, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_bank(path)
    open(path, "wb").write(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(FormatError):
        load_bank(path)
    with pytest.raises(ValidationError):
        random_bank(0)
