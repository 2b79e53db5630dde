import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svqlab.data import (
    Dataset, NoiseSpec, SyntheticSpec, diffuse, generate, inject_noise, load_dataset, make_splits,
    persistence_forecast, read_manifest, save_dataset, simulate_raw,
)
from svqlab.errors import DataError, FormatError, ParameterError, ShapeError
from svqlab.metrics import index_perplexity, mae, mse, perplexity_from_counts, psnr, ssim
from svqlab.tensor import make_rng
from svqlab.tensorfile import decode_tensors, encode_tensors, load_tensors, save_tensors

TINY = SyntheticSpec(height=12, width=12, frames=3, count=8)


class TestGenerate:
    def test_frozen_dynamics(self):
        raw = simulate_raw(replace(TINY, velocity_scale=0.0, diffusion=0.0))
        for t in range(1, raw.shape[1]):
            np.testing.assert_array_equal(raw[:, t], raw[:, 0])

    def test_diffusion_conserves_sum(self, rng):
        u = rng.random((3, 10, 10))
        for _ in range(20):
            nxt = diffuse(u, 0.2)
            np.testing.assert_allclose(nxt.sum(axis=(1, 2)), u.sum(axis=(1, 2)), atol=1e-6)
            u = nxt

    def test_diffusion_only_dataset_conserves(self):
        raw = simulate_raw(replace(TINY, velocity_scale=0.0, diffusion=0.2))
        sums = raw.sum(axis=(2, 3))
        np.testing.assert_allclose(sums, np.repeat(sums[:, :1], sums.shape[1], axis=1), atol=1e-6 * raw.shape[1])

    @pytest.mark.parametrize("kind", ["advection_diffusion", "moving_blobs"])
    def test_deterministic_and_normalized(self, kind):
        a = generate(replace(TINY, kind=kind))
        b = generate(replace(TINY, kind=kind))
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.targets.tobytes() == b.targets.tobytes()
        both = np.concatenate([a.inputs, a.targets])
        assert both.min() == 0.0 and both.max() == 1.0
        assert a.inputs.shape == (8, 3, 1, 12, 12)

    def test_seed_changes_data(self):
        assert generate(TINY).inputs.tobytes() != generate(replace(TINY, seed=1)).inputs.tobytes()

    def test_unstable_diffusion(self):
        with pytest.raises(ParameterError, match="0.25"):
            simulate_raw(replace(TINY, diffusion=1.0, substeps=2))

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            generate(replace(TINY, kind="ocean"))

    def test_splits(self):
        train, test = make_splits(TINY, 5, 3)
        assert (len(train), len(test)) == (5, 3)

    def test_persistence(self):
        x = np.arange(6.0).reshape(1, 3, 1, 1, 2)
        out = persistence_forecast(x)
        np.testing.assert_array_equal(out[0, :, 0, 0], [[4, 5], [4, 5], [4, 5]])


class TestNoise:
    def data(self, n=10**6):
        rng = make_rng(5)
        x = rng.random((n // 100, 1, 1, 10, 10))
        return Dataset(x, x.copy())

    def test_zero_eta_identity(self):
        d = self.data(10**4)
        out = inject_noise(d, NoiseSpec(0.0))
        assert out.inputs.tobytes() == d.inputs.tobytes()

    def test_gaussian_moment(self):
        d = self.data()
        out = inject_noise(d, NoiseSpec(0.5, "gaussian", seed=1))
        sigma = d.inputs.std()
        assert abs((out.inputs - d.inputs).std() / (0.5 * sigma) - 1) < 0.02
        assert out.targets.tobytes() == d.targets.tobytes()

    def test_pixel_replace_all(self):
        d = self.data(10**5)
        out = inject_noise(d, NoiseSpec(1.0, "pixel_replace"))
        assert np.mean(out.inputs == d.inputs) == 0.0

    def test_reproducible(self):
        d = self.data(10**4)
        a = inject_noise(d, NoiseSpec(0.1, seed=3))
        b = inject_noise(d, NoiseSpec(0.1, seed=3))
        assert a.inputs.tobytes() == b.inputs.tobytes()

    def test_negative_eta(self):
        with pytest.raises(ParameterError):
            NoiseSpec(-0.1)


def naive_ssim(x, y, data_range=1.0):
    r = np.arange(11) - 5.0
    g1 = np.exp(-r ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a = x[i:i + 11, j:j + 11]
            b = y[i:i + 11, j:j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestMetrics:
    def test_mse_mae_examples(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert mse([3.0, -3.0], [0.0, 0.0]) == 9.0
        assert mae([3.0, -3.0], [0.0, 0.0]) == 3.0

    def test_loop_oracle(self, rng):
        a, b = rng.random(37), rng.random(37)
        sq = ab = 0.0
        for u, v in zip(a, b):
            sq += (u - v) ** 2
            ab += abs(u - v)
        assert mse(a, b) == pytest.approx(sq / 37, rel=1e-12)
        assert mae(a, b) == pytest.approx(ab / 37, rel=1e-12)
        assert mse(a, b) == mse(b, a) and mae(a, b) == mae(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.ones(2), np.ones(3))

    def test_psnr(self):
        target = np.zeros(100)
        pred = np.full(100, 0.1)
        assert psnr(pred, target) == pytest.approx(20.0)
        assert psnr(target, target) == math.inf
        assert psnr(pred, target, 2.0) - psnr(pred, target, 1.0) == pytest.approx(6.0206, abs=1e-4)
        with pytest.raises(ParameterError):
            psnr(pred, target, 0.0)

    def test_ssim_identical(self, rng):
        x = rng.random((2, 16, 16))
        assert ssim(x, x) == 1.0

    def test_ssim_inverted_binary(self, rng):
        x = (rng.random((16, 16)) > 0.5).astype(float)
        assert ssim(1 - x, x) < 0

    def test_ssim_naive_reference(self, rng):
        x, y = rng.random((16, 16)), rng.random((16, 16))
        assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-9

    def test_ssim_small_frame(self):
        with pytest.raises(ParameterError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_index_perplexity(self):
        assert index_perplexity([0, 1, 2, 3], 4) == 4.0
        assert index_perplexity([5, 5, 5], 8) == 1.0
        assert index_perplexity([0, 0, 1, 1], 1024) == pytest.approx(2.0)
        with pytest.raises(DataError):
            index_perplexity([0, 4], 4)

    @settings(max_examples=50, deadline=None)
    @given(counts=st.lists(st.integers(0, 50), min_size=1, max_size=20))
    def test_perplexity_bounded_by_used_codes(self, counts):
        used = sum(c > 0 for c in counts)
        value = perplexity_from_counts(counts)
        assert 1.0 - 1e-12 <= value <= max(used, 1) + 1e-9


class TestTensorFile:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
                   "scalar": np.array(2.5), "empty": np.zeros((0, 3))}
        path = save_tensors(tmp_path / "t.svqt", tensors)
        back = load_tensors(path)
        assert list(back) == list(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()

    def test_layout(self):
        buf = encode_tensors({"x": np.array([1.0], dtype=np.float32)})
        assert buf[:4] == b"SVQT"
        assert struct.unpack("<II", buf[4:12]) == (1, 1)
        assert struct.unpack("<H", buf[12:14]) == (1,)
        assert buf[14:15] == b"x"
        assert struct.unpack("<BI", buf[15:20]) == (0, 1)
        assert struct.unpack("<Q", buf[20:28]) == (1,)
        assert struct.unpack("<f", buf[28:32]) == (1.0,)

    def test_empty_list(self):
        buf = encode_tensors({})
        assert buf == b"SVQT" + struct.pack("<II", 1, 0)
        assert decode_tensors(buf) == {}

    def test_every_truncation_fails(self, rng):
        buf = encode_tensors({"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(2)})
        for cut in range(len(buf)):
            with pytest.raises(FormatError):
                decode_tensors(buf[:cut])

    def test_bad_magic_and_version(self):
        buf = encode_tensors({})
        with pytest.raises(FormatError) as e:
            decode_tensors(b"XXXX" + buf[4:])
        assert e.value.offset == 0
        with pytest.raises(FormatError, match="version"):
            decode_tensors(buf[:4] + struct.pack("<II", 2, 0))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_random_round_trips(self, seed):
        rng = make_rng(seed)
        tensors = {}
        for i in range(int(rng.integers(0, 4))):
            shape = tuple(int(v) for v in rng.integers(0, 4, size=int(rng.integers(0, 4))))
            dtype = np.float32 if rng.integers(2) else np.float64
            tensors[f"t{i}"] = rng.standard_normal(shape).astype(dtype)
        back = decode_tensors(encode_tensors(tensors))
        for k, v in tensors.items():
            assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


class TestDatasetFiles:
    def test_save_load(self, tmp_path):
        d = generate(TINY)
        save_dataset(tmp_path, "train", d)
        back = load_dataset(tmp_path, "train")
        assert back.inputs.tobytes() == d.inputs.tobytes()
        manifest = read_manifest(tmp_path / "train.manifest")
        assert manifest["count"] == "8" and manifest["spec_hash"] == TINY.digest()
        assert set(manifest) == {"kind", "H", "W", "T", "count", "seed", "spec_hash"}
