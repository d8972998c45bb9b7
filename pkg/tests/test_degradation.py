import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mdrn.data import (
    ARCHIVE_MAGIC,
    CorpusManifest,
    load_patch_archive,
    quantize,
    read_image,
    save_patch_archive,
    to_gray,
    write_image,
)
from mdrn.degradation import (
    DIHEDRAL,
    NoiseSpec,
    PatchSampler,
    add_awgn,
    bicubic_resize,
    bicubic_roundtrip,
    cubic,
    degradation_roundtrip_report,
    dihedral,
    dihedral_inverse,
    sample_patches,
)
from mdrn.errors import DataError


def lag1_autocorr(v: np.ndarray) -> float:
    v = v - v.mean()
    return float((v[:-1] * v[1:]).mean() / v.var())


@pytest.mark.parametrize("sigma", [15, 25, 50, 70])
def test_awgn_statistics(sigma):
    x = torch.zeros(1000, 1000, dtype=torch.float64)
    noise = add_awgn(x, NoiseSpec(sigma), np.random.default_rng(sigma)).numpy().ravel()
    assert abs(noise.mean()) < 1e-3
    assert noise.std() == pytest.approx(sigma / 255, rel=0.01)
    assert abs(lag1_autocorr(noise)) < 0.01


def test_awgn_is_unclipped_and_additive():
    x = torch.full((64, 64), 0.99, dtype=torch.float64)
    y = add_awgn(x, NoiseSpec(50), np.random.default_rng(0))
    assert y.max() > 1.0
    assert add_awgn(x, NoiseSpec(0)).equal(x)


def test_awgn_determinism():
    x = torch.rand(3, 16, 16)
    a = add_awgn(x, NoiseSpec(25, seed=7))
    b = add_awgn(x, NoiseSpec(25, seed=7))
    c = add_awgn(x, NoiseSpec(25, seed=8))
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert torch.equal(add_awgn(x, NoiseSpec(25), np.random.default_rng(3)),
                       add_awgn(x, NoiseSpec(25), np.random.default_rng(3)))


def test_noise_spec_rejects_negative():
    with pytest.raises(ValueError):
        NoiseSpec(-1)
    assert NoiseSpec(25.5).std == pytest.approx(0.1)


def test_dihedral_group_roundtrips_and_distinct():
    x = torch.arange(12.0).view(1, 3, 4)
    images = set()
    for k in DIHEDRAL:
        y = dihedral(x, k)
        assert torch.equal(dihedral_inverse(y, k), x)
        images.add(tuple(y.flatten().tolist()) + tuple(y.shape))
    assert len(images) == 8


def test_dihedral_square_elements():
    x = torch.arange(9.0).view(3, 3)
    assert torch.equal(dihedral(x, 0), x)
    assert torch.equal(dihedral(x, 4), torch.flip(x, [-1]))
    assert torch.equal(dihedral(dihedral(x, 1), 3), x)


@pytest.fixture
def corpus(data_dir):
    return CorpusManifest.from_directory(data_dir / "corpus")


def test_sample_patches_shapes_and_noise(corpus):
    batch = sample_patches(corpus, 6, 32, NoiseSpec(25), rng=np.random.default_rng(0))
    assert batch.clean.shape == batch.noisy.shape == (6, 1, 32, 32)
    assert batch.clean.dtype == torch.float32
    assert 0 <= batch.clean.min() and batch.clean.max() <= 1
    assert batch.noise.std().item() == pytest.approx(25 / 255, rel=0.05)


def test_sample_patches_are_crops_of_corpus(corpus):
    batch = sample_patches(corpus, 4, 24, NoiseSpec(25), augment=False, rng=np.random.default_rng(2))
    imgs = [torch.from_numpy(v) for v in corpus.images.values()]
    for crop in batch.clean:
        found = False
        for img in imgs:
            windows = img.unfold(1, 24, 1).unfold(2, 24, 1)  # (1, nh, nw, 24, 24)
            if (windows == crop[0]).all(-1).all(-1).any():
                found = True
                break
        assert found


def test_sampler_determinism(corpus):
    s = PatchSampler(corpus, batch=3, patch_size=16)
    a = s(0, 0, np.random.default_rng([0, 0]))
    b = s(0, 0, np.random.default_rng([0, 0]))
    c = s(0, 0, np.random.default_rng([0, 1]))
    assert torch.equal(a.noisy, b.noisy) and not torch.equal(a.noisy, c.noisy)


def test_sampler_rejects_oversized_patch_and_empty_manifest(corpus):
    with pytest.raises(DataError):
        sample_patches(corpus, 1, 200, NoiseSpec(25))
    with pytest.raises(DataError):
        sample_patches(CorpusManifest(corpus.root, []), 1, 8, NoiseSpec(25))


def bicubic_oracle(row, n_out, scale):
    """Scalar-loop separable bicubic with clamped borders and normalized weights."""
    n_in = len(row)
    stretch = min(scale, 1.0)
    out = []
    for o in range(n_out):
        c = (o + 0.5) / scale - 0.5
        lo, hi = math.floor(c - 2 / stretch) - 1, math.ceil(c + 2 / stretch) + 1
        acc = tot = 0.0
        for k in range(lo, hi + 1):
            t = abs(c - k) * stretch
            if t <= 1:
                wt = 1.5 * t**3 - 2.5 * t**2 + 1
            elif t < 2:
                wt = -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
            else:
                wt = 0.0
            acc += wt * row[min(max(k, 0), n_in - 1)]
            tot += wt
        out.append(acc / tot)
    return out


@pytest.mark.parametrize("scale,n_out", [(2.0, 20), (0.5, 5), (1 / 3, 4), (0.25, 3), (3.0, 30)])
def test_bicubic_matches_scalar_oracle(scale, n_out):
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((1, 10))).double()
    y = bicubic_resize(x, scale, size=(1, n_out))
    expected = bicubic_oracle(x[0].tolist(), n_out, scale)
    assert y[0].tolist() == pytest.approx(expected, abs=1e-12)


def test_cubic_kernel_values():
    assert cubic(np.array([0.0, 1.0, 2.0, 3.0])).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert cubic(np.array([0.5]))[0] == pytest.approx(0.5625)
    assert cubic(np.array([1.5]))[0] == pytest.approx(-0.0625)


@given(st.floats(0.0, 1.0), st.sampled_from([2, 3, 4]), st.integers(5, 20))
@settings(max_examples=25, deadline=None)
def test_bicubic_preserves_constants(v, s, n):
    x = torch.full((1, n * s, n * s + 1), v, dtype=torch.float64)
    assert torch.allclose(bicubic_roundtrip(x, s), x, atol=1e-12)
    assert torch.allclose(bicubic_resize(x, s), torch.full((1, n * s * s, (n * s + 1) * s), v, dtype=torch.float64), atol=1e-12)


def test_bicubic_identity_and_linear_interior():
    x = torch.rand(1, 12, 12)
    assert torch.equal(bicubic_resize(x, 1), x)
    ramp = torch.arange(16, dtype=torch.float64)[None, :].repeat(4, 1)
    up = bicubic_resize(ramp, 2)
    # cubic convolution reproduces linear functions away from the border
    centers = (torch.arange(32, dtype=torch.float64) + 0.5) / 2 - 0.5
    torch.testing.assert_close(up[0, 4:-4], centers[4:-4], atol=1e-12, rtol=0)


def test_bicubic_shapes_and_errors():
    x = torch.rand(2, 1, 30, 45)
    assert bicubic_resize(x, 0.5).shape == (2, 1, 15, 23)
    assert bicubic_roundtrip(x, 3).shape == x.shape
    with pytest.raises(ValueError):
        bicubic_resize(x, 0)
    with pytest.raises(ValueError):
        bicubic_resize(torch.rand(1, 2, 2), 0.1)


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_roundtrip_reduces_noise_variance(scale):
    rng = np.random.default_rng(scale)
    noise = torch.from_numpy(rng.standard_normal((96, 96)))
    ratio = bicubic_roundtrip(noise, scale).std() / noise.std()
    assert ratio < 0.75


def test_roundtrip_report(data_dir):
    clean = torch.from_numpy(read_image(data_dir / "natural.png")).double()
    rows = degradation_roundtrip_report(clean, NoiseSpec(50), rng=np.random.default_rng(0))
    assert [r.scale for r in rows] == [2, 3, 4]
    assert len({r.psnr_noisy for r in rows}) == 1
    assert rows[0].psnr_roundtrip > rows[0].psnr_noisy
    with pytest.raises(ValueError):
        degradation_roundtrip_report(clean, NoiseSpec(50), scales=(1,))


def test_to_gray_rounding():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30], [255, 255, 255]]], dtype=np.uint8)
    # 0.299*255 = 76.245, 0.587*255 = 149.685, 0.114*255 = 29.07, 0.299*10+0.587*20+0.114*30 = 18.15
    assert to_gray(px).tolist() == [[76, 150, 29, 18, 255]]


def test_read_write_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    q = rng.integers(0, 256, (3, 7, 9)).astype(np.uint8)
    write_image(tmp_path / "a.png", q / 255.0)
    back = read_image(tmp_path / "a.png", "rgb")
    assert back.shape == (3, 7, 9) and np.array_equal(quantize(back), q)
    gray = read_image(tmp_path / "a.png")
    assert gray.shape == (1, 7, 9)


def test_quantize_clips_and_rounds():
    assert quantize([-0.1, 0.0, 0.5 / 255, 1.4 / 255, 1.2]).tolist() == [0, 0, 1, 1, 255]


def test_read_image_corrupt(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_image(p)


def test_manifest_directory_and_json(tmp_path, data_dir):
    m = CorpusManifest.from_directory(data_dir / "corpus")
    assert len(m.ids) == 20 and m.ids == sorted(m.ids)
    m.save(tmp_path / "m.json")
    back = CorpusManifest.load(tmp_path / "m.json")
    assert back.ids == m.ids and back.root == m.root
    (tmp_path / "list.txt").write_text("# comment\nx.png\n\ny.png\n")
    assert CorpusManifest.load(tmp_path / "list.txt").ids == ["x.png", "y.png"]
    with pytest.raises(DataError):
        CorpusManifest.from_directory(tmp_path / "missing")


def test_manifest_drops_undecodable(tmp_path, data_dir):
    Image.fromarray(np.zeros((20, 20), np.uint8)).save(tmp_path / "ok.png")
    (tmp_path / "broken.png").write_bytes(b"garbage")
    m = CorpusManifest.from_directory(tmp_path)
    assert list(m.images) == ["ok.png"]


@pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.float64])
def test_patch_archive_roundtrip(tmp_path, dtype):
    a = (np.random.default_rng(0).random((5, 1, 8, 8)) * 200).astype(dtype)
    save_patch_archive(tmp_path / "p.bin", a)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw.startswith(ARCHIVE_MAGIC)
    b = load_patch_archive(tmp_path / "p.bin")
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_patch_archive_rejects_truncated(tmp_path):
    save_patch_archive(tmp_path / "p.bin", np.zeros((4, 4), np.float32))
    (tmp_path / "t.bin").write_bytes((tmp_path / "p.bin").read_bytes()[:-3])
    with pytest.raises(DataError):
        load_patch_archive(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_patch_archive(tmp_path / "x.bin")
