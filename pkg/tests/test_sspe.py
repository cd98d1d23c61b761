import numpy as np
import pytest
from scipy import ndimage

from splab import sspe
from splab.numcore import Tensor, grad_check
from splab.numcore import ops


def dft_oracle(p):
    """Literal O(N^4) DFT sum, then shift the zero frequency to (H//2, W//2)."""
    h, w = p.shape
    out = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            acc = 0j
            for x in range(h):
                for y in range(w):
                    acc += p[x, y] * np.exp(-2j * np.pi * (u * x / h + v * y / w))
            out[(u + h // 2) % h, (v + w // 2) % w] = abs(acc)
    return out


def binning_oracle(m, bins):
    h, w = m.shape
    cy, cx = h // 2, w // 2
    radii = {(i, j): np.hypot(i - cy, j - cx) for i in range(h) for j in range(w)}
    rmax = max(radii.values())
    buckets = [[] for _ in range(bins)]
    for (i, j), r in radii.items():
        t = r / rmax
        b = bins - 1 if t >= 1.0 else int(np.floor(t * bins))
        buckets[b].append(m[i, j])
    f = np.array([np.mean(b) if b else 0.0 for b in buckets])
    n = np.sqrt(sum(v * v for v in f))
    return f / n if n > 0 else f


def spectrum(p, bins=32):
    return sspe.radial_bin(sspe.dft2_magnitude(p), bins)


def test_dft_constant_patch_is_dc_only():
    m = sspe.dft2_magnitude(np.ones((8, 8)))
    assert m[4, 4] == pytest.approx(64.0, abs=1e-9)
    m[4, 4] = 0.0
    assert np.abs(m).max() <= 1e-9


@pytest.mark.parametrize("shape", [(4, 4), (5, 7), (8, 8), (6, 4)])
def test_dft_matches_brute_force(shape):
    rng = np.random.default_rng(sum(shape))
    p = rng.uniform(size=shape)
    np.testing.assert_allclose(sspe.dft2_magnitude(p), dft_oracle(p), atol=1e-9, rtol=0)


def test_dft_pure_tone():
    y = np.arange(16)
    p = np.tile(np.cos(2 * np.pi * y / 16), (16, 1))
    m = sspe.dft2_magnitude(p)
    hot = np.argwhere(m > 1e-9)
    assert sorted(map(tuple, hot)) == [(8, 7), (8, 9)]


def test_dft_rejects_empty():
    with pytest.raises(ValueError):
        sspe.dft2_magnitude(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        sspe.dft2_magnitude(np.zeros((1, 5)))


@pytest.mark.parametrize("bins", [1, 3, 8, 256])
def test_constant_patch_spectrum_one_hot(bins):
    f = spectrum(np.ones((8, 8)), bins)
    assert f[0] == pytest.approx(1.0, abs=1e-12)
    assert np.abs(f[1:]).max(initial=0.0) <= 1e-9


def test_radial_bin_matches_loop_oracle():
    rng = np.random.default_rng(5)
    m = rng.uniform(size=(16, 16))
    np.testing.assert_allclose(sspe.radial_bin(m, 8), binning_oracle(m, 8), atol=1e-9, rtol=0)
    m = rng.uniform(size=(9, 12))
    np.testing.assert_allclose(sspe.radial_bin(m, 5), binning_oracle(m, 5), atol=1e-9, rtol=0)


def test_radial_bin_rejects_zero_bins():
    with pytest.raises(ValueError):
        sspe.radial_bin(np.ones((4, 4)), 0)


def test_default_bin_count():
    assert sspe.DEFAULT_BINS == 256
    f = sspe.radial_spectrum(np.random.default_rng(0).uniform(size=(32, 32)), (3, 4, 20, 30))
    assert f.shape == (256,)


def test_empty_bins_read_zero_and_norm_is_one():
    rng = np.random.default_rng(1)
    f = sspe.radial_bin(sspe.dft2_magnitude(rng.uniform(size=(6, 6))), 256)
    assert (f >= 0).all() and abs(np.linalg.norm(f) - 1) <= 1e-9
    assert (f == 0).sum() > 200


def test_zero_patch_spectrum_is_zero():
    assert not spectrum(np.zeros((8, 8))).any()


@pytest.mark.parametrize("seed", range(25))
def test_rotation_flip_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    p = rng.uniform(size=(n, n))
    ref = spectrum(p, 16)
    for k in (1, 2, 3):
        np.testing.assert_allclose(spectrum(np.rot90(p, k), 16), ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(spectrum(p[::-1], 16), ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(spectrum(p[:, ::-1], 16), ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(spectrum(p * rng.uniform(0.1, 10.0), 16), ref, atol=1e-9, rtol=0)
    assert (ref >= 0).all() and abs(np.linalg.norm(ref) - 1.0) <= 1e-9


def test_flip_invariance_rectangular():
    p = np.random.default_rng(3).uniform(size=(7, 12))
    np.testing.assert_allclose(spectrum(p[::-1, ::-1]), spectrum(p), atol=1e-9, rtol=0)


def band_limited_texture(rng, n=96):
    y, x = np.mgrid[0:n, 0:n] / n
    img = np.full((n, n), 0.5)
    for _ in range(4):
        f = rng.uniform(2, 8)
        th = rng.uniform(0, np.pi)
        img += 0.1 * np.cos(2 * np.pi * f * (x * np.cos(th) + y * np.sin(th)) + rng.uniform(0, 2 * np.pi))
    return img


def rotated_central_crop(img, angle, side):
    rot = ndimage.rotate(img, angle, reshape=False, order=3, mode="reflect")
    c = img.shape[0] // 2
    s = side // 2
    return rot[c - s:c + s, c - s:c + s]


def test_arbitrary_rotation_spectral_cosine():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        img = band_limited_texture(rng)
        angle = rng.uniform(0, 360)
        a = sspe.radial_bin(sspe.dft2_magnitude(rotated_central_crop(img, 0.0, 64)), 256)
        b = sspe.radial_bin(sspe.dft2_magnitude(rotated_central_crop(img, angle, 64)), 256)
        assert float(a @ b) >= 0.95


def test_crop_resize_identity_box():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    np.testing.assert_allclose(sspe.crop_resize(img, (0, 0, 16, 16), 16), img, atol=1e-12)


def test_grayscale_luma():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 1] = 1.0
    np.testing.assert_allclose(sspe.to_grayscale(rgb), 0.587)


def test_roi_token_mask_any_overlap():
    m = np.zeros((16, 16), bool)
    m[7, 8] = True
    tm = sspe.roi_token_mask(m, 8)
    assert tm.tolist() == [False, True, False, False]


# -- encoders ----------------------------------------------------------------

def test_spectral_encoder_zero_weights():
    enc = sspe.RadialFrequencyEncoder(8, 4, np.random.default_rng(0))
    for p in enc.parameters():
        p.data[...] = 0.0
    out = enc(Tensor(np.random.default_rng(1).uniform(size=8)))
    assert not out.data.any()


def test_spectral_encoder_identity_configuration():
    enc = sspe.RadialFrequencyEncoder(6, 6, np.random.default_rng(0), activation="linear")
    for layer in enc.mlp.layers:
        layer.weight.data = np.eye(6)
        layer.bias.data[...] = 0.0
    h = sspe.radial_bin(np.random.default_rng(2).uniform(size=(8, 8)), 6)
    np.testing.assert_array_equal(enc(Tensor(h)).data, h)


def test_spectral_encoder_rejects_wrong_length():
    enc = sspe.RadialFrequencyEncoder(8, 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="bins"):
        enc(Tensor(np.ones(7)))


def test_spectral_encoder_grad_check():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        enc = sspe.RadialFrequencyEncoder(16, 6, rng)
        h = Tensor(rng.uniform(size=(3, 16)))
        r = rng.normal(size=(3, 6))
        assert grad_check(lambda x, *ps: (enc(x) * r).sum(), [h, *enc.parameters()], 1e-5, 1e-4)


def _spatial(d=4, seed=0):
    enc = sspe.SpatialPromptEncoder(d, np.random.default_rng(seed))
    return enc


def test_spatial_single_token_returns_its_value():
    enc = _spatial()
    enc.value.data = np.eye(4)
    tokens = np.random.default_rng(1).normal(size=(5, 4))
    mask = np.zeros(5, bool)
    mask[3] = True
    np.testing.assert_allclose(enc(Tensor(tokens), mask).data, tokens[3], atol=1e-15)


def test_spatial_all_true_mask_equals_unmasked_attention():
    enc = _spatial()
    tokens = np.random.default_rng(2).normal(size=(6, 4))
    out = enc(Tensor(tokens), np.ones(6, bool)).data
    scores = (tokens @ enc.key.data) @ enc.query.data / 2.0
    w = np.exp(scores - scores.max())
    w /= w.sum()
    np.testing.assert_allclose(out, w @ (tokens @ enc.value.data), atol=1e-12)


def test_spatial_masked_tokens_have_no_influence():
    enc = _spatial()
    rng = np.random.default_rng(3)
    tokens = rng.normal(size=(6, 4))
    mask = np.array([1, 0, 1, 0, 0, 1], bool)
    ref = enc(Tensor(tokens), mask).data
    for _ in range(10):
        t2 = tokens.copy()
        t2[~mask] = rng.normal(size=(3, 4)) * 1e3
        assert enc(Tensor(t2), mask).data.tobytes() == ref.tobytes()


def test_spatial_degenerate_roi():
    with pytest.raises(sspe.DegenerateRoIError, match="degenerate RoI"):
        _spatial()(Tensor(np.ones((3, 4))), np.zeros(3, bool))


def test_spatial_grad_check():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        enc = _spatial(seed=seed)
        tokens = Tensor(rng.normal(size=(2, 5, 4)))
        mask = rng.uniform(size=(2, 5)) > 0.4
        mask[:, 0] = True
        r = rng.normal(size=(2, 4))
        assert grad_check(lambda t, *ps: (enc(t, mask) * r).sum(), [tokens, *enc.parameters()], 1e-5, 1e-4)


def test_fuse_one_path_silenced():
    rng = np.random.default_rng(0)
    fusion = sspe.PromptFusion(4, rng)
    zs, zf = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    for p in fusion.v_align.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(fusion(zs, zf).data, fusion.f_align(zs).data)
    fusion = sspe.PromptFusion(4, rng)
    for p in fusion.f_align.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(fusion(zs, zf).data, fusion.v_align(zf).data)


def test_fuse_dimension_mismatch():
    fusion = sspe.PromptFusion(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fusion(Tensor(np.ones(4)), Tensor(np.ones(3)))


def test_fuse_grad_check():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fusion = sspe.PromptFusion(4, rng)
        zs, zf = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
        r = rng.normal(size=(2, 4))
        assert grad_check(lambda a, b, *ps: (fusion(a, b) * r).sum(), [zs, zf, *fusion.parameters()], 1e-5, 1e-4)


def test_spectra_csv_round_trip(tmp_path):
    rows = [("img3/0", 2, np.random.default_rng(0).uniform(size=8)), ("img5/1", 0, np.zeros(8))]
    path = tmp_path / "spectra.csv"
    sspe.write_spectra_csv(path, rows)
    back = sspe.read_spectra_csv(path)
    for (a, b, c), (x, y, z) in zip(rows, back):
        assert a == x and b == y and c.tobytes() == z.tobytes()
