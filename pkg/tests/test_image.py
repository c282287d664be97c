import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ivt.image import augment, hflip, num_patches, patchify, random_crop, read_png, read_raw, unpatchify, write_png, write_raw


@pytest.mark.parametrize("h, w, p, k", [(384, 128, 16, 192), (32, 16, 8, 8)])
def test_patch_count(h, w, p, k):
    assert num_patches(h, w, p) == k
    assert patchify(np.zeros((h, w, 3), np.float32), p).shape == (k, p * p * 3)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="image not divisible by patch size"):
        patchify(np.zeros((30, 16, 3), np.float32), 8)


def test_patch_order_is_row_major():
    img = np.zeros((4, 4, 1), np.float32)
    img[:2, 2:] = 1.0  # top-right patch
    patches = patchify(img, 2)
    assert patches[1].sum() == 4 and patches.sum() == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_patchify_round_trip(gh, gw, p, seed):
    img = np.random.default_rng(seed).random((gh * p, gw * p, 3), dtype=np.float32)
    assert np.array_equal(unpatchify(patchify(img, p), p, gh * p, gw * p), img)


def test_patchify_accepts_torch_batches():
    x = torch.rand(2, 16, 8, 3)
    out = patchify(x, 8)
    assert out.shape == (2, 2, 192)
    assert torch.equal(out[1, 0], x[1, :8].reshape(-1))


def test_hflip_permutes_patches_on_two_by_two():
    img = np.random.default_rng(0).random((4, 4, 3), dtype=np.float32)
    p, q = patchify(img, 2), patchify(hflip(img), 2)
    per_row_reversed = p.reshape(4, 2, 2, 3)[:, :, ::-1].reshape(4, -1)
    assert np.array_equal(q, per_row_reversed[[1, 0, 3, 2]])


def test_augment_identity_and_involution(rng):
    img = rng.random((32, 16, 3), dtype=np.float32)
    assert np.array_equal(augment(img, "identity", 0), img)
    assert np.array_equal(hflip(hflip(img)), img)
    assert np.array_equal(augment(img, "hflip", 0), img[:, ::-1])


def test_random_crop_deterministic(rng):
    img = rng.random((32, 16, 3), dtype=np.float32)
    a = augment(img, "random_crop", 11)
    assert np.array_equal(a, augment(img, "random_crop", 11))
    assert not np.array_equal(a, augment(img, "random_crop", 12))


def test_random_crop_full_scale_is_identity(rng):
    img = rng.random((32, 16, 3), dtype=np.float32)
    out = random_crop(img, np.random.default_rng(0), scale=(1.0, 1.0))
    np.testing.assert_allclose(out, img, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["identity", "hflip", "random_crop"]), st.integers(0, 1000))
def test_augment_preserves_shape(kind, seed):
    img = np.random.default_rng(seed).random((32, 16, 3), dtype=np.float32)
    out = augment(img, kind, seed)
    assert out.shape == img.shape and out.dtype == img.dtype


def test_unknown_augmentation():
    with pytest.raises(ValueError):
        augment(np.zeros((8, 8, 3), np.float32), "rotate", 0)


def test_png_and_raw_round_trip(tmp_path, rng):
    img = (rng.integers(0, 256, (8, 4, 3)) / 255.0).astype(np.float32)
    write_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png(tmp_path / "a.png"), img)
    write_raw(tmp_path / "a.raw", img)
    assert np.array_equal(read_raw(tmp_path / "a.raw"), img)
    assert (tmp_path / "a.raw").stat().st_size == 8 + img.size * 4
