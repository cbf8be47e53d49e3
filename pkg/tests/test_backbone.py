import json
import math

import numpy as np
import pytest

from mlsp.augment import (AugmentationId, apply_augmentation, crop_rect,
                          enumerate_augmentations, views)
from mlsp.backbone import (INCEPTION_RESNET_V2, INCEPTION_V3, ActivationBlockSet,
                           ActivationFormatError, BackboneProfile, load_activations,
                           load_profile_file, profile_lookup, register_profile,
                           synth_activations, write_activations)
from mlsp.pooling import pool_narrow
from mlsp.synthetic import generate_corpus


# profiles ---------------------------------------------------------------

def test_builtin_totals():
    v3 = profile_lookup("inception-v3")
    assert (v3.n_blocks, v3.total) == (11, 10048)
    irv2 = profile_lookup("inceptionresnet-v2")
    assert (irv2.n_blocks, irv2.total) == (43, 16928)
    assert max(irv2.block_channels) - min(irv2.block_channels) <= 1


def test_custom_profile(tmp_path):
    p = register_profile(BackboneProfile("toy-2", (4, 8)))
    assert profile_lookup("toy-2").total == 12 == p.total
    (tmp_path / "p.json").write_text(json.dumps([{"name": "toy-3", "block_channels": [1, 2, 3]}]))
    load_profile_file(tmp_path / "p.json")
    assert profile_lookup("toy-3").n_blocks == 3


def test_unknown_profile_lists_known():
    with pytest.raises(KeyError, match="inception-v3"):
        profile_lookup("vgg16")


def test_builtin_profiles_cannot_be_redefined():
    with pytest.raises(ValueError):
        register_profile(BackboneProfile("inception-v3", (1,)))


def test_downsampling_rule():
    n = INCEPTION_V3.n_blocks
    for i in range(n):
        assert INCEPTION_V3.downsampling(i) == 2 ** (math.ceil(5 * i / n) + 2)
    assert INCEPTION_V3.block_size(0, 64, 80) == (16, 20)
    assert INCEPTION_V3.block_size(10, 64, 80) == (1, 1)


# MLSPACT1 --------------------------------------------------------------

def _random_set(profile=INCEPTION_V3, seed=0):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=profile.block_size(i, 40, 56) + (c,)).astype(np.float32)
              for i, c in enumerate(profile.block_channels)]
    return ActivationBlockSet(profile.name, blocks)


def test_activation_round_trip_bit_exact(tmp_path):
    bs = _random_set()
    write_activations(tmp_path / "a.act", bs)
    back = load_activations(tmp_path / "a.act")
    assert back.profile == "inception-v3" and len(back) == 11
    for a, b in zip(bs.blocks, back.blocks):
        assert a.tobytes() == b.tobytes()


def test_wrong_channel_count_names_block(tmp_path):
    bs = _random_set()
    bs.blocks[3] = bs.blocks[3][:, :, :-1]
    write_activations(tmp_path / "a.act", bs)
    with pytest.raises(ActivationFormatError, match="block 3") as exc:
        load_activations(tmp_path / "a.act")
    assert exc.value.block == 3
    with pytest.raises(ActivationFormatError, match="block 3"):
        bs.validate()


def test_truncated_and_bad_magic(tmp_path):
    write_activations(tmp_path / "a.act", _random_set())
    data = (tmp_path / "a.act").read_bytes()
    (tmp_path / "t.act").write_bytes(data[:-4])
    with pytest.raises(ActivationFormatError, match="block 10") as exc:
        load_activations(tmp_path / "t.act")
    assert "short by 4 bytes" in str(exc.value)
    (tmp_path / "m.act").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ActivationFormatError, match="magic"):
        load_activations(tmp_path / "m.act")
    bad_version = bytearray(data)
    bad_version[8] = 9
    (tmp_path / "v.act").write_bytes(bytes(bad_version))
    with pytest.raises(ActivationFormatError, match="version"):
        load_activations(tmp_path / "v.act")


def test_block_count_mismatch(tmp_path):
    bs = _random_set()
    bs.blocks.pop()
    write_activations(tmp_path / "a.act", bs)
    with pytest.raises(ActivationFormatError, match="10 blocks"):
        load_activations(tmp_path / "a.act")


# synthetic backbone ------------------------------------------------------------

def test_synth_shapes_follow_profile():
    img = next(generate_corpus(1, seed=1)).pixels
    h, w = img.shape[:2]
    for prof in (INCEPTION_V3, INCEPTION_RESNET_V2):
        bs = synth_activations(img, prof, seed=3).validate()
        for i, blk in enumerate(bs.blocks):
            assert blk.shape[:2] == prof.block_size(i, h, w)
            assert blk.dtype == np.float32


def test_synth_deterministic_and_seed_dependent():
    img = next(generate_corpus(1, seed=2)).pixels
    a = synth_activations(img, "inception-v3", seed=5)
    b = synth_activations(img, "inception-v3", seed=5)
    c = synth_activations(img, "inception-v3", seed=6)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.blocks, b.blocks))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.blocks, c.blocks))


def test_constant_image_gives_spatially_constant_blocks():
    img = np.full((40, 48, 3), 128, dtype=np.uint8)
    for blk in synth_activations(img, "inception-v3").blocks:
        assert np.all(blk == blk[:1, :1, :])


def test_rejects_small_images():
    with pytest.raises(ValueError):
        synth_activations(np.zeros((31, 64, 3), np.uint8), "inception-v3")
    with pytest.raises(ValueError):
        synth_activations(np.zeros((64, 64)), "inception-v3")


def _narrow(img):
    return pool_narrow(synth_activations(img, "inception-v3")).values.ravel().astype(np.float64)


def test_luminance_change_exceeds_crop_change():
    """On 50 images a quarter-range luminance shift moves the narrow feature
    further than any of the 8 crops, and crops stay within 0.5 normalized
    distance."""
    worst_crop = 0.0
    for item in generate_corpus(50, seed=11):
        base = _narrow(item.pixels)
        scale = np.linalg.norm(base)
        d_crop = max(np.linalg.norm(_narrow(apply_augmentation(item.pixels, a)) - base)
                     for a in range(8)) / scale
        shift = 64 if item.pixels.mean() < 128 else -64
        shifted = np.clip(item.pixels.astype(int) + shift, 0, 255).astype(np.uint8)
        d_lum = np.linalg.norm(_narrow(shifted) - base) / scale
        assert d_lum > d_crop, item.image_id
        worst_crop = max(worst_crop, d_crop)
    assert worst_crop < 0.5


# augmentation geometry --------------------------------------------------------

def test_crop_examples():
    for corner in range(4):
        assert crop_rect(256, 256, corner)[2:] == (224, 224)
    assert crop_rect(800, 800, "top-left") == (0, 0, 700, 700)
    assert crop_rect(629, 497, 0)[2:] == (550, 434)
    assert crop_rect(629, 497, "bottom-right") == (629 - 550, 497 - 434, 550, 434)
    with pytest.raises(ValueError):
        crop_rect(7, 100, 0)


def test_crops_inside_and_common_center():
    rects = [crop_rect(256, 256, c) for c in range(4)]
    for x, y, w, h in rects:
        assert x >= 0 and y >= 0 and x + w <= 256 and y + h <= 256
    x0 = max(r[0] for r in rects)
    y0 = max(r[1] for r in rects)
    x1 = min(r[0] + r[2] for r in rects)
    y1 = min(r[1] + r[3] for r in rects)
    assert (x1 - x0, y1 - y0) == (192, 192)


def test_enumeration():
    augs = enumerate_augmentations()
    assert len(augs) == 8
    assert augs[0] == AugmentationId(0, False)
    assert [a.index for a in augs] == list(range(8))
    assert all(AugmentationId.from_index(a.index) == a for a in augs)


def test_flip_involution_and_symmetry():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(40, 50, 3), dtype=np.uint8)
    crop = apply_augmentation(img, AugmentationId(1, False))
    flipped = apply_augmentation(img, AugmentationId(1, True))
    np.testing.assert_array_equal(flipped[:, ::-1], crop)
    np.testing.assert_array_equal(flipped[:, ::-1][:, ::-1], flipped)


def test_unaugmented_view_is_full_image():
    img = np.zeros((20, 30, 3), np.uint8)
    assert apply_augmentation(img, None).shape == (20, 30, 3)
    assert views(1) == [None]
    assert len(views(8)) == 8
