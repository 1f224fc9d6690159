"""Encoder, injection, neck, and checkpoint behavior."""

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from inod.encoder import (
    Encoder,
    EncoderConfig,
    LevelSpec,
    Neck,
    inject,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from inod.errors import ConfigError, DataError
from inod.layersplit import LayerMaskSet
from inod.tensor import Tape, Tensor, backward, sum_all, tensor

SMALL = EncoderConfig(
    stem=LevelSpec(4, 4, 2),
    levels=(LevelSpec(6, 4, 2), LevelSpec(8, 4, 2)),
    neck_channels=5,
    seed=7,
)


def _mask_set(grids) -> LayerMaskSet:
    return LayerMaskSet(
        canonical_parts=[g.copy() for g in grids],
        layer_grids=list(grids),
        level_dims=[g.shape for g in grids],
        component_levels={},
    )


def _zero_biases(encoder: Encoder) -> None:
    for name, t in encoder.params.items():
        if name.endswith(".bias"):
            t.data = np.zeros_like(t.data)


class TestEncodePlain:
    def test_stride_ladder_dims(self, rng):
        enc = Encoder(SMALL)
        pyr = enc.encode_plain(rng.random((3, 32, 32)))
        assert pyr.dims == [(8, 8), (4, 4)]
        assert pyr.strides == [4, 8]

    def test_zero_image_zero_biases(self):
        enc = Encoder(SMALL)
        _zero_biases(enc)
        pyr = enc.encode_plain(np.zeros((3, 32, 32)))
        for level in pyr.levels:
            assert (level.data == 0).all()

    def test_seeded_init_is_bit_identical(self, rng):
        img = rng.random((3, 32, 32))
        a = Encoder(SMALL).encode_plain(img)
        b = Encoder(SMALL).encode_plain(img)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.data, lb.data)

    def test_crop_not_divisible_raises(self, rng):
        enc = Encoder(SMALL)
        with pytest.raises(Exception):
            enc.encode_plain(rng.random((3, 30, 30)))


class TestInject:
    def test_empty_mask_keeps_source(self, rng):
        s = tensor(rng.normal(size=(4, 6, 6)))
        n = tensor(rng.normal(size=(4, 6, 6)))
        out = inject(s, n, np.zeros((6, 6), dtype=np.uint8))
        np.testing.assert_array_equal(out.data, s.data)

    def test_full_mask_takes_noise(self, rng):
        s = tensor(rng.normal(size=(4, 6, 6)))
        n = tensor(rng.normal(size=(4, 6, 6)))
        out = inject(s, n, np.ones((6, 6), dtype=np.uint8))
        np.testing.assert_array_equal(out.data, n.data)

    def test_cellwise_selection_against_elementwise_oracle(self, rng):
        s = rng.normal(size=(3, 5, 5))
        n = rng.normal(size=(3, 5, 5))
        mask = rng.integers(0, 2, size=(5, 5)).astype(np.uint8)
        out = inject(tensor(s), tensor(n), mask).data
        for c in range(3):
            for y in range(5):
                for x in range(5):
                    expected = n[c, y, x] if mask[y, x] else s[c, y, x]
                    assert out[c, y, x] == expected


class TestEncodeWithInjection:
    def test_empty_masks_bit_identical_to_plain(self, rng):
        enc = Encoder(SMALL)
        src = rng.random((3, 32, 32))
        noise_pyr = enc.encode_plain(rng.random((3, 32, 32)))
        masks = _mask_set([np.zeros((8, 8), np.uint8), np.zeros((4, 4), np.uint8)])
        composite = enc.encode_with_injection(src, noise_pyr, masks)
        plain = enc.encode_plain(src)
        for lc, lp in zip(composite.levels, plain.levels):
            np.testing.assert_array_equal(lc.data, lp.data)

    def test_self_injection_is_noop(self, rng):
        enc = Encoder(SMALL)
        img = rng.random((3, 32, 32))
        noise_pyr = enc.encode_plain(img)
        masks = _mask_set(
            [
                rng.integers(0, 2, size=(8, 8)).astype(np.uint8),
                rng.integers(0, 2, size=(4, 4)).astype(np.uint8),
            ]
        )
        composite = enc.encode_with_injection(img, noise_pyr, masks)
        plain = enc.encode_plain(img)
        for lc, lp in zip(composite.levels, plain.levels):
            np.testing.assert_array_equal(lc.data, lp.data)

    def test_exact_merge_at_each_site(self, rng):
        enc = Encoder(SMALL)
        noise_pyr = enc.encode_plain(rng.random((3, 32, 32)))
        masks = _mask_set(
            [
                rng.integers(0, 2, size=(8, 8)).astype(np.uint8),
                rng.integers(0, 2, size=(4, 4)).astype(np.uint8),
            ]
        )
        composite, source = enc.encode_with_injection(
            rng.random((3, 32, 32)), noise_pyr, masks, return_source=True
        )
        for lvl in range(2):
            sel = masks.layer_grids[lvl].astype(bool)
            np.testing.assert_array_equal(
                composite.levels[lvl].data[:, sel], noise_pyr.levels[lvl].data[:, sel]
            )
            np.testing.assert_array_equal(
                composite.levels[lvl].data[:, ~sel], source.levels[lvl].data[:, ~sel]
            )

    def test_locality_of_level0_injection(self, rng):
        enc = Encoder(SMALL)
        src = rng.random((3, 32, 32))
        noise_pyr = enc.encode_plain(rng.random((3, 32, 32)))
        m0 = np.zeros((8, 8), dtype=np.uint8)
        m0[2:4, 3:5] = 1
        masks = _mask_set([m0, np.zeros((4, 4), np.uint8)])
        composite = enc.encode_with_injection(src, noise_pyr, masks)
        plain = enc.encode_plain(src)

        # level 0: exact equality outside the mask
        outside = m0 == 0
        np.testing.assert_array_equal(
            composite.levels[0].data[:, outside], plain.levels[0].data[:, outside]
        )
        # level 1: may differ only inside the conv-window dilation of the mask
        spec = SMALL.levels[1]
        dilated = _dilate_through_conv(m0.astype(bool), spec.kernel, spec.stride, spec.padding, (4, 4))
        diff = (composite.levels[1].data != plain.levels[1].data).any(axis=0)
        assert not diff[~dilated].any()

    def test_level_count_mismatch_is_config_error(self, rng):
        enc = Encoder(SMALL)
        noise_pyr = enc.encode_plain(rng.random((3, 32, 32)))
        noise_pyr.levels.pop()
        masks = _mask_set([np.zeros((8, 8), np.uint8), np.zeros((4, 4), np.uint8)])
        with pytest.raises(ConfigError):
            enc.encode_with_injection(rng.random((3, 32, 32)), noise_pyr, masks)

    def test_injection_sites_subset(self, rng):
        cfg = EncoderConfig(
            stem=LevelSpec(4, 4, 2),
            levels=(LevelSpec(6, 4, 2), LevelSpec(8, 4, 2)),
            inject_levels=(1,),
            seed=7,
        )
        enc = Encoder(cfg)
        assert enc.injection_dims(32, 32) == [(4, 4)]
        noise_pyr = enc.encode_plain(rng.random((3, 32, 32)))
        masks = _mask_set([np.ones((4, 4), np.uint8)])
        composite = enc.encode_with_injection(rng.random((3, 32, 32)), noise_pyr, masks)
        np.testing.assert_array_equal(composite.levels[1].data, noise_pyr.levels[1].data)


def _dilate_through_conv(affected, kernel, stride, padding, out_dims):
    """Brute-force receptive-field propagation: which output cells read an affected input cell."""
    out = np.zeros(out_dims, dtype=bool)
    h, w = affected.shape
    for y in range(out_dims[0]):
        for x in range(out_dims[1]):
            for ky in range(kernel):
                for kx in range(kernel):
                    yy, xx = y * stride - padding + ky, x * stride - padding + kx
                    if 0 <= yy < h and 0 <= xx < w and affected[yy, xx]:
                        out[y, x] = True
    return out


class TestNeck:
    def test_single_level_is_one_conv(self, rng):
        neck = Neck([4], out_channels=3, out_dims=(8, 8), seed=1)
        level = tensor(rng.normal(size=(4, 8, 8)))
        out = neck(type("P", (), {"levels": [level]})())
        w = neck.params["neck0.weight"].data.reshape(3, 4)
        expected = np.einsum("oc,chw->ohw", w, level.data) + neck.params["neck0.bias"].data[:, None, None]
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_zero_pyramid_zero_bias_gives_zero(self):
        neck = Neck([4, 6], out_channels=3, out_dims=(8, 8), seed=1)
        for name in ("neck0.bias", "neck1.bias"):
            neck.params[name].data = np.zeros_like(neck.params[name].data)
        pyr = type("P", (), {"levels": [tensor(np.zeros((4, 8, 8))), tensor(np.zeros((6, 4, 4)))]})()
        assert (neck(pyr).data == 0).all()

    def test_constant_pyramid_closed_form(self):
        neck = Neck([2, 3], out_channels=4, out_dims=(6, 6), seed=5)
        v0, v1 = 1.5, -0.75
        pyr = type(
            "P", (), {"levels": [tensor(np.full((2, 6, 6), v0)), tensor(np.full((3, 3, 3), v1))]}
        )()
        out = neck(pyr).data
        w0 = neck.params["neck0.weight"].data.reshape(4, 2)
        w1 = neck.params["neck1.weight"].data.reshape(4, 3)
        expected = (
            w0.sum(axis=1) * v0
            + neck.params["neck0.bias"].data
            + w1.sum(axis=1) * v1
            + neck.params["neck1.bias"].data
        )
        for c in range(4):
            np.testing.assert_allclose(out[c], expected[c], rtol=1e-12)

    def test_gradients_through_neck(self, rng):
        neck = Neck([3], out_channels=2, out_dims=(4, 4), seed=2)
        x = tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        pyr = type("P", (), {"levels": [x]})()
        with Tape() as tape:
            loss = sum_all(neck(pyr))
        grads = backward(loss, tape)
        fd = numeric_grad(lambda: neck(pyr).data.sum(), x.data)
        assert rel_error(grads[x], fd) < 1e-7


class TestEncoderConfig:
    def test_ladder_violation(self):
        with pytest.raises(ConfigError, match="ladder"):
            EncoderConfig(stem=LevelSpec(4, 3, 1), levels=(LevelSpec(8, 4, 2),))

    def test_kernel_stride_parity(self):
        with pytest.raises(ConfigError, match="kernel"):
            LevelSpec(8, 3, 2)

    def test_too_many_levels(self):
        with pytest.raises(ConfigError):
            EncoderConfig(levels=tuple(LevelSpec(8, 4, 2) for _ in range(5)))

    def test_duplicate_injection_sites(self):
        with pytest.raises(ConfigError):
            EncoderConfig(inject_levels=(0, 0))


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path, rng):
        enc = Encoder(SMALL, dtype=np.float32)
        path = tmp_path / "weights.inod"
        save_checkpoint(path, enc.params)
        stored = load_checkpoint(path)
        assert set(stored) == set(enc.params)
        for name, t in enc.params.items():
            np.testing.assert_array_equal(stored[name], t.data)
        assert path.read_bytes()[:4] == b"INOD"

    def test_load_into_replaces_values(self, tmp_path):
        enc_a = Encoder(SMALL, dtype=np.float64)
        enc_b = Encoder(EncoderConfig(**{**SMALL.__dict__, "seed": 99}), dtype=np.float64)
        path = tmp_path / "w.inod"
        save_checkpoint(path, enc_a.params)
        load_into(enc_b.params, path)
        for name in enc_a.params:
            np.testing.assert_array_equal(enc_b.params[name].data, enc_a.params[name].data)

    def test_load_into_mismatch_is_config_error(self, tmp_path):
        enc = Encoder(SMALL)
        path = tmp_path / "w.inod"
        save_checkpoint(path, enc.params)
        other = Encoder(EncoderConfig(stem=LevelSpec(4, 4, 2), levels=(LevelSpec(6, 4, 2),), seed=7))
        with pytest.raises(ConfigError, match="mismatch"):
            load_into(other.params, path)

    def test_bad_magic_is_data_error(self, tmp_path):
        path = tmp_path / "junk.inod"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_truncated_payload_is_data_error(self, tmp_path):
        enc = Encoder(SMALL)
        path = tmp_path / "w.inod"
        save_checkpoint(path, enc.params)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(DataError):
            load_checkpoint(path)
