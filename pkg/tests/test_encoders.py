import numpy as np
import pytest

from avaffect import encoders as enc
from avaffect.autodiff import Tensor
from avaffect.exceptions import ConfigError, DimensionError, InputError
from avaffect.mfcc import MfccImage


class TestFrameSampling:
    def test_even_spacing(self):
        assert enc.sample_frame_indices(25, 4) == [0, 8, 16, 24]

    def test_m1_takes_middle(self):
        assert enc.sample_frame_indices(25, 1) == [12]
        assert enc.sample_frame_indices(24, 1) == [11]

    def test_single_frame_repeats(self):
        assert enc.sample_frame_indices(1, 4) == [0, 0, 0, 0]

    def test_empty_segment(self):
        with pytest.raises(InputError):
            enc.sample_frame_indices(0, 4)

    def test_normalization_endpoints(self):
        # constant frames survive resampling exactly, so endpoints are exact
        spec = enc.FramePreprocessSpec(resize_short_side=16, center_crop=8)
        white = np.full((20, 20, 3), 255, dtype=np.uint8)
        black = np.zeros((20, 20, 3), dtype=np.uint8)
        out = enc.sample_and_preprocess_frames([white, black], 2, spec)
        assert out.shape == (2, 3, 8, 8)
        np.testing.assert_allclose(out.data[0], 1.0)
        np.testing.assert_allclose(out.data[1], -1.0)

    def test_aspect_ratio_preserved_then_cropped(self):
        spec = enc.FramePreprocessSpec(resize_short_side=16, center_crop=16)
        wide = np.zeros((20, 40, 3), dtype=np.uint8)
        out = enc.preprocess_frame(wide, spec)
        assert out.shape == (3, 16, 16)


class TestBilinearResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 255, size=(5, 7, 3))
        np.testing.assert_allclose(enc.bilinear_resize(img, 5, 7), img, atol=1e-12)

    def test_constant_image_stays_constant(self):
        img = np.full((9, 13, 3), 42.0)
        np.testing.assert_allclose(enc.bilinear_resize(img, 4, 6), 42.0)

    def test_downscale_averages(self):
        img = np.zeros((2, 2, 1))
        img[0, 0, 0] = 4.0
        img[1, 1, 0] = 4.0
        out = enc.bilinear_resize(img, 1, 1)
        np.testing.assert_allclose(out[0, 0, 0], 2.0)


class TestVisualEncoder:
    def _params(self, patch=4, m=2, crop=8, d_model=6, seed=0):
        patch_dim, n_tokens = enc.visual_geometry(m, crop, patch)
        rng = np.random.default_rng(seed)
        return enc.init_patch_encoder(patch_dim, n_tokens, d_model, rng, np.float32)

    def test_token_count_contract(self):
        # 4 frames at 112px with 56px patches: 4 per frame grid of 2x2 = 16 tokens
        patch_dim, n_tokens = enc.visual_geometry(4, 112, 56)
        assert n_tokens == 16
        assert patch_dim == 3 * 56 * 56

    def test_encode_shapes_and_determinism(self):
        params = self._params()
        frames = Tensor(np.random.default_rng(3).normal(size=(2, 3, 8, 8)).astype(np.float32))
        out1 = enc.encode_visual(frames, params, patch=4)
        out2 = enc.encode_visual(frames, params, patch=4)
        assert out1.tokens.shape == (2 * 4, 6)
        assert out1.modality == "visual"
        np.testing.assert_array_equal(out1.tokens.data, out2.tokens.data)

    def test_init_is_seed_deterministic(self):
        a = self._params(seed=7)
        b = self._params(seed=7)
        np.testing.assert_array_equal(a.proj_w.data, b.proj_w.data)
        np.testing.assert_array_equal(a.pos.data, b.pos.data)

    def test_zero_frames_zero_pos_gives_bias_rows(self):
        params = self._params()
        params.pos.data[:] = 0.0
        frames = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
        out = enc.encode_visual(frames, params, patch=4)
        np.testing.assert_allclose(out.tokens.data,
                                   np.broadcast_to(params.proj_b.data, out.tokens.shape))

    def test_patch_permutation_equivariance_with_zero_pos(self):
        params = self._params()
        params.pos.data[:] = 0.0
        rng = np.random.default_rng(5)
        patches = rng.normal(size=(8, 3 * 4 * 4)).astype(np.float32)
        perm = rng.permutation(8)
        base = enc.project_patches(patches, params).data
        permuted = enc.project_patches(patches[perm], params).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-6)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError):
            enc.visual_geometry(2, 112, 48)

    def test_token_count_independent_of_content(self):
        params = self._params()
        rng = np.random.default_rng(2)
        for _ in range(3):
            frames = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
            assert enc.encode_visual(frames, params, patch=4).tokens.shape == (8, 6)


class TestAudioEncoder:
    def test_padding_token_count(self):
        # 98 frames with a 14-frame patch over the full 20-coefficient width
        patch_dim, n_tokens = enc.audio_geometry(98, 20, 14, 20)
        assert n_tokens == 7
        assert patch_dim == 3 * 14 * 20

    def test_padding_rounds_up(self):
        _, n_tokens = enc.audio_geometry(99, 20, 14, 20)
        assert n_tokens == 8

    def test_encode_matches_geometry(self):
        rng = np.random.default_rng(0)
        patch_dim, n_tokens = enc.audio_geometry(10, 4, 3, 4)
        params = enc.init_patch_encoder(patch_dim, n_tokens, 6, rng, np.float32)
        image = MfccImage(Tensor(rng.normal(size=(3, 10, 4)).astype(np.float32)))
        out = enc.encode_audio(image, params, time_patch=3, coeff_patch=4)
        assert out.tokens.shape == (4, 6)
        assert out.modality == "audio"

    def test_silence_tokens_identical_up_to_position(self):
        rng = np.random.default_rng(0)
        patch_dim, n_tokens = enc.audio_geometry(6, 4, 3, 4)
        params = enc.init_patch_encoder(patch_dim, n_tokens, 6, rng, np.float32)
        image = MfccImage(Tensor(np.full((3, 6, 4), 2.5, dtype=np.float32)))
        out = enc.encode_audio(image, params, 3, 4).tokens.data
        depositioned = out - params.pos.data
        np.testing.assert_allclose(depositioned[0], depositioned[1], atol=1e-5)

    def test_indivisible_coeff_axis_rejected(self):
        with pytest.raises(ConfigError):
            enc.audio_geometry(10, 5, 2, 4)

    def test_wrong_token_count_rejected(self):
        rng = np.random.default_rng(0)
        params = enc.init_patch_encoder(3 * 3 * 4, 2, 6, rng, np.float32)
        image = MfccImage(Tensor(np.zeros((3, 12, 4), dtype=np.float32)))
        with pytest.raises(DimensionError):
            enc.encode_audio(image, params, 3, 4)
