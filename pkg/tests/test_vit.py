import numpy as np
import pytest

from sparsejepa import tensor as T
from sparsejepa import vit


CFG = vit.ViTConfig()
TINY = vit.ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0)


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            vit.ViTConfig(image_size=30, patch_size=4)
        with pytest.raises(ValueError):
            vit.ViTConfig(embed_dim=65, heads=4)

    def test_grid(self):
        assert CFG.grid.n_patches == 64
        assert CFG.grid == vit.PatchGrid(8, 8)


class TestPatchify:
    def test_counts(self):
        img = np.random.default_rng(0).random((3, 32, 32))
        out = vit.patchify(img, CFG)
        assert out.shape == (64, 48)

    def test_single_patch_identity(self):
        cfg = vit.ViTConfig(image_size=8, patch_size=8)
        img = np.random.default_rng(1).random((3, 8, 8))
        out = vit.patchify(img, cfg)
        assert out.shape == (1, 192)
        np.testing.assert_array_equal(out[0], img.reshape(-1))

    def test_round_trip(self):
        img = np.random.default_rng(2).random((3, 32, 32))
        np.testing.assert_array_equal(vit.unpatchify(vit.patchify(img, CFG), CFG), img)

    def test_size_mismatch(self):
        with pytest.raises(T.ShapeError):
            vit.patchify(np.zeros((3, 16, 16)), CFG)


class TestPositionalEncoding:
    def test_rows_distinct(self):
        pos = vit.positional_encoding(vit.PatchGrid(8, 8), 64)
        assert pos.shape == (64, 64)
        for i in range(64):
            for j in range(i + 1, 64):
                assert not np.allclose(pos[i], pos[j]), (i, j)

    def test_sin_cos_identity(self):
        pos = vit.positional_encoding(vit.PatchGrid(8, 8), 64)
        n_freq = 16
        for half in (pos[:, :32], pos[:, 32:]):
            s, c = half[:, :n_freq], half[:, n_freq:]
            np.testing.assert_allclose(s**2 + c**2, 1.0, atol=1e-12)

    def test_translation_structure(self):
        # per frequency band, sin*sin + cos*cos = cos(freq * offset): depends
        # only on the positional offset
        grid = vit.PatchGrid(1, 16)
        pos = vit.positional_encoding(grid, 64)
        n_freq = 16
        s, c = pos[:, 32:48], pos[:, 48:]
        for band in range(n_freq):
            prods = {}
            for i in range(16):
                for j in range(16):
                    prods.setdefault(j - i, []).append(s[i, band] * s[j, band] + c[i, band] * c[j, band])
            for off, vals in prods.items():
                np.testing.assert_allclose(vals, vals[0], atol=1e-9)

    def test_d_must_divide_4(self):
        with pytest.raises(ValueError):
            vit.positional_encoding(vit.PatchGrid(2, 2), 30)


class TestEncode:
    def test_output_shape(self):
        rng = np.random.default_rng(3)
        params = vit.init_params(CFG, rng)
        out = vit.encode(rng.random((3, 32, 32)), CFG, params)
        assert out.shape == (64, 64)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        params = vit.init_params(TINY, rng)
        attn = []
        vit.encode(rng.random((3, 8, 8)), TINY, params, attn_out=attn)
        assert len(attn) == TINY.depth
        for a in attn:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)

    def test_determinism(self):
        rng = np.random.default_rng(5)
        params = vit.init_params(CFG, rng)
        img = rng.random((3, 32, 32))
        a = vit.encode(img, CFG, params).data
        b = vit.encode(img, CFG, params).data
        assert a.tobytes() == b.tobytes()

    def test_permutation_equivariance(self):
        # permuting input patches together with their positions permutes the
        # output rows the same way
        rng = np.random.default_rng(6)
        params = vit.init_params(TINY, rng)
        img = rng.random((3, 8, 8))
        base = vit.encode(img, TINY, params, patch_indices=np.array([0, 1, 2, 3])).data
        perm = vit.encode(img, TINY, params, patch_indices=np.array([2, 0, 3, 1])).data
        np.testing.assert_allclose(perm, base[[2, 0, 3, 1]], atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(7)
        params = vit.init_params(TINY, rng)
        imgs = rng.random((3, 3, 8, 8))
        batch = vit.encode(imgs, TINY, params).data
        for i in range(3):
            np.testing.assert_allclose(batch[i], vit.encode(imgs[i], TINY, params).data,
                                       atol=1e-12)

    def test_grad_check_tiny(self):
        rng = np.random.default_rng(8)
        params = vit.init_params(TINY, rng)
        img = rng.random((3, 8, 8))
        w = rng.normal(size=(4, 16))

        def f():
            return T.tsum(vit.encode(img, TINY, params) * T.tensor(w))

        report = T.grad_check(f, params, tol=1e-3, sample=3, rng=np.random.default_rng(0))
        assert report["passed"], report["per_param"]
