import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ageformer.errors import ConfigError
from ageformer.video_backbone import (
    DividedBlock,
    VideoBackbone,
    VideoBackboneConfig,
    patchify,
    unpatchify,
)
from fd_check import central_difference_check, randomize_parameters

TINY = VideoBackboneConfig(
    patch_size=8, embed_dim=32, depth=2, heads=2, frames=3, image_size=(16, 24)
)
DESK = VideoBackboneConfig.preset("desk")


def tiny_tokens(rng, cfg=TINY, batch=1):
    return torch.from_numpy(
        rng.standard_normal((batch, cfg.n_tokens, cfg.embed_dim))
    ).float()


# ---------------------------------------------------------------------------
# Patchify.
# ---------------------------------------------------------------------------


def test_paper_scale_patch_counts(rng):
    cfg = VideoBackboneConfig.preset("paper")
    clip = rng.uniform(0, 1, size=(32, 224, 224, 3)).astype(np.float32)
    tokens = patchify(clip, cfg)
    assert cfg.n_patches == 196
    assert tokens.shape == (196 * 32, 768)  # 3 * 16^2 = 768 per patch


def test_patchify_roundtrip_exact(rng):
    clip = rng.uniform(0, 1, size=(3, 16, 24, 3)).astype(np.float32)
    np.testing.assert_array_equal(unpatchify(patchify(clip, TINY), TINY), clip)


def test_patchify_zero_clip():
    clip = np.zeros((3, 16, 24, 3), dtype=np.float32)
    assert not np.any(patchify(clip, TINY))


def test_patchify_ordering_is_t_major(rng):
    clip = np.zeros((3, 16, 24, 3), dtype=np.float32)
    clip[1, 0:8, 8:16] = 1.0  # frame 1, raster patch index 1 of 6 per frame
    tokens = patchify(clip, TINY)
    n = TINY.n_patches
    hot = np.flatnonzero(tokens.sum(axis=1))
    assert hot.tolist() == [1 * n + 1]


def test_patchify_shape_mismatch(rng):
    clip = rng.uniform(0, 1, size=(2, 16, 24, 3)).astype(np.float32)
    with pytest.raises(ConfigError):
        patchify(clip, TINY)


def test_config_divisibility_enforced():
    with pytest.raises(ConfigError):
        VideoBackboneConfig(patch_size=17, image_size=(224, 224))
    with pytest.raises(ConfigError):
        VideoBackboneConfig(embed_dim=100, heads=3)


# ---------------------------------------------------------------------------
# Forward contracts.
# ---------------------------------------------------------------------------


def test_feature_lengths_match_presets():
    torch.manual_seed(0)
    model = VideoBackbone(DESK).eval()
    clip = torch.rand(2, 8, 64, 64, 3)
    with torch.no_grad():
        feat = model(clip)
    assert feat.shape == (2, 128)


def test_inference_deterministic():
    torch.manual_seed(0)
    model = VideoBackbone(DESK).eval()
    clip = torch.rand(1, 8, 64, 64, 3)
    with torch.no_grad():
        a = model(clip)
        b = model(clip)
    assert torch.equal(a, b)


def test_attention_rows_are_distributions(rng):
    torch.manual_seed(1)
    model = VideoBackbone(TINY).eval()
    clip = torch.rand(1, 3, 16, 24, 3)
    with torch.no_grad():
        _, record = model(clip, record=True)
    for layer in record.layers:
        for matrix in (layer.temporal, layer.spatial):
            assert matrix.min() >= 0
            np.testing.assert_allclose(matrix.sum(axis=-1), 1.0, atol=1e-6)


def test_block_is_identity_at_zero_weights(rng):
    block = DividedBlock(TINY)
    with torch.no_grad():
        for name, p in block.named_parameters():
            if "norm" in name and name.endswith("weight"):
                continue  # layer-norm scale stays 1; attention output is zero anyway
            p.zero_()
    x = tiny_tokens(rng)
    out, _ = block(x)
    torch.testing.assert_close(out, x, rtol=0, atol=0)


def test_temporal_sublayer_locality(rng):
    torch.manual_seed(2)
    block = DividedBlock(TINY).eval()
    x = tiny_tokens(rng).double()
    block.double()
    n, t = TINY.n_patches, TINY.frames
    gen = np.random.default_rng(0)
    with torch.no_grad():
        base, _ = block.temporal(x)
        for _ in range(20):
            p, q = gen.choice(n, size=2, replace=False)
            rows_q = [1 + fr * n + q for fr in range(t)]
            perturbed = x.clone()
            perturbed[0, rows_q] += torch.from_numpy(
                gen.standard_normal((t, TINY.embed_dim))
            )
            out, _ = block.temporal(perturbed)
            rows_p = [1 + fr * n + p for fr in range(t)]
            diff = (out[0, rows_p] - base[0, rows_p]).abs().max()
            assert diff.item() <= 1e-9
            # the class token passes through the temporal sublayer untouched
            assert torch.equal(out[0, 0], perturbed[0, 0])


def test_permutation_equivariance_without_positions(rng):
    torch.manual_seed(3)
    model = VideoBackbone(TINY).double().eval()
    with torch.no_grad():
        model.pos_spatial.zero_()
        model.pos_temporal.zero_()
    clip = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, 16, 24, 3))).double()
    perm = rng.permutation(TINY.n_patches)

    patches = patchify(clip[0].numpy(), TINY).reshape(TINY.frames, TINY.n_patches, -1)
    permuted_clip = torch.from_numpy(
        unpatchify(patches[:, perm].reshape(-1, TINY.patch_dim), TINY)
    )[None]

    with torch.no_grad():
        base, _ = model.forward_tokens(model.embed_clip(clip))
        swapped, _ = model.forward_tokens(model.embed_clip(permuted_clip))

    torch.testing.assert_close(swapped[0, 0], base[0, 0], rtol=0, atol=1e-10)
    n = TINY.n_patches
    for fr in range(TINY.frames):
        for p_new, p_old in enumerate(perm):
            torch.testing.assert_close(
                swapped[0, 1 + fr * n + p_new],
                base[0, 1 + fr * n + p_old],
                rtol=0,
                atol=1e-10,
            )


def test_gradcheck_smoke():
    torch.manual_seed(4)
    model = VideoBackbone(TINY).double().eval()
    randomize_parameters(model, seed=11)
    clip = torch.rand(1, 3, 16, 24, 3, dtype=torch.float64)
    label = torch.tensor([1])
    weights = torch.randn(TINY.embed_dim, 4, dtype=torch.float64)

    def loss_fn():
        return F.cross_entropy(model(clip) @ weights, label)

    report = central_difference_check(model, loss_fn, samples_per_tensor=6, seed=0)
    assert report.max_rel_err <= 1e-4, (report.worst_tensor, report.max_rel_err)
