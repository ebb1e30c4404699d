from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import randomize, tiny_config
from egoworld.core.cdit import CDiT, analytic_param_count, build_masks, build_model
from egoworld.core.codec import FrameCodec
from egoworld.core.config import ModelConfig
from egoworld.core.errors import ConfigError, DataError


def test_patch_codec_round_trip_is_exact(rng):
    codec = FrameCodec("patch_linear", resolution=8, patch=2)
    frames = rng.integers(0, 256, size=(3, 8, 8, 3), dtype=np.uint8)
    z = codec.encode_frame(frames)
    assert z.shape == (3, codec.tokens_per_frame, codec.latent_dim) == (3, 16, 12)
    assert float(z.min()) >= -1.0 and float(z.max()) <= 1.0
    assert np.array_equal(codec.decode_frame(z), frames)


def test_codec_rejects_wrong_shapes():
    codec = FrameCodec("patch_linear", resolution=8, patch=2)
    with pytest.raises(DataError):
        codec.encode_frame(np.zeros((16, 16, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        codec.decode_frame(torch.zeros(5, 12))
    with pytest.raises(ConfigError):
        FrameCodec("jpeg")
    with pytest.raises(ConfigError):
        FrameCodec("patch_linear", resolution=9, patch=2)


def test_latent_features_pool_to_grid():
    codec = FrameCodec("patch_linear", resolution=8, patch=2)
    z = torch.randn(2, 5, 16, 12)
    feats = codec.latent_features(z, fd_grid=2)
    assert feats.shape == (2, 5, 2 * 2 * 12)
    flat = codec.latent_features(torch.ones(1, 16, 12), fd_grid=2)
    assert torch.allclose(flat, torch.ones_like(flat))


def test_tiny_autoencoder_pretrain_reduces_error(rng):
    codec = FrameCodec("tiny_ae", resolution=8, patch=2, latent_channels=4)
    frames = np.repeat(rng.integers(0, 256, size=(1, 8, 8, 3), dtype=np.uint8), 4, axis=0)
    before = codec.reconstruction_rmse(frames)
    history = codec.pretrain(frames, steps=60, batch_size=4, lr=5e-3)
    assert len(history) == 60
    assert codec.reconstruction_rmse(frames) < before
    assert codec.encode_frame(frames).shape == (4, 16, 4)


def test_train_prefix_masks_follow_markov_window():
    masks = build_masks(5, 2, tokens_per_frame=3, mode="train_prefix")
    assert masks.num_query == masks.num_context == 5
    assert not masks.cross_mask[0].any()
    assert masks.cross_mask[4].tolist() == [False, False, True, True, False]
    assert masks.cross_mask[1].tolist() == [True, False, False, False, False]
    self_tok, cross_tok = masks.token_masks(3)
    assert self_tok.shape == (15, 15) and cross_tok.shape == (15, 15)
    assert bool(self_tok[0, 2]) and not bool(self_tok[0, 3])


def test_infer_last_mask_sees_last_k_frames():
    masks = build_masks(6, 3, tokens_per_frame=4, mode="infer_last")
    assert masks.query_frames.tolist() == [5]
    assert masks.context_frames.tolist() == [0, 1, 2, 3, 4]
    assert masks.cross_mask.tolist() == [[False, False, True, True, True]]
    with pytest.raises(DataError):
        build_masks(0, 3, 4)
    with pytest.raises(DataError):
        build_masks(4, 3, 4, mode="bidirectional")


def _tiny_model(conditioning: str = "concat") -> CDiT:
    torch.manual_seed(0)
    return CDiT(latent_dim=12, tokens_per_frame=4, width=32, layers=2, heads=4, max_frames=5,
                action_conditioning=conditioning, action_embed_dim=16).double()


def _inputs(b: int, fq: int, fc: int, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    noisy = torch.randn(b, fq, 4, 12, generator=g, dtype=torch.float64)
    context = torch.randn(b, fc, 4, 12, generator=g, dtype=torch.float64)
    actions = torch.rand(b, fq, 48, generator=g, dtype=torch.float64) * 2 - 1
    timeskips = torch.full((b, fq), 0.25, dtype=torch.float64)
    tau = torch.randint(0, 20, (b, fq), generator=g)
    return noisy, context, actions, timeskips, tau


def test_fresh_model_outputs_zero():
    model = _tiny_model()
    masks = build_masks(5, 3, 4)
    eps, v = model(*_inputs(2, 5, 5), masks)
    assert eps.shape == (2, 5, 4, 12) and v.shape == (2, 5, 4, 1)
    assert torch.count_nonzero(eps) == 0 and torch.count_nonzero(v) == 0


def test_prediction_only_sees_allowed_context_frames():
    model = randomize(_tiny_model(), std=0.1)
    masks = build_masks(5, 2, 4)
    noisy, context, actions, timeskips, tau = _inputs(1, 5, 5)
    base, _ = model(noisy, context, actions, timeskips, tau, masks)

    touched = context.clone()
    touched[:, 1] += 1.0
    out, _ = model(noisy, touched, actions, timeskips, tau, masks)
    changed = [(out[0, q] - base[0, q]).abs().max().item() > 1e-9 for q in range(5)]
    assert changed == [False, False, True, True, False]

    poked = noisy.clone()
    poked[:, 2] += 1.0
    out, _ = model(poked, context, actions, timeskips, tau, masks)
    changed = [(out[0, q] - base[0, q]).abs().max().item() > 1e-9 for q in range(5)]
    assert changed == [False, False, True, False, False]


def test_actions_and_timeskips_condition_their_own_frame():
    model = randomize(_tiny_model("embed"), std=0.1, seed=3)
    masks = build_masks(3, 2, 4)
    noisy, context, actions, timeskips, tau = _inputs(1, 3, 3, seed=1)
    base, _ = model(noisy, context, actions, timeskips, tau, masks)
    later = timeskips.clone()
    later[0, 1] = 1.0
    out, _ = model(noisy, context, actions, later, tau, masks)
    assert torch.allclose(out[0, 0], base[0, 0]) and torch.allclose(out[0, 2], base[0, 2])
    assert not torch.allclose(out[0, 1], base[0, 1])


def test_empty_context_runs_and_wrong_shapes_fail():
    model = randomize(_tiny_model())
    masks = build_masks(1, 3, 4, mode="infer_last")
    noisy, context, actions, timeskips, tau = _inputs(2, 1, 0)
    eps, v = model(noisy, context, actions, timeskips, tau, masks)
    assert eps.shape == (2, 1, 4, 12)
    assert bool((v.abs() <= 1).all())
    with pytest.raises(DataError):
        model(noisy, context, actions[..., :40], timeskips, tau, masks)
    with pytest.raises(DataError):
        model(noisy, context[:, :0], actions, timeskips, tau, build_masks(4, 3, 4))
    with pytest.raises(DataError):
        CDiT(latent_dim=12, tokens_per_frame=4, width=30, layers=1, heads=4, max_frames=4)


@pytest.mark.parametrize("conditioning", ["concat", "embed"])
def test_analytic_param_count_matches_module(conditioning):
    cfg = tiny_config(**{"model.action_conditioning": conditioning}).model
    model = build_model(cfg, latent_dim=12, tokens_per_frame=16)
    assert analytic_param_count(cfg, 12, 16) == sum(p.numel() for p in model.parameters())


def test_named_sizes_resolve():
    cfg = ModelConfig(size="S")
    r = cfg.resolved()
    assert r.width % r.heads == 0 and r.layers > 0
    assert analytic_param_count(cfg, 12, 1024) > analytic_param_count(tiny_config().model, 12, 1024)
