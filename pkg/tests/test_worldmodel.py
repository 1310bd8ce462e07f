import numpy as np
import pytest
import torch

from conftest import tiny_config
from worldflow.conditioning import build_condition_mask
from worldflow.worldmodel import (Attention, ModelConfig, WorldModel, attach_control_branch,
                                  count_parameters, freeze_base_for_control,
                                  freeze_for_camera_finetune, pack_multiview, patchify,
                                  rope_axis_split, rope_pair_freqs, rope_phases, rope_rotate,
                                  rope_tables, unpack_multiview, unpatchify)


def _inputs(model, tl=5, h=4, w=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    latent = torch.randn(tl, model.config.latent_channels, h, w, generator=gen)
    mask = build_condition_mask(1, tl)
    text = torch.randn(3, model.config.text_width, generator=gen)
    return latent, mask, text


# -- shape / init contracts -----------------------------------------------------


def test_output_shape_matches_input(tiny_model):
    latent, mask, text = _inputs(tiny_model)
    out = tiny_model(latent, mask, 0.5, text)
    assert out.shape == latent.shape


def test_batched_output_shape(tiny_model):
    latent, mask, text = _inputs(tiny_model)
    batched = latent[None].repeat(3, 1, 1, 1, 1)
    out = tiny_model(batched, mask, torch.tensor([0.2, 0.5, 0.9]), text)
    assert out.shape == batched.shape


def test_zero_velocity_at_init(tiny_model):
    latent, mask, text = _inputs(tiny_model)
    out = tiny_model(latent, mask, 0.5, text)
    assert torch.equal(out, torch.zeros_like(out))


def test_text_width_mismatch_rejected(tiny_model):
    latent, mask, _ = _inputs(tiny_model)
    with pytest.raises(ValueError):
        tiny_model(latent, mask, 0.5, torch.randn(3, 99))


def test_mask_shape_mismatch_rejected(tiny_model):
    latent, _, text = _inputs(tiny_model)
    with pytest.raises(ValueError):
        tiny_model(latent, np.zeros(7, dtype=np.int8), 0.5, text)


def test_t_out_of_range_rejected(tiny_model):
    latent, mask, text = _inputs(tiny_model)
    with pytest.raises(ValueError):
        tiny_model(latent, mask, 0.0, text)
    with pytest.raises(ValueError):
        tiny_model(latent, mask, 1.5, text)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=100, num_heads=4, head_dim=32)
    with pytest.raises(ValueError):
        ModelConfig(patch=(2, 2, 2))


# -- attention oracle -------------------------------------------------------------


def _numpy_cross_attention(attn: Attention, x: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    """Independent re-implementation of one attention layer."""
    wq = attn.wq.weight.detach().numpy()
    bq = attn.wq.bias.detach().numpy()
    wk = attn.wk.weight.detach().numpy()
    bk = attn.wk.bias.detach().numpy()
    wv = attn.wv.weight.detach().numpy()
    bv = attn.wv.bias.detach().numpy()
    wo = attn.wo.weight.detach().numpy()
    bo = attn.wo.bias.detach().numpy()
    nh, hd = attn.num_heads, attn.head_dim
    q = (x @ wq.T + bq).reshape(x.shape[0], nh, hd).transpose(1, 0, 2)
    k = (ctx @ wk.T + bk).reshape(ctx.shape[0], nh, hd).transpose(1, 0, 2)
    v = (ctx @ wv.T + bv).reshape(ctx.shape[0], nh, hd).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights = weights / weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(1, 0, 2).reshape(x.shape[0], nh * hd)
    return out @ wo.T + bo


def test_cross_attention_matches_numpy_oracle(tiny_model):
    attn = tiny_model.blocks[0].cross_attn
    torch.manual_seed(1)
    x = torch.randn(1, 6, tiny_model.config.model_dim)
    ctx = torch.randn(1, 4, tiny_model.config.text_width)
    got = attn(x, ctx=ctx).detach().numpy()[0]
    want = _numpy_cross_attention(attn, x.numpy()[0], ctx.numpy()[0])
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_duplicated_text_tokens_change_only_normalization(tiny_model):
    attn = tiny_model.blocks[0].cross_attn
    torch.manual_seed(2)
    x = torch.randn(1, 5, tiny_model.config.model_dim)
    ctx = torch.randn(1, 3, tiny_model.config.text_width)
    doubled = torch.cat([ctx, ctx], dim=1)
    out_single = attn(x, ctx=ctx)
    out_double = attn(x, ctx=doubled)
    assert torch.allclose(out_single, out_double, atol=1e-5)
    # and the doubled pass agrees with the oracle too
    want = _numpy_cross_attention(attn, x.numpy()[0], doubled.numpy()[0])
    np.testing.assert_allclose(out_double.detach().numpy()[0], want, atol=1e-5)


# -- rotary embeddings --------------------------------------------------------------


def test_rope_axis_split():
    assert rope_axis_split(32) == (16, 8, 8)
    assert rope_axis_split(8) == (4, 2, 2)
    with pytest.raises(ValueError):
        rope_axis_split(12)


def test_rope_frequencies_strictly_positive():
    for freqs in rope_pair_freqs(32):
        assert np.all(freqs > 0)


def test_identical_coordinates_identical_rotation():
    coords = np.array([[2, 1, 3], [2, 1, 3]])
    cos, sin = rope_tables(coords, 16)
    assert torch.equal(cos[0], cos[1])
    assert torch.equal(sin[0], sin[1])


def _pairwise_logits(q, k, coords, head_dim):
    cos, sin = rope_tables(coords, head_dim)
    qr = rope_rotate(q, cos, sin)
    kr = rope_rotate(k, cos, sin)
    return (qr @ kr.transpose(-2, -1)) / np.sqrt(head_dim)


def test_rope_translation_invariance_on_grid():
    # brute-force attention logits on a 3x3 (x2 frames) grid, before/after
    # shifting every coordinate by a constant offset
    head_dim = 16
    base = np.array([[t, y, x] for t in range(2) for y in range(3) for x in range(3)])
    shifted = base + np.array([5, 2, 7])
    torch.manual_seed(3)
    q = torch.randn(len(base), head_dim, dtype=torch.float64)
    k = torch.randn(len(base), head_dim, dtype=torch.float64)
    logits_a = _pairwise_logits(q, k, base, head_dim)
    logits_b = _pairwise_logits(q, k, shifted, head_dim)
    assert torch.allclose(logits_a, logits_b, atol=1e-9)


def test_rope_phases_grid_table():
    tables = rope_phases((2, 2, 2), 16)
    assert tables["cos"].shape == (8, 8)
    assert tables["coords"].shape == (8, 3)


# -- patchify ---------------------------------------------------------------------


def test_patchify_round_trip_exact():
    x = torch.rand(2, 6, 5, 4, 8)
    tokens = patchify(x, (1, 2, 2))
    assert tokens.shape == (2, 6 * 2 * 4, 5 * 4)
    assert torch.equal(unpatchify(tokens, (1, 2, 2), (6, 4, 8), 5), x)


# -- control branch -----------------------------------------------------------------


def _control_model(num_layers=4, num_blocks=2):
    torch.manual_seed(5)
    cfg = tiny_config(num_layers=num_layers)
    model = WorldModel(cfg)
    return attach_control_branch(model, num_blocks=num_blocks, control_channels=4)


def test_control_attach_is_output_preserving():
    torch.manual_seed(6)
    cfg = tiny_config(num_layers=4)
    plain = WorldModel(cfg)
    latent, mask, text = _inputs(plain)
    # make the trunk nonzero so preservation is meaningful
    with torch.no_grad():
        for p in plain.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    before = plain(latent, mask, 0.5, text)
    attach_control_branch(plain, num_blocks=2, control_channels=4)
    control = torch.randn(latent.shape[0], 4, latent.shape[2], latent.shape[3])
    after = plain(latent, mask, 0.5, text, control=control)
    assert torch.equal(before, after)


def test_control_tap_indices_eight_layers_four_blocks():
    torch.manual_seed(7)
    model = WorldModel(tiny_config(num_layers=8))
    attach_control_branch(model, num_blocks=4, control_channels=4)
    assert model.control_tap_indices() == [2, 4, 6, 8]


def test_control_too_many_blocks_rejected():
    model = WorldModel(tiny_config(num_layers=2))
    with pytest.raises(ValueError):
        attach_control_branch(model, num_blocks=3, control_channels=4)


def test_frozen_base_unchanged_after_control_step():
    model = _control_model()
    freeze_base_for_control(model)
    latent, mask, text = _inputs(model)
    control = torch.randn(latent.shape[0], 4, latent.shape[2], latent.shape[3])
    base_before = {k: v.clone() for k, v in model.state_dict().items()
                   if not k.startswith("control_")}
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    out = model(latent, mask, 0.5, text, control=control)
    ((out - 1.0) ** 2).mean().backward()
    opt.step()
    for k, v in model.state_dict().items():
        if not k.startswith("control_"):
            assert torch.equal(v, base_before[k]), k


def test_control_branch_blocks_are_copies():
    model = _control_model(num_layers=4, num_blocks=2)
    for i in range(2):
        for (nc, pc), (nm, pm) in zip(model.control_blocks[i].named_parameters(),
                                      model.blocks[i].named_parameters()):
            assert nc == nm and torch.equal(pc, pm)


# -- multiview ---------------------------------------------------------------------


def test_pack_seven_views_of_eight_frames():
    views = [torch.rand(8, 4, 2, 2) for _ in range(7)]
    emb = torch.rand(7, 7)
    packed = pack_multiview(views, emb)
    assert packed.shape == (56, 11, 2, 2)


def test_single_view_packing_is_identity_plus_channels():
    view = torch.rand(3, 4, 2, 2)
    emb = torch.rand(1, 7)
    packed = pack_multiview([view], emb)
    assert torch.equal(packed[:, :4], view)
    assert packed.shape == (3, 11, 2, 2)
    for t in range(3):
        for c in range(7):
            assert torch.all(packed[t, 4 + c] == emb[0, c])


def test_multiview_round_trip():
    views = [torch.rand(4, 3, 2, 2) for _ in range(3)]
    emb = torch.rand(3, 7)
    unpacked = unpack_multiview(pack_multiview(views, emb), 3)
    for a, b in zip(unpacked, views):
        assert torch.equal(a, b)


def test_heterogeneous_views_rejected():
    with pytest.raises(ValueError):
        pack_multiview([torch.rand(2, 3, 2, 2), torch.rand(3, 3, 2, 2)], torch.rand(2, 7))


def test_multiview_rope_restarts_per_view():
    from worldflow.worldmodel import MultiviewConfig

    torch.manual_seed(8)
    cfg = tiny_config(latent_channels=10, multiview=MultiviewConfig(num_views=2))
    model = WorldModel(cfg)
    coords = model._coords(6, 1, 1)  # 2 views x 3 frames
    assert coords[:, 0].tolist() == [0, 1, 2, 0, 1, 2]


def test_multiview_forward_shape():
    from worldflow.worldmodel import MultiviewConfig

    torch.manual_seed(9)
    cfg = tiny_config(latent_channels=4 + 7, multiview=MultiviewConfig(num_views=2))
    model = WorldModel(cfg)
    views = [torch.rand(2, 4, 4, 4) for _ in range(2)]
    packed = model.pack_views(views)
    text = torch.randn(2, cfg.text_width)
    out = model(packed, np.zeros(4, dtype=np.int8), 0.5, text)
    assert out.shape == packed.shape


# -- gradient audit (small version; the full audit lives in acceptance) -------------


def audit_config() -> ModelConfig:
    return ModelConfig(num_layers=1, model_dim=8, ffn_dim=4, adaln_lora_dim=2,
                       num_heads=1, head_dim=8, latent_channels=2, text_width=4)


def finite_difference_audit(n_coords: int, seed: int = 0, step: float = 1e-3):
    """Central finite differences vs autograd on randomly sampled coordinates."""
    from worldflow.flowmatch import fm_loss

    torch.manual_seed(seed)
    model = WorldModel(audit_config()).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)  # move off the zero-init manifold
    gen = torch.Generator().manual_seed(seed + 1)
    latent = torch.randn(2, 2, 2, 2, generator=gen, dtype=torch.float64)
    target = torch.randn(2, 2, 2, 2, generator=gen, dtype=torch.float64)
    text = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    mask = build_condition_mask(1, 2)
    loss_mask = 1 - mask

    def loss_value():
        return fm_loss(model(latent, mask, 0.5, text), target, loss_mask)

    loss = loss_value()
    loss.backward()
    params = [(name, p) for name, p in model.named_parameters()]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in params])
    flat_ids = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    results = []
    for fid in flat_ids:
        pi = int(np.searchsorted(np.cumsum(sizes), fid, side="right"))
        offset = int(fid - (np.cumsum(sizes)[pi - 1] if pi else 0))
        name, p = params[pi]
        analytic = float(p.grad.reshape(-1)[offset])
        with torch.no_grad():
            flat = p.reshape(-1)
            orig = float(flat[offset])
            flat[offset] = orig + step
            up = float(loss_value())
            flat[offset] = orig - step
            down = float(loss_value())
            flat[offset] = orig
        fd = (up - down) / (2 * step)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        results.append((name, analytic, fd, rel))
    return results


def test_gradient_audit_sampled():
    results = finite_difference_audit(60)
    ok = sum(1 for _, _, _, rel in results if rel <= 1e-3)
    assert ok / len(results) >= 0.95, [r for r in results if r[3] > 1e-3][:5]


def test_audit_model_is_tiny():
    model = WorldModel(audit_config())
    assert count_parameters(model) <= 1000, count_parameters(model)
