import numpy as np
import pytest
import torch

from anchorattack.encoder import encode as ref_encode
from anchorattack.encoder import init_encoder
from anchorattack.encoder import vjp as ref_vjp

from vebridge.models import ModelLoadError, load_model, load_snapshot

from conftest import TOY_CONFIG


def test_snapshot_parses_config_and_parameters(toy_snapshot):
    config, params = load_snapshot(str(toy_snapshot))
    assert config["token_dim"] == 16
    assert config["depth"] == 2
    assert params["patch_w"].shape == (48, 16)
    assert params["pos_embed"].shape == (5, 16)


def test_micro_reimplementation_matches_reference(toy_model, rng):
    # independent torch implementation of the same function, loaded from the
    # same parameter container: agreement at float64 precision
    state = init_encoder(TOY_CONFIG)
    for _ in range(3):
        x = rng.uniform(0, 1, size=(3, 8, 8))
        features, profile = ref_encode(state, x)
        patch_tokens, class_token, rows = toy_model.encode(x)
        assert np.abs(patch_tokens - features.patch_tokens).max() <= 1e-12
        assert np.abs(class_token - features.class_token).max() <= 1e-12
        assert np.abs(rows - profile.rows).max() <= 1e-12

        cot_p = rng.normal(size=(4, 16))
        cot_c = rng.normal(size=16)
        grad_ref = ref_vjp(state, x, cot_p, cot_c)
        grad = toy_model.vjp(x, cot_p, cot_c)
        assert np.abs(grad - grad_ref).max() <= 1e-12


def test_declared_dims_match_replies(vit_model, rng):
    x = rng.uniform(0, 1, size=vit_model.input_shape).astype(np.float32)
    patch_tokens, class_token, rows = vit_model.encode(x)
    assert patch_tokens.shape == (vit_model.n, vit_model.d)
    assert class_token.shape == (vit_model.d,)
    assert rows.shape == (vit_model.layers, vit_model.heads, vit_model.n + 1)
    assert vit_model.attention_layers == tuple(range(vit_model.layers))


def test_vit_attention_rows_are_probability_vectors(vit_model, rng):
    x = rng.uniform(0, 1, size=vit_model.input_shape).astype(np.float32)
    _, _, rows = vit_model.encode(x)
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
    assert rows.min() >= 0.0


def test_vit_hook_matches_need_weights_path(rng):
    # the recomputed class row equals what the attention module itself
    # reports when asked for per-head weights
    from torchvision.models.vision_transformer import VisionTransformer

    torch.manual_seed(0)
    net = VisionTransformer(
        image_size=32, patch_size=8, num_layers=3, num_heads=4,
        hidden_dim=48, mlp_dim=96, num_classes=10,
    )
    net.eval()
    model = load_model("vit_test")
    x = rng.uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
    _, _, rows = model.encode(x)

    seq = net._process_input(torch.from_numpy(x)[None])
    seq = torch.cat([net.class_token.expand(1, -1, -1), seq], dim=1)
    seq = seq + net.encoder.pos_embedding
    u = net.encoder.layers[0].ln_1(net.encoder.dropout(seq))
    with torch.no_grad():
        _, weights = net.encoder.layers[0].self_attention(
            u, u, u, need_weights=True, average_attn_weights=False
        )
    np.testing.assert_allclose(rows[0], weights[0, :, 0, :].numpy(), atol=1e-6)


def test_vjp_zero_cotangent(vit_model):
    x = np.zeros(vit_model.input_shape, dtype=np.float32)
    grad = vit_model.vjp(x, np.zeros((vit_model.n, vit_model.d)), np.zeros(vit_model.d))
    assert np.abs(grad).max() == 0.0


def test_wrong_image_shape_raises(vit_model):
    with pytest.raises(ValueError):
        vit_model.encode(np.zeros((3, 7, 7), dtype=np.float32))


def test_unknown_model_refused():
    with pytest.raises(ModelLoadError):
        load_model("resnet50")
    with pytest.raises(ModelLoadError):
        load_model("micro:/nonexistent/snapshot.aenc")
    with pytest.raises(ModelLoadError):
        load_model("micro")  # no snapshot path


def test_cli_refuses_bad_model(capsys):
    from vebridge.cli import main

    assert main(["serve", "--model", "bogus-model"]) == 1
    assert "ERROR:" in capsys.readouterr().err
