import struct
import zipfile
from dataclasses import replace

import numpy as np
import pytest
import torch

from eventransact.gradcheck import TINY_CONFIG
from eventransact.model import (
    VTN,
    ModelConfig,
    classify,
    count_params,
    forward,
    load_model,
    model_from_tensors,
    project,
    read_tensors,
    save_model,
    spatial_encode,
    temporal_encode,
    windowed_attention,
    write_tensors,
)

from oracles import dense_temporal

TINY = TINY_CONFIG


def randomised(config, seed, scale=0.3, dtype=torch.float64):
    """Model with every parameter drawn away from its (mostly zero) init."""
    model = VTN(config, seed=seed).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=dtype) * scale
            p.copy_((1.0 if name.endswith("norm1.weight") or name.endswith("norm2.weight") else 0.0) + noise)
    return model.eval()


def clip(config, seed=0, n=None):
    rng = np.random.default_rng(seed)
    n = config.clip_len if n is None else n
    return rng.random((n, config.image_size, config.image_size, config.in_channels))


def params64(model):
    return {k: v.detach().double().numpy() for k, v in model.named_parameters()}


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "change",
    [
        {"image_size": 30},
        {"embed_dim": 10, "spatial_heads": 4},
        {"temporal_heads": 3},
        {"attention_window": 0},
        {"proj_dim": 0},
        {"dropout": 1.0},
    ],
)
def test_config_validation(change):
    with pytest.raises(ValueError):
        replace(TINY, **change)


def test_full_size_defaults():
    cfg = ModelConfig()
    assert (cfg.temporal_layers, cfg.temporal_heads, cfg.proj_dim, cfg.clip_len) == (3, 8, 128, 16)
    assert cfg.attention_window == 8


# -- spatial encoder ---------------------------------------------------------


def test_spatial_shape():
    model = VTN(TINY, seed=0).eval()
    assert tuple(spatial_encode(model, clip(TINY)).shape) == (4, 8)


def test_spatial_permutation_equivariance():
    model = randomised(TINY, 1)
    x = clip(TINY, 1)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        a = spatial_encode(model, x)
        b = spatial_encode(model, x[perm])
    assert torch.equal(a[perm], b)


def test_zero_clip_gives_identical_embeddings():
    model = randomised(TINY, 2)
    with torch.no_grad():
        e = spatial_encode(model, np.zeros((4, 32, 32, 2)))
    assert all(torch.equal(e[0], e[i]) for i in range(1, 4))


def test_shape_mismatch_rejected():
    model = VTN(TINY, seed=0)
    with pytest.raises(ValueError):
        spatial_encode(model, np.zeros((4, 16, 16, 2)))
    with pytest.raises(ValueError):
        temporal_encode(model, torch.zeros(4, 7))
    with pytest.raises(ValueError):
        temporal_encode(model, torch.zeros(6, 8))


# -- temporal encoder --------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_temporal_matches_dense_oracle(seed):
    cfg = replace(TINY, attention_window=4, temporal_layers=3, temporal_heads=4)
    model = randomised(cfg, seed)
    emb = np.random.default_rng(seed).normal(size=(4, 8))
    with torch.no_grad():
        got = temporal_encode(model, emb).numpy()
    want = dense_temporal(params64(model), emb, 3, 4)
    assert np.abs(got - want).max() <= 1e-5


def test_window_smaller_than_sequence_differs_from_dense():
    cfg = replace(TINY, attention_window=1, clip_len=6)
    model = randomised(cfg, 3)
    emb = np.random.default_rng(3).normal(size=(6, 8))
    with torch.no_grad():
        got = temporal_encode(model, emb).numpy()
    assert np.abs(got - dense_temporal(params64(model), emb, 2, 2)).max() > 1e-6


def test_single_frame_sequence():
    model = randomised(TINY, 4)
    emb = np.random.default_rng(4).normal(size=(1, 8))
    with torch.no_grad():
        a = temporal_encode(model, emb)
        b = temporal_encode(model, emb)
    assert torch.isfinite(a).all() and torch.equal(a, b)
    assert np.abs(a.numpy() - dense_temporal(params64(model), emb, 2, 2)).max() <= 1e-10


def test_no_temporal_layers_returns_cls_embedding():
    model = randomised(replace(TINY, temporal_layers=0), 5)
    with torch.no_grad():
        out = temporal_encode(model, torch.randn(4, 8, dtype=torch.float64))
        expected = model.temporal.cls_token + model.temporal.pos_embed[0]
    assert torch.equal(out, expected)


@pytest.mark.parametrize("window", [1, 2, 3])
def test_attention_window_locality(window):
    gen = torch.Generator().manual_seed(window)
    L = 10
    q, k, v = (torch.randn(1, 2, L, 4, generator=gen, dtype=torch.float64) for _ in range(3))
    base = windowed_attention(q, k, v, window)
    for t in range(1, L):
        for tp in range(1, L):
            if abs(t - tp) <= window:
                continue
            k2, v2 = k.clone(), v.clone()
            k2[:, :, tp] = 0
            v2[:, :, tp] = 0
            out = windowed_attention(q, k2, v2, window)
            assert torch.equal(out[:, :, t], base[:, :, t])


def test_cls_attends_globally():
    gen = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 1, 8, 4, generator=gen, dtype=torch.float64) for _ in range(3))
    base = windowed_attention(q, k, v, 1)
    v2 = v.clone()
    v2[:, :, 7] += 1.0
    out = windowed_attention(q, k, v2, 1)
    assert not torch.equal(out[:, :, 0], base[:, :, 0])
    assert not torch.equal(out[:, :, 7], base[:, :, 7])


# -- heads -------------------------------------------------------------------


def test_classify_zero_weights():
    model = VTN(TINY, seed=0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        assert torch.equal(classify(model, torch.randn(8)), torch.zeros(3))


def test_classify_identity():
    cfg = replace(TINY, num_classes=8)
    model = VTN(cfg, seed=0)
    x = torch.randn(8)
    with torch.no_grad():
        model.head.weight.copy_(torch.eye(8))
        model.head.bias.zero_()
        assert torch.equal(classify(model, x), x)


def test_classify_finite_for_random_params():
    model = randomised(TINY, 6)
    with torch.no_grad():
        assert torch.isfinite(classify(model, torch.randn(8, dtype=torch.float64))).all()


def test_project_shapes_and_sharing():
    model = VTN(TINY, seed=0)
    e = torch.randn(8).expand(4, 8)
    with torch.no_grad():
        z = project(model, e)
    assert tuple(z.shape) == (4, 4)
    assert all(torch.equal(z[0], z[i]) for i in range(4))


def test_project_zero_final_layer_returns_bias():
    model = VTN(TINY, seed=0)
    b = torch.tensor([1.0, -2.0, 0.5, 3.0])
    with torch.no_grad():
        model.projector[2].weight.zero_()
        model.projector[2].bias.copy_(b)
        z = project(model, torch.randn(4, 8))
    assert torch.equal(z, b.expand(4, 4))


# -- forward -----------------------------------------------------------------


def test_eval_mode_returns_logits_only():
    model = VTN(TINY, seed=0)
    out = forward(model, clip(TINY), mode="eval")
    assert set(out) == {"logits"} and tuple(out["logits"].shape) == (3,)
    assert model.training  # state restored


def test_train_mode_identical_views():
    model = randomised(TINY, 7)
    x = clip(TINY, 7)
    out = forward(model, x, x, mode="train")
    assert torch.equal(out["proj1"], out["proj2"])
    assert tuple(out["proj1"].shape) == (4, 4)


def test_logits_depend_only_on_first_view():
    model = randomised(TINY, 8)
    x = clip(TINY, 8)
    a = forward(model, x, clip(TINY, 9), mode="train")
    b = forward(model, x, clip(TINY, 10), mode="train")
    assert torch.equal(a["logits"], b["logits"])
    assert not torch.equal(a["proj2"], b["proj2"])


def test_forward_batched():
    model = VTN(TINY, seed=0)
    x = np.stack([clip(TINY, 1), clip(TINY, 2)])
    out = forward(model, x, x, mode="train")
    assert tuple(out["logits"].shape) == (2, 3) and tuple(out["proj1"].shape) == (2, 4, 4)


def test_forward_rejects_bad_mode():
    with pytest.raises(ValueError):
        forward(VTN(TINY), clip(TINY), mode="infer")


def test_eval_forward_deterministic():
    model = randomised(TINY, 11, dtype=torch.float32)
    x = clip(TINY, 11)
    a = forward(model, x, mode="eval")["logits"]
    b = forward(model, x, mode="eval")["logits"]
    assert torch.equal(a, b)


def test_dropout_only_in_train_mode():
    cfg = replace(TINY, dropout=0.5)
    model = VTN(cfg, seed=0)
    x = clip(cfg)
    torch.manual_seed(0)
    e1 = forward(model, x, mode="eval")["logits"]
    e2 = forward(model, x, mode="eval")["logits"]
    assert torch.equal(e1, e2)
    t1 = forward(model, x, x, mode="train")["proj1"]
    t2 = forward(model, x, x, mode="train")["proj1"]
    assert not torch.equal(t1, t2)


def test_no_nan_at_init_for_unit_inputs():
    cfg = ModelConfig(image_size=64, embed_dim=64, spatial_depth=2, spatial_heads=4, clip_len=8,
                      num_classes=4, proj_hidden=128)
    model = VTN(cfg, seed=0)
    for x in (np.zeros((8, 64, 64, 2)), np.ones((8, 64, 64, 2)), clip(cfg, 3)):
        out = forward(model, x, x, mode="train")
        assert all(torch.isfinite(v).all() for v in out.values())


# -- parameter counts --------------------------------------------------------


def test_classify_head_count():
    assert count_params(replace(TINY, embed_dim=8, num_classes=11), "classify") == 99


def test_count_monotone_in_temporal_layers():
    for layers in (1, 2, 3, 6):
        a = count_params(replace(TINY, temporal_layers=layers))
        assert count_params(replace(TINY, temporal_layers=2 * layers)) > a


def test_default_count_pinned():
    assert count_params(ModelConfig()) == 107_576_971


@pytest.mark.parametrize(
    "cfg",
    [TINY, replace(TINY, temporal_layers=0), ModelConfig(image_size=64, embed_dim=64, spatial_heads=4,
                                                         spatial_depth=2, clip_len=8, num_classes=4)],
)
def test_count_matches_tensors(cfg):
    model = VTN(cfg)
    assert count_params(cfg) == sum(p.numel() for p in model.parameters())
    parts = {
        "spatial": model.spatial,
        "temporal": model.temporal,
        "classify": model.head,
        "project": model.projector,
    }
    for name, module in parts.items():
        assert count_params(cfg, name) == sum(p.numel() for p in module.parameters())


# -- checkpoints -------------------------------------------------------------


def test_tensor_layout_independent_parse():
    data = write_tensors({"a.b": np.arange(6, dtype="<f4").reshape(2, 3), "c": np.array([7], dtype="<i8")})
    (n,) = struct.unpack_from("<I", data, 0)
    assert data[4 : 4 + n] == b"a.b"
    code, ndim = data[4 + n], data[5 + n]
    dims = struct.unpack_from("<2Q", data, 6 + n)
    assert (code, ndim, dims) == (0, 2, (2, 3))
    payload = np.frombuffer(data, "<f4", 6, 6 + n + 16)
    np.testing.assert_array_equal(payload, np.arange(6))
    back = read_tensors(data)
    assert back["c"].dtype == np.dtype("<i8") and back["c"][0] == 7


def test_model_round_trip(tmp_path):
    model = randomised(TINY, 12, dtype=torch.float32)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    back = load_model(path).eval()
    assert back.config == TINY
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    x = clip(TINY, 12)
    assert torch.equal(forward(model, x, mode="eval")["logits"], forward(back, x, mode="eval")["logits"])
    with zipfile.ZipFile(path) as zf:
        assert {"config.json", "params.bin"} <= set(zf.namelist())


def test_checkpoint_shape_validation():
    tensors = {k: v.numpy() for k, v in VTN(TINY).state_dict().items()}
    tensors["head.weight"] = np.zeros((4, 8), np.float32)
    with pytest.raises(ValueError, match="head.weight"):
        model_from_tensors(TINY, tensors)
    del tensors["head.weight"]
    with pytest.raises(ValueError, match="missing"):
        model_from_tensors(TINY, tensors)


def test_init_ranges():
    model = VTN(ModelConfig(image_size=32, embed_dim=32, spatial_heads=4, spatial_depth=1), seed=0)
    w = model.spatial.blocks[0].attn.qkv.weight
    assert w.abs().max() <= 0.04 and 0.012 < w.std() < 0.02
    assert not model.temporal.cls_token.any() and not model.temporal.pos_embed.any()
    assert not model.head.bias.any()
