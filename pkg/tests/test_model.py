import numpy as np
import pytest
import torch

from conftest import random_tokens
from hmrmerge.model import (Backbone, ModelConfig, ModelError, NumericalInstability, batch_trace, forward,
                            forward_with_trace, layer_size, load_backbone, predict_batch, replace_layers,
                            save_backbone, train_backbone, zero_layers)
from hmrmerge.token_merge import MergeSchedule, TokenState


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(depth=0)
    with pytest.raises(ModelError):
        ModelConfig(token_dim=30, heads=4)
    with pytest.raises(ModelError):
        ModelConfig(tokens_per_frame=15)
    with pytest.raises(ModelError):
        ModelConfig(feature_dim=0)


def test_layer_vectors_homogeneous(tiny_model, tiny_cfg):
    sizes = {tiny_model.layer_params(i).shape for i in range(tiny_model.depth)}
    assert sizes == {(layer_size(tiny_cfg),)}
    d, h = tiny_cfg.token_dim, tiny_cfg.ff_dim
    assert layer_size(tiny_cfg) == 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + d * h + h + h * d + d


def test_forward_deterministic(tiny_model, tiny_cfg):
    tok = TokenState.initial(random_tokens(tiny_cfg, 1)[0])
    a, b = forward(tiny_model, tok), forward(tiny_model, tok)
    assert np.array_equal(a.feature, b.feature) and np.all(np.isfinite(a.feature))
    assert a.feature.shape == (tiny_cfg.feature_dim,) and a.shape.shape == (tiny_cfg.n_shape,)
    assert np.allclose(np.linalg.norm(a.pose.twists, axis=1), 1.0)


def test_forward_token_count_errors(tiny_model, tiny_cfg):
    with pytest.raises(ModelError):
        forward(tiny_model, TokenState.initial(np.zeros((14, tiny_cfg.input_dim))))
    with pytest.raises(ModelError):
        forward(tiny_model, TokenState.initial(np.zeros((16, tiny_cfg.input_dim + 1))))


def test_nan_names_layer(tiny_model, tiny_cfg):
    bad = tiny_model
    with torch.no_grad():
        bad.layers[2][layer_size(tiny_cfg) - 1] = float("nan")  # ff2 bias of layer 2
    with pytest.raises(NumericalInstability) as info:
        forward(bad, TokenState.initial(random_tokens(tiny_cfg, 1)[0]))
    assert info.value.layer == 2


def test_zero_layers_are_identity(tiny_model, tiny_cfg):
    zero = zero_layers(tiny_model, range(tiny_cfg.depth))
    x = random_tokens(tiny_cfg, 3)
    trace = batch_trace(zero, x)
    emb = zero.embed(torch.as_tensor(x)).detach().numpy()
    for t in trace:
        assert np.array_equal(t, emb)


def test_merge_plan_exit_count():
    cfg = ModelConfig(depth=4, token_dim=8, heads=2, ff_dim=16, feature_dim=6, queries=2)
    model = Backbone(cfg)
    tokens = random_tokens(cfg, 1)[0]
    out = forward(model, TokenState.initial(tokens), MergeSchedule(layers=3, per_layer=40, floor=90))
    assert out.token_count == 90
    person = np.zeros(196, bool)
    person[:60] = True
    out = forward(model, TokenState.initial(tokens, person), MergeSchedule(layers=3, per_layer=40, floor=90))
    assert out.token_count == 90
    assert forward(model, TokenState.initial(tokens)).token_count == 196


def test_trace_structure_and_last_entry(tiny_model, tiny_cfg):
    x = random_tokens(tiny_cfg, 1)[0]
    trace = forward_with_trace(tiny_model, x)
    assert len(trace) == tiny_cfg.depth and all(t.shape == (16, tiny_cfg.token_dim) for t in trace)
    with torch.no_grad():
        final = tiny_model.trunk(torch.as_tensor(x)[None])[0].numpy()
    assert np.array_equal(trace[-1], final)


def test_trace_duplicated_layers(tiny_model, tiny_cfg):
    with torch.no_grad():
        tiny_model.layers[2].copy_(tiny_model.layers[1])
    x = random_tokens(tiny_cfg, 1)[0]
    trace = forward_with_trace(tiny_model, x)
    with torch.no_grad():
        again = tiny_model.apply_layer(tiny_model.layers[2], torch.as_tensor(trace[1])[None])[0].numpy()
    assert np.array_equal(again, trace[2])


def test_replace_layers(tiny_model, tiny_cfg):
    merged = np.full(layer_size(tiny_cfg), 0.5)
    out = replace_layers(tiny_model, 1, 2, merged)
    assert out.depth == 3 and tiny_model.depth == 4
    assert np.array_equal(out.layer_params(1), merged)
    assert np.array_equal(out.layer_params(0), tiny_model.layer_params(0))
    assert np.array_equal(out.layer_params(2), tiny_model.layer_params(3))
    assert replace_layers(tiny_model, 0, 3, merged).depth == 1
    for lo, hi in [(-1, 2), (2, 2), (1, 4)]:
        with pytest.raises(ModelError):
            replace_layers(tiny_model, lo, hi, merged)


def test_replace_zero_region_keeps_output(tiny_model, tiny_cfg):
    zeroed = zero_layers(tiny_model, [1, 2])
    merged = replace_layers(zeroed, 1, 2, np.zeros(layer_size(tiny_cfg)))
    x = random_tokens(tiny_cfg, 5)
    assert np.array_equal(predict_batch(zeroed, x)[0], predict_batch(merged, x)[0])


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_cfg):
    x = random_tokens(tiny_cfg, 4)
    model = replace_layers(tiny_model, 0, 1, tiny_model.layer_params(1))
    path = save_backbone(model, tmp_path / "m.npz")
    loaded = load_backbone(path)
    assert loaded.depth == 3
    assert np.array_equal(predict_batch(model, x)[1], predict_batch(loaded, x)[1])


def test_training_reduces_loss(tiny_cfg):
    model = Backbone(tiny_cfg)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 16, tiny_cfg.input_dim))
    w = rng.normal(size=(tiny_cfg.input_dim, tiny_cfg.pose_dim)) * 0.3
    poses = x.mean(1) @ w
    shapes = rng.normal(size=(64, tiny_cfg.n_shape)) * 0.1
    log = train_backbone(model, x, poses, shapes, epochs=15, lr=3e-3, batch=16)
    assert log.losses[-1] < log.losses[0]
    again = train_backbone(Backbone(tiny_cfg), x, poses, shapes, epochs=15, lr=3e-3, batch=16)
    assert again.losses == log.losses
