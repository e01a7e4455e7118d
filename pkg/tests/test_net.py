import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vcmpost.errors import ConfigurationError, ShapeMismatchError
from vcmpost.net import (
    RRDB,
    DenseBlock,
    NetConfig,
    build_network,
    dense_block_forward,
    forward,
    frame_to_tensor,
    parameter_count,
    rrdb_forward,
    tensor_to_frame,
)

from conftest import make_frame


def test_config_defaults_are_valid():
    NetConfig().validate()


@pytest.mark.parametrize("field,value", [
    ("base_width", 0),
    ("growth", -1),
    ("num_rrdb", -1),
    ("dense_layers_per_block", 0),
    ("residual_scale", 0.0),
    ("residual_scale", 1.5),
    ("leaky_slope", -0.1),
])
def test_config_rejects_bad_values(field, value):
    config = NetConfig(**{field: value})
    with pytest.raises(ConfigurationError, match=field):
        config.validate()


@pytest.mark.parametrize("config", [
    NetConfig(),
    NetConfig(base_width=16, growth=8, num_rrdb=1),
    NetConfig(base_width=24, growth=12, num_rrdb=2, dense_layers_per_block=4),
    NetConfig(base_width=8, growth=4, num_rrdb=1, dense_blocks_per_rrdb=2),
])
def test_parameter_count_matches_torch(config):
    net = build_network(config, seed=0)
    actual = sum(p.numel() for p in net.parameters())
    assert parameter_count(config) == actual


def test_build_is_deterministic(small_config):
    a = build_network(small_config, seed=3)
    b = build_network(small_config, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_build_seed_changes_weights(small_config):
    a = build_network(small_config, seed=0)
    b = build_network(small_config, seed=1)
    assert any(not torch.equal(pa, pb)
               for pa, pb in zip(a.parameters(), b.parameters()))


def test_init_layout(tiny_net):
    """Tail conv starts at zero, all biases start at zero, everything
    else lands inside the scaled-uniform bound."""
    for name, p in tiny_net.named_parameters():
        if name.startswith("tail") or p.ndim == 1:
            assert torch.count_nonzero(p) == 0, name
        else:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            bound = 0.1 * (1.0 / fan_in) ** 0.5
            assert p.abs().max() <= bound, name
            assert torch.count_nonzero(p) > 0, name


def test_identity_at_init_is_bit_exact(tiny_net, rng):
    for _ in range(3):
        x = make_frame(rng, 24, 17)
        assert np.array_equal(forward(tiny_net, x), x)


def test_output_stays_in_unit_range(tiny_net, rng):
    with torch.no_grad():
        for p in tiny_net.parameters():
            p.add_(torch.randn_like(p) * 0.5)
    x = make_frame(rng)
    out = forward(tiny_net, x)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, x)


def test_forward_preserves_shape_and_dtype(tiny_net, rng):
    x = make_frame(rng, 21, 33)
    out = forward(tiny_net, x)
    assert out.shape == x.shape
    assert out.dtype == np.float32


def test_forward_rejects_wrong_channel_count(tiny_net):
    bad = torch.zeros(1, 4, 8, 8)
    with pytest.raises(ShapeMismatchError):
        tiny_net(bad)


def _zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def test_dense_block_zero_weights_is_identity():
    block = _zeroed(DenseBlock(16, 8, 5, 0.2, 0.2))
    x = torch.randn(1, 16, 8, 8)
    assert torch.equal(block(x), x)


def test_dense_block_concatenation_widths():
    w, g, n = 16, 8, 5
    block = DenseBlock(w, g, n, 0.2, 0.2)
    in_channels = [conv.weight.shape[1] for conv in block.convs]
    assert in_channels == [w + i * g for i in range(n)]
    assert block.convs[-1].weight.shape[0] == w


def test_dense_block_residual_scale():
    """Output minus input is the scaled last-conv response, so halving
    the last conv's weights halves the residual."""
    block = DenseBlock(16, 8, 5, 0.2, 0.2)
    with torch.no_grad():
        for p in block.parameters():
            p.normal_(0.0, 0.05)
    x = torch.randn(1, 16, 8, 8)
    r1 = block(x) - x
    with torch.no_grad():
        block.convs[-1].weight.mul_(0.5)
        block.convs[-1].bias.mul_(0.5)
    r2 = block(x) - x
    assert torch.allclose(r1, 2.0 * r2, atol=1e-6)


def test_rrdb_zero_weights_is_identity():
    rrdb = _zeroed(RRDB(16, 8, 3, 5, 0.2, 0.2))
    x = np.random.default_rng(1).normal(size=(16, 6, 6)).astype(np.float32)
    out = rrdb_forward(rrdb, x)
    assert np.array_equal(np.asarray(out.detach()), x)


def test_dense_block_forward_accepts_unbatched_numpy():
    block = _zeroed(DenseBlock(16, 8, 5, 0.2, 0.2))
    x = np.random.default_rng(2).normal(size=(16, 6, 6)).astype(np.float32)
    out = dense_block_forward(block, x)
    assert out.shape == (16, 6, 6)
    assert np.array_equal(np.asarray(out.detach()), x)


def test_frame_tensor_round_trip(rng):
    x = make_frame(rng, 10, 12)
    t = frame_to_tensor(x)
    assert t.shape == (1, 3, 10, 12)
    back = tensor_to_frame(t)
    assert np.array_equal(back, x)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(8, 40), w=st.integers(8, 40), seed=st.integers(0, 10_000))
def test_identity_at_init_property(h, w, seed):
    net = build_network(NetConfig(base_width=8, growth=4, num_rrdb=1,
                                  dense_blocks_per_rrdb=2), seed=0)
    x = np.random.default_rng(seed).uniform(0, 1, (h, w, 3)).astype(np.float32)
    assert np.array_equal(forward(net, x), x)
