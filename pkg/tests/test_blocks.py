import numpy as np
import pytest

from stablemamba.autodiff import Tensor
from stablemamba.blocks import (
    ConfigError,
    build_interleave_schedule,
    init_attention,
    init_mamba_block,
    init_mlp,
    init_transformer_block,
    mamba_block,
    mlp,
    schedule_from_pattern,
    self_attention,
    stable_mamba_stack,
    transformer_block,
)
from stablemamba.params import count, map_tensors

F64 = np.float64


def zeroed(obj):
    return map_tensors(obj, lambda t: Tensor(np.zeros_like(t.data)))


# ---------------------------------------------------------------------------
# attention


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(0)
    p = init_attention(rng, 8, 2, F64)
    p.w_k.data[...] = 0
    p.w_o.data[...] = np.eye(8)
    p.b_o.data[...] = 0
    x = rng.normal(size=(5, 8))
    out, weights = self_attention(Tensor(x), p, return_weights=True)
    np.testing.assert_allclose(weights.data, 0.2, atol=1e-15)
    values = x @ p.w_v.data + p.b_v.data
    np.testing.assert_allclose(out.data, np.broadcast_to(values.mean(axis=0), (5, 8)), atol=1e-14)


def test_single_token_attention():
    rng = np.random.default_rng(1)
    p = init_attention(rng, 6, 3, F64)
    x = rng.normal(size=(1, 6))
    expected = (x @ p.w_v.data + p.b_v.data) @ p.w_o.data + p.b_o.data
    np.testing.assert_allclose(self_attention(Tensor(x), p).data, expected, rtol=1e-13)


def test_attention_rows_stochastic():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = init_attention(rng, 8, 4, F64)
        p = map_tensors(p, lambda t: Tensor(t.data * 50))
        _, weights = self_attention(Tensor(rng.normal(size=(3, 7, 8))), p, return_weights=True)
        assert np.all(weights.data >= 0)
        assert np.max(np.abs(weights.data.sum(-1) - 1)) < 1e-6


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        init_attention(np.random.default_rng(0), 10, 3)


# ---------------------------------------------------------------------------
# mlp and blocks


def test_mlp_zero_and_constant():
    p = zeroed(init_mlp(np.random.default_rng(0), 4, F64))
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    assert np.all(mlp(x, p).data == 0)
    p.b2.data[...] = 2.5
    assert np.all(mlp(x, p).data == 2.5)


def test_zero_blocks_are_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 8))
    t = zeroed(init_transformer_block(rng, 8, 2, F64))
    m = zeroed(init_mamba_block(rng, 8, d_state=4, dtype=F64))
    np.testing.assert_array_equal(transformer_block(Tensor(x), t).data, x)
    np.testing.assert_array_equal(mamba_block(Tensor(x), m).data, x)


@pytest.mark.parametrize("length", [1, 2, 13])
def test_blocks_preserve_shape(length):
    rng = np.random.default_rng(length)
    x = Tensor(rng.normal(size=(length, 8)))
    assert transformer_block(x, init_transformer_block(rng, 8, 2)).shape == (length, 8)
    assert mamba_block(x, init_mamba_block(rng, 8, d_state=4)).shape == (length, 8)


def test_ffn_parameter_count():
    d = 24
    rng = np.random.default_rng(0)
    with_ffn = count(init_mamba_block(rng, d))
    without = count(init_mamba_block(rng, d, with_ffn=False))
    assert count(init_mlp(rng, d)) == 8 * d * d + 5 * d
    # the sub-layer also owns its RMSNorm gain
    assert with_ffn - without == 8 * d * d + 5 * d + d


# ---------------------------------------------------------------------------
# schedule


def test_schedule_default_ratio_middle():
    s = build_interleave_schedule(24, 7, "middle")
    assert s.pattern == "MMMTMMMM" * 3
    assert (s.n_mamba, s.n_transformer) == (21, 3)
    assert str(s) == "MMMTMMMM×3"


def test_schedule_start_end():
    assert build_interleave_schedule(8, 7, "start").pattern == "TMMMMMMM"
    assert build_interleave_schedule(8, 7, "end").pattern == "MMMMMMMT"


@pytest.mark.parametrize("ratio_n", [1, 3, 5, 7, 11])
def test_positions_only_change_order(ratio_n):
    schedules = [build_interleave_schedule(24, ratio_n, pos) for pos in ("start", "middle", "end")]
    assert len({(s.n_mamba, s.n_transformer) for s in schedules}) == 1
    assert schedules[0].n_transformer == 24 // (ratio_n + 1)
    assert all(sorted(s.kinds) == sorted(schedules[0].kinds) for s in schedules)


def test_schedule_errors():
    with pytest.raises(ConfigError) as err:
        build_interleave_schedule(20, 7)
    assert "20" in str(err.value) and "8" in str(err.value)
    with pytest.raises(ConfigError):
        build_interleave_schedule(8, 7, "left")
    with pytest.raises(ConfigError):
        schedule_from_pattern("MXM")


def test_stack_composition():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 8)))
    np.testing.assert_array_equal(stable_mamba_stack(x, schedule_from_pattern(""), []).data, x.data)
    t = init_transformer_block(rng, 8, 2, F64)
    np.testing.assert_array_equal(stable_mamba_stack(x, schedule_from_pattern("T"), [t]).data,
                                  transformer_block(x, t).data)
    with pytest.raises(ConfigError):
        stable_mamba_stack(x, schedule_from_pattern("TT"), [t])
    with pytest.raises(ConfigError):
        stable_mamba_stack(x, schedule_from_pattern("M"), [t])
