import math

import numpy as np
import pytest

from emkit.emformer import (
    BlockConfig,
    ModelConfig,
    ParamInit,
    attention,
    emformer_block,
    encode_decode,
    init_block,
    init_model,
    load_checkpoint,
    mha,
    pair_tokens,
    patch_embed,
    save_checkpoint,
    unpair_tokens,
    window_merge,
    window_partition,
)
from emkit.errors import ConfigError, ShapeError
from emkit.tensor import ops
from emkit.tensor.core import Tensor
from emkit.tensor.tape import Tape, grad_check


def _rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


# numpy reference pieces

def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def loop_mha(q, k, v, heads):
    B, T, C = q.shape
    d = C // heads
    out = np.zeros_like(q)
    for b in range(B):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            for i in range(T):
                s = np.array([sum(q[b, i, sl][c] * k[b, j, sl][c] for c in range(d))
                              for j in range(k.shape[1])]) / math.sqrt(d)
                p = np.exp(s - s.max())
                p /= p.sum()
                out[b, i, sl] = sum(p[j] * v[b, j, sl] for j in range(k.shape[1]))
    return out


def plain_block(x, P, prefix, heads):
    """Conv-free transformer block with global attention, all numpy."""
    g = lambda n: P[f"{prefix}.{n}"].data
    C = x.shape[-1]
    z = x @ g("qkv.w") + g("qkv.b")
    a = loop_mha(z[..., :C], z[..., C:2 * C], z[..., 2 * C:], heads)
    a = a @ g("proj.w") + g("proj.b")
    A = np_ln(a, g("ln1.g"), g("ln1.b")) + x
    m = np_gelu(A @ g("mlp1.w") + g("mlp1.b")) @ g("mlp2.w") + g("mlp2.b")
    return np_ln(m, g("ln2.g"), g("ln2.b")) + A


def _block_params(C, seed=0, scale=0.01):
    init = ParamInit(seed)
    init_block(init, "b", C, 2, scale)
    return init.params


def test_patch_embed_counts_and_errors():
    P = init_model(ModelConfig(variables=2, height=8, width=8, dim=8, heads=2, depth=0, blocks=2,
                               windows=((4, 4),)), 0)
    assert patch_embed(_rand((1, 2, 8, 8)), P, 2).shape == (1, 16, 8)
    with pytest.raises(ShapeError):
        patch_embed(_rand((1, 2, 9, 8)), P, 2)


def test_patch_embed_identity_and_zero():
    init = ParamInit(0)
    init.array("embed.w", np.eye(3))
    init.array("embed.b", np.zeros(3))
    init.array("pos", np.zeros((4, 3)))
    x = _rand((1, 3, 2, 2))
    t = patch_embed(x, init.params, 1)
    np.testing.assert_array_equal(t.data[0], x.data[0].reshape(3, 4).T)
    assert np.all(patch_embed(Tensor(np.zeros((1, 3, 2, 2))), init.params, 1).data == 0)


def test_window_roundtrip_and_errors():
    x = _rand((2, 4, 8, 3))
    w = window_partition(x, 2, 2)
    assert w.shape == (16, 4, 3)
    assert window_partition(_rand((1, 4, 4, 1)), 2, 2).shape == (4, 4, 1)
    np.testing.assert_array_equal(window_merge(w, 2, 4, 8, 2, 2).data, x.data)
    for wh, ww in ((4, 4), (2, 8), (4, 2)):
        np.testing.assert_array_equal(window_merge(window_partition(x, wh, ww), 2, 4, 8, wh, ww).data, x.data)
    with pytest.raises(ShapeError):
        window_partition(_rand((1, 4, 4, 2)), 2, 8)


def test_mha_loop_oracle():
    q, k, v = _rand((2, 5, 6), 1), _rand((2, 7, 6), 2), _rand((2, 7, 6), 3)
    np.testing.assert_allclose(mha(q, k, v, 3).data, loop_mha(q.data, k.data, v.data, 3), rtol=0, atol=1e-12)


def test_mha_single_token_and_uniform_keys():
    q, k, v = _rand((1, 3, 4), 1), _rand((1, 1, 4), 2), _rand((1, 1, 4), 3)
    np.testing.assert_allclose(mha(q, k, v, 2).data, np.broadcast_to(v.data, (1, 3, 4)), atol=1e-15)
    k = Tensor(np.ones((1, 6, 4)))
    _, p = attention(q, k, _rand((1, 6, 4)), 2, return_weights=True)
    np.testing.assert_allclose(p.data, 1 / 6, atol=1e-15)
    with pytest.raises(ShapeError):
        mha(q, _rand((1, 2, 5)), _rand((1, 2, 5)), 2)


def test_block_config_validation():
    with pytest.raises(ConfigError):
        BlockConfig(6, 4)
    with pytest.raises(ConfigError):
        BlockConfig(8, 2, "local")
    with pytest.raises(ConfigError):
        BlockConfig(8, 2, "windowed", (2, 2))


def test_identity_kernel_collapse():
    C, heads, grid = 8, 2, (4, 4)
    P = _block_params(C)
    P["b.k3"] = Tensor(np.zeros_like(P["b.k3"].data))
    P["b.k5"] = Tensor(np.zeros_like(P["b.k5"].data))
    x = _rand((2, 16, C), 5)
    out = emformer_block(x, P, BlockConfig(C, heads), grid, "b")
    bypass = emformer_block(x, P, BlockConfig(C, heads, use_conv=False), grid, "b")
    assert np.max(np.abs(out.data - bypass.data)) <= 1e-12
    assert np.max(np.abs(out.data - plain_block(x.data, P, "b", heads))) <= 1e-12


def test_conv_changes_output_when_kernels_nonzero():
    C = 8
    P = _block_params(C, scale=0.1)
    x = _rand((1, 16, C), 6)
    a = emformer_block(x, P, BlockConfig(C, 2), (4, 4), "b")
    b = emformer_block(x, P, BlockConfig(C, 2, use_conv=False), (4, 4), "b")
    assert np.max(np.abs(a.data - b.data)) > 1e-6


def test_zero_projections_give_residual_identity():
    C = 8
    P = _block_params(C)
    for n in ("proj", "mlp2"):
        P[f"b.{n}.w"] = Tensor(np.zeros_like(P[f"b.{n}.w"].data))
    x = _rand((1, 32, C), 7)
    # zero branch -> LN gives its (zero) bias, so only the residual survives
    for cfg in (BlockConfig(C, 2), BlockConfig(C, 2, "windowed", (2, 8))):
        np.testing.assert_array_equal(emformer_block(x, P, cfg, (4, 8), "b").data, x.data)


@pytest.mark.parametrize("mode,window,grid", [("global", (4, 4), (4, 4)), ("windowed", (2, 8), (4, 8)),
                                              ("windowed", (8, 2), (8, 4))])
def test_block_shape_preserved(mode, window, grid):
    C = 8
    P = _block_params(C)
    x = _rand((2, grid[0] * grid[1], C), 8)
    assert emformer_block(x, P, BlockConfig(C, 2, mode, window), grid, "b").shape == x.shape


def test_block_rejects_bad_grid():
    P = _block_params(8)
    with pytest.raises(ShapeError):
        emformer_block(_rand((1, 15, 8)), P, BlockConfig(8, 2), (4, 4), "b")


def test_processor_alternation():
    cfg = ModelConfig()
    modes = [cfg.processor_block(i) for i in range(cfg.blocks)]
    assert [m.attn_mode for m in modes] == ["windowed", "global"] * 3
    assert [m.window for m in modes[::2]] == [(4, 4), (2, 8), (8, 2)]


def test_pruning_halves_tokens():
    cfg = ModelConfig(variables=1, height=8, width=8, patch=1, dim=8, heads=2, depth=1, blocks=2,
                      windows=((4, 4),))
    grids, _ = cfg.plan()
    assert grids[0][0] * grids[0][1] == 64 and grids[1][0] * grids[1][1] == 32


def test_pair_unpair_layout():
    x = _rand((1, 8, 3))
    g = x.data.reshape(2, 4, 3)
    rows = pair_tokens(x, (2, 4), 0)
    np.testing.assert_array_equal(rows.data[0, 1], np.concatenate([g[0, 1], g[1, 1]]))
    cols = pair_tokens(x, (2, 4), 1)
    np.testing.assert_array_equal(cols.data[0, 3], np.concatenate([g[1, 2], g[1, 3]]))
    np.testing.assert_array_equal(unpair_tokens(rows, (1, 4), 0).data, x.data)
    np.testing.assert_array_equal(unpair_tokens(cols, (2, 2), 1).data, x.data)


def test_model_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        ModelConfig(height=10, width=32, patch=4)
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)


def _tiny(**kw):
    base = dict(variables=2, height=8, width=16, patch=2, dim=8, heads=2, depth=1, blocks=2)
    base.update(kw)
    return ModelConfig(**base)


def test_zero_weights_finite_and_shaped():
    cfg = _tiny()
    P = {k: Tensor(np.zeros(v.shape)) for k, v in init_model(cfg, 0).items()}
    for k in P:
        if k.endswith(".g"):
            P[k] = Tensor(np.ones(P[k].shape))
    x = _rand((2, 2, 8, 16))
    out = encode_decode(x, P, cfg)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))
    # head weights are zero, so the increment is just the head bias
    np.testing.assert_array_equal(out.data, x.data)


def test_one_descent_step_lowers_mse():
    cfg = ModelConfig(variables=2, height=32, width=32, patch=2, dim=32, heads=4, depth=2, blocks=4,
                      windows=((4, 4), (2, 8)))
    P = init_model(cfg, 0)
    x, y = _rand((1, 2, 32, 32), 1), _rand((1, 2, 32, 32), 2)
    names = list(P)

    def loss_of(params):
        d = ops.sub(encode_decode(x, params, cfg), y)
        return ops.mean(ops.mul(d, d))

    with Tape() as tape:
        l0 = loss_of(P)
    grads = tape.gradient(l0, [P[n] for n in names])
    P1 = {n: Tensor(P[n].data - 0.05 * g, requires_grad=True) for n, g in zip(names, grads)}
    assert loss_of(P1).item() < l0.item()


def test_grad_check_through_tiny_model():
    cfg = ModelConfig(variables=1, height=8, width=16, patch=2, dim=4, heads=1, depth=1, blocks=2,
                      windows=((4, 4),), kernel_scale=0.1)
    P = init_model(cfg, 3)
    x = _rand((1, 1, 8, 16), 4)

    for name in ("head.w", "proc0.k3", "proc1.qkv.w", "down0.cross.q.w"):
        def f(t, name=name):
            q = dict(P)
            q[name] = t
            y = encode_decode(x, q, cfg)
            return ops.sum(ops.mul(y, y))
        assert grad_check(f, Tensor(P[name].data), eps=1e-5) < 1e-3, name


def test_checkpoint_roundtrip(tmp_path):
    cfg = _tiny()
    P = init_model(cfg, 9)
    save_checkpoint(tmp_path / "ck", P, cfg, {"seed": 9})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.config == cfg and ck.extra == {"seed": 9}
    assert set(ck.params) == set(P)
    for k in P:
        np.testing.assert_array_equal(ck.params[k].data, P[k].data)
    x = _rand((1, 2, 8, 16))
    np.testing.assert_array_equal(encode_decode(x, ck.params, cfg).data, encode_decode(x, P, cfg).data)
