import numpy as np
import pytest

from ecgra.errors import CheckpointError
from ecgra.gradcheck import case_residual, grad_check
from ecgra.model import (FORMAT_VERSION, Model, ModelConfig, build_model, checkpoint_digest, forward,
                         init_buffers, init_parameters, load_checkpoint, receptive_fields,
                         residual_forward, save_checkpoint)


def _module(c_in, c_out, k=16):
    convs = 16 * c_out * c_in + c_out + 16 * c_out * c_out + c_out
    bns = 2 * c_in + 2 * c_out
    shortcut = c_in * c_out + c_out if c_in != c_out else 0
    return convs + bns + shortcut


def test_default_parameter_count():
    # stem, the seven modules at widths 16,16,32,32,48,48,64, attention (64x64), classifier
    by_hand = (16 * 12 * 16 + 16
               + _module(16, 16) + _module(16, 16) + _module(16, 32) + _module(32, 32)
               + _module(32, 48) + _module(48, 48) + _module(48, 64)
               + 64 * 64 + 64 + 64 + 64 * 9 + 9)
    assert by_hand == 338185
    assert build_model(ModelConfig()).num_parameters() == 338185


def test_shape_chain_and_channels():
    cfg = ModelConfig()
    assert cfg.length_chain() == [7500, 3750, 1875, 937, 468, 234, 117]
    assert [c for _, c in cfg.module_channels()] == [16, 16, 32, 32, 48, 48, 64]
    assert cfg.local_length == 117


def test_default_forward_shapes():
    model = build_model(ModelConfig())
    x = np.random.default_rng(0).standard_normal((2, 12, 15000)).astype(np.float32)
    probs, alpha = forward(model, x)
    assert probs.shape == (2, 9) and alpha.shape == (2, 117)
    assert np.all((probs > 0) & (probs < 1))
    assert np.allclose(alpha.sum(axis=1), 1, atol=1e-6)
    again, alpha2 = forward(model, x)
    assert np.array_equal(probs, again) and np.array_equal(alpha, alpha2)
    with pytest.raises(ValueError):
        forward(model, x[:, :, :14999])


def test_same_seed_same_parameters(tiny_cfg):
    a, b = build_model(tiny_cfg), build_model(tiny_cfg)
    assert checkpoint_digest(a) == checkpoint_digest(b)
    other = build_model(ModelConfig(**{**tiny_cfg.to_dict(), "seed": 4}))
    assert checkpoint_digest(other) != checkpoint_digest(a)


def test_no_modules_still_runs():
    cfg = ModelConfig(input_length=40, num_residual_modules=0, kernel_size=5, attention_hidden=4)
    model = build_model(cfg)
    assert not any(n.startswith("res") for n in model.params)
    probs, alpha = forward(model, np.ones((3, 12, 40)))
    assert probs.shape == (3, 9) and alpha.shape == (3, 40)


def test_invalid_configs():
    for bad in (dict(kernel_size=0), dict(dropout_rate=1.0), dict(input_length=100),
                dict(num_residual_modules=-1)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_residual_identity_with_zero_kernels(tiny_cfg):
    p = init_parameters(tiny_cfg)
    for n in ("res0.conv1.weight", "res0.conv1.bias", "res0.conv2.weight", "res0.conv2.bias"):
        p[n][:] = 0
    x = np.random.default_rng(1).standard_normal((2, 4, 64)).astype(np.float32)
    out, _ = residual_forward(x, p, init_buffers(tiny_cfg), "res0.", False, 0.2, None)
    assert np.array_equal(out, x)


def test_projection_module_shape():
    cfg = ModelConfig(input_length=64, kernel_size=16, base_channels=16, channel_growth=16,
                      num_residual_modules=3, attention_hidden=4)
    p, bufs = init_parameters(cfg), init_buffers(cfg)
    x = np.random.default_rng(2).standard_normal((2, 16, 64)).astype(np.float32)
    out, _ = residual_forward(x, p, bufs, "res2.", False, 0.2, None)
    assert out.shape == (2, 32, 64)


@pytest.mark.parametrize("c_in,c_out,train", [(4, 4, True), (4, 4, False), (3, 5, True)])
def test_residual_module_gradcheck(c_in, c_out, train):
    for seed in range(3):
        fwd, bwd, inputs = case_residual(np.random.default_rng(seed), c_in=c_in, c_out=c_out, train=train)
        assert max(grad_check(fwd, bwd, inputs, seed=seed).values()) < 1e-3


def test_full_model_gradcheck():
    """Whole network in float64, train-mode batchnorm.

    A small step keeps deep perturbations from crossing ReLU/maxpool kinks;
    the per-primitive checks run at the coarser 1e-3.
    """
    cfg = ModelConfig(input_length=16, kernel_size=3, base_channels=3, channel_growth=2,
                      num_residual_modules=3, attention_hidden=3, dropout_rate=0.0, seed=1)
    model = build_model(cfg)
    x = np.random.default_rng(3).standard_normal((3, 12, 16))
    names = ["stem.weight", "res0.bn1.gamma", "res1.conv2.bias", "res2.shortcut.weight", "attn.context", "fc.weight"]
    base = {n: model.params[n].astype(np.float64) for n in names}

    def fwd(**params):
        m = model.copy()
        m.params.update(params)
        m.buffers = init_buffers(cfg)
        logits, _, cache = m.forward(x, train=True, keep_cache=True)
        return logits, (m, cache)

    def bwd(d, c):
        m, cache = c
        return m.backward(d, cache)

    errs = grad_check(fwd, bwd, base, wrt=names, eps=1e-6)
    assert max(errs.values()) < 1e-3, errs


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg)
    model.buffers["res1.bn2.running_var"][:] = 1.7
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path, expect=tiny_cfg)
    assert back.cfg == tiny_cfg
    assert checkpoint_digest(back) == checkpoint_digest(model)
    x = np.random.default_rng(4).standard_normal((2, 12, 64)).astype(np.float32)
    assert np.array_equal(forward(back, x)[0], forward(model, x)[0])
    assert path.read_bytes().startswith(b"ECGRA-CHECKPOINT\nversion 1\n")


def test_checkpoint_errors(tmp_path, tiny_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(tiny_cfg), path)
    raw = path.read_bytes()

    def broken(data, name):
        p = tmp_path / name
        p.write_bytes(data)
        return p

    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(broken(b"X" + raw[1:], "magic.ckpt"))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(broken(raw.replace(b"version 1", f"version {FORMAT_VERSION + 1}".encode(), 1), "v.ckpt"))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(broken(raw[:-10], "trunc.ckpt"))
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(broken(raw + b"\0\0\0\0", "long.ckpt"))
    other = ModelConfig(**{**tiny_cfg.to_dict(), "base_channels": 5})
    with pytest.raises(CheckpointError, match="differs"):
        load_checkpoint(path, expect=other)
    # header claims a shape that disagrees with the embedded config
    bad = raw.replace(b"stem.weight 3 4 12 5", b"stem.weight 3 4 12 6", 1)
    assert bad != raw
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(broken(bad, "shape.ckpt"))


def test_model_rejects_wrong_shapes(tiny_cfg):
    p = init_parameters(tiny_cfg)
    p["fc.bias"] = np.zeros(8, np.float32)
    with pytest.raises(CheckpointError):
        Model(tiny_cfg, p)


def test_receptive_fields_cover_input(reduced_cfg):
    rf = receptive_fields(reduced_cfg)
    assert rf.shape == (reduced_cfg.local_length, 2)
    assert np.all(np.diff(rf[:, 0]) == 8)
    # perturbing one input sample only moves locals whose field contains it
    model = build_model(reduced_cfg)
    x = np.random.default_rng(5).standard_normal((1, 12, 1500)).astype(np.float64)
    y = x.copy()
    y[0, :, 700] += 1.0
    h0 = _locals(model, x)
    h1 = _locals(model, y)
    moved = np.flatnonzero(np.abs(h1 - h0).max(axis=1) > 0)
    inside = np.flatnonzero((rf[:, 0] <= 700) & (rf[:, 1] >= 700))
    assert set(moved) <= set(inside)


def _locals(model, x):
    from ecgra import layers as L
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    h, _ = L.conv1d_forward(x, p["stem.weight"], p["stem.bias"])
    for m in range(model.cfg.num_residual_modules):
        h, _ = residual_forward(h, p, model.buffers, f"res{m}.", False, 0.0, None)
        h, _ = L.maxpool_forward(h)
    return h[0].T
