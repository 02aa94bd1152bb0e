import os
import subprocess
import sys

import numpy as np
import pytest

from fedleak import conv, kernels
from fedleak.errors import ConfigError

from gradcheck import fd_relative_error

BACKENDS = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])


def _naive_conv_pool(x, w):
    """Loop oracle: valid 3x3 cross-correlation then 2x2 max pooling (floor)."""
    n, cin, H, W = x.shape
    cout = w.shape[0]
    k = w.reshape(cout, cin, 3, 3)
    z = np.zeros((n, cout, H - 2, W - 2))
    for i in range(H - 2):
        for j in range(W - 2):
            z[:, :, i, j] = np.einsum("nchw,ochw->no", x[:, :, i:i + 3, j:j + 3], k)
    ph, pw = (H - 2) // 2, (W - 2) // 2
    out = np.empty((n, cout, ph, pw))
    for i in range(ph):
        for j in range(pw):
            out[:, :, i, j] = z[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("shape", [(2, 1, 8, 6), (3, 2, 7, 9), (1, 3, 5, 5)])
def test_forward_matches_loop_oracle(backend, shape, rng):
    mod = kernels.backend_module(backend)
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[1], 9))
    pooled, arg = mod.conv3x3_pool_forward(x, w)
    assert np.allclose(pooled, _naive_conv_pool(x, w), atol=1e-12)
    assert arg.min() >= 0 and arg.max() <= 3


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(dtype, rng):
    c, p = kernels.backend_module("cython"), kernels.backend_module("numpy")
    x = rng.normal(size=(4, 3, 11, 10)).astype(dtype)
    w = rng.normal(size=(5, 3, 9)).astype(dtype)
    (pc, ac), (pp, ap) = c.conv3x3_pool_forward(x, w), p.conv3x3_pool_forward(x, w)
    tol = 1e-4 if dtype == np.float32 else 1e-12
    assert np.allclose(pc, pp, atol=tol)
    assert np.array_equal(ac, ap)
    d = rng.normal(size=pc.shape).astype(dtype)
    dwc, dxc = c.conv3x3_pool_backward(x, w, d, ac, True)
    dwp, dxp = p.conv3x3_pool_backward(x, w, d, ap, True)
    assert np.allclose(dwc, dwp, atol=tol * 10)
    assert np.allclose(dxc, dxp, atol=tol)
    assert dwc.dtype == dxc.dtype == dtype


@pytest.mark.parametrize("backend", BACKENDS)
def test_backward_matches_finite_differences(backend, rng):
    mod = kernels.backend_module(backend)
    x = rng.normal(size=(2, 2, 8, 7))
    w = rng.normal(size=(3, 2, 9))
    pooled, arg = mod.conv3x3_pool_forward(x, w)
    d = rng.normal(size=pooled.shape)
    dw, dx = mod.conv3x3_pool_backward(x, w, d, arg, True)
    h = 1e-6
    for _ in range(10):
        i = tuple(rng.integers(s) for s in w.shape)
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        num = ((mod.conv3x3_pool_forward(x, wp)[0] - mod.conv3x3_pool_forward(x, wm)[0]) * d).sum() / (2 * h)
        assert dw[i] == pytest.approx(num, rel=1e-5, abs=1e-7)
        j = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        num = ((mod.conv3x3_pool_forward(xp, w)[0] - mod.conv3x3_pool_forward(xm, w)[0]) * d).sum() / (2 * h)
        assert dx[j] == pytest.approx(num, rel=1e-5, abs=1e-7)


def test_kernels_reject_bad_shapes(rng):
    mod = kernels.backend_module("numpy")
    with pytest.raises((ValueError, ConfigError)):
        mod.conv3x3_pool_forward(rng.normal(size=(2, 8, 8)), rng.normal(size=(1, 1, 9)))
    with pytest.raises((ValueError, ConfigError)):
        mod.conv3x3_pool_forward(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 9)))


def test_pure_python_switch():
    env = dict(os.environ, FEDLEAK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fedleak.kernels as k; print(k.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


def _conv_case(rng):
    spec = conv.ConvNetSpec((int(rng.integers(22, 28)), int(rng.integers(22, 28))), int(rng.integers(1, 6)),
                            channels=(2, 3, 2), hidden_dims=(5,), dropout_rate=0.2)
    params = conv.init_convnet(spec, rng, np.float64)
    params = params.map(lambda a: a + 0.05 * rng.normal(size=a.shape))
    X = rng.normal(size=(int(rng.integers(2, 5)), spec.input_dim))
    y = rng.integers(0, 2, len(X))
    return spec, params, X, y


@pytest.mark.parametrize("trial", range(20))
def test_convnet_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(500 + trial)
    spec, params, X, y = _conv_case(rng)
    seed = int(rng.integers(1 << 30))
    _, g = conv.convnet_loss_and_gradients(spec, params, X, y, np.random.default_rng(seed))

    def loss(vec):
        return conv.convnet_loss_and_gradients(spec, params.unflatten(vec), X, y,
                                               np.random.default_rng(seed))[0]

    assert fd_relative_error(loss, params, g, rng, max_coords=150) < 1e-4


def test_convnet_spec_validation():
    with pytest.raises(ConfigError):
        conv.ConvNetSpec((8, 8), 1, channels=(2, 2))
    with pytest.raises(ConfigError):
        conv.ConvNetSpec((10, 30), 1)
    spec = conv.ConvNetSpec((256, 88), 256)
    assert spec.feature_shapes == [(127, 43, 16), (62, 20, 32), (30, 9, 64)]
    assert spec.flat_dim == 30 * 9 * 64


def test_convnet_probabilities(rng):
    spec = conv.ConvNetSpec((22, 22), 2, channels=(2, 2, 2), hidden_dims=(4,))
    model = conv.AttackConvNet(spec)
    params = model.init_params(rng)
    p = model.predict_proba(params, rng.normal(size=(3, spec.input_dim)))
    assert p.shape == (3, 2) and p.dtype == np.float32
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)
