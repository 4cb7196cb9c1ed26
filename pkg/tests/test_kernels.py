import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddlab import _kernels_py as py
from ddlab import kernels

try:
    from ddlab import _ckernels as cy
except ImportError:  # pragma: no cover - only when the extension was not built
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled extension not built")

rows = st.tuples(st.integers(1, 6), st.integers(2, 9))


def _mat(shape):
    return arrays(np.float64, shape, elements=st.floats(-30, 30, allow_nan=False))


def _close(a, b, atol=1e-12):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y, atol)
        return
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=atol)


@needs_cython
@settings(max_examples=60, deadline=None)
@given(rows.flatmap(_mat))
def test_row_kernels_agree(x):
    _close(cy.softmax_fwd(x), py.softmax_fwd(x))
    _close(cy.log_softmax_fwd(x), py.log_softmax_fwd(x))
    _close(cy.gelu_fwd(x), py.gelu_fwd(x))
    g = np.cos(x)
    y = py.softmax_fwd(x)
    _close(cy.softmax_bwd(y, g), py.softmax_bwd(y, g))
    out = py.log_softmax_fwd(x)
    _close(cy.log_softmax_bwd(out, g), py.log_softmax_bwd(out, g))
    t = np.tanh(x)
    _close(cy.gelu_bwd(x, t, g), py.gelu_bwd(x, t, g))


@needs_cython
@settings(max_examples=60, deadline=None)
@given(rows.flatmap(_mat))
def test_layer_norm_kernels_agree(x):
    d = x.shape[1]
    gamma, beta = np.linspace(0.5, 1.5, d), np.linspace(-1, 1, d)
    fwd_c, fwd_p = cy.layer_norm_fwd(x, gamma, beta, 1e-5), py.layer_norm_fwd(x, gamma, beta, 1e-5)
    # summation-order rounding in the centred row is amplified by rstd (up to 1/sqrt(eps))
    atol = 1e-12 * max(1.0, fwd_p[2].max())
    _close(fwd_c, fwd_p, atol)
    g = np.sin(x)
    _close(cy.layer_norm_bwd(g, fwd_p[1], gamma, fwd_p[2]), py.layer_norm_bwd(g, fwd_p[1], gamma, fwd_p[2]),
           atol * max(1.0, fwd_p[2].max()))


@needs_cython
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)),
    arrays(np.float64, n, elements=st.floats(-0.05, 0.05)),
    arrays(np.float64, n, elements=st.floats(-1, 1)))))
def test_linf_step_agrees(args):
    x, delta, direction = args
    a = cy.linf_step(x, delta, direction, 0.01, 0.03)
    b = py.linf_step(x, delta, direction, 0.01, 0.03)
    assert np.array_equal(a, b)


def test_linf_step_projects():
    x = np.array([0.0, 0.5, 1.0, 0.99])
    out = kernels.linf_step(x, np.zeros(4), np.array([-1.0, 1.0, 1.0, 1.0]), 0.02, 0.015)
    np.testing.assert_array_equal(out, [0.0, 0.015, 0.0, 1.0 - 0.99])


def test_reference_values():
    np.testing.assert_allclose(py.softmax_fwd(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]], rtol=1e-15)
    # gelu tanh approximation at 1: 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
    assert py.gelu_fwd(np.array([[1.0]]))[0][0, 0] == pytest.approx(0.8411919906082768, abs=1e-15)


def test_backend_env_forces_fallback():
    code = "from ddlab import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "DDLAB_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_cython
def test_default_backend_is_compiled():
    env = {k: v for k, v in os.environ.items() if k != "DDLAB_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", "from ddlab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"


def test_pure_python_model_forward_matches_compiled():
    code = ("import numpy as np; from ddlab import data, models; "
            "p = models.init_dual_encoder(models.ModelConfig(resolution=16), 0); "
            "ds = data.make_dataset(16, 16, 0); "
            "__import__('sys').stdout.write(models.encode_image(p, ds.images).data.tobytes().hex())")
    outs = []
    for flag in ("0", "1"):
        env = {**os.environ, "DDLAB_PURE_PYTHON": flag}
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True)
        assert res.returncode == 0, res.stderr.decode()
        outs.append(np.frombuffer(bytes.fromhex(res.stdout.decode()), dtype=np.float64))
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10, atol=1e-12)
