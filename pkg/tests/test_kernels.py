import os
import subprocess
import sys

import numpy as np
import pytest

from pointattn import _kernels as kn

pytestmark = pytest.mark.skipif(not kn.NUMBA_KERNELS, reason="numba not installed")


def test_topk_perpendicular_backends_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 300))
        k = int(rng.integers(1, 30))
        pos = rng.normal(size=(n, 3))
        o = rng.normal(size=(50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        i1, d1 = kn.NUMBA_KERNELS["topk_perpendicular"](pos, o, d, k)
        i2, d2 = kn.NUMPY_KERNELS["topk_perpendicular"](pos, o, d, k)
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_allclose(d1, d2, rtol=0, atol=1e-12)


def test_topk_ties_lower_index_first_both_backends():
    dist = np.array([[0.3, 0.2, 0.3, 0.2, 0.1]])
    for kernels in (kn.NUMBA_KERNELS, kn.NUMPY_KERNELS):
        idx, _ = kernels["topk_rows"](dist, 5)
        np.testing.assert_array_equal(idx, [[4, 1, 3, 0, 2]])


def test_scatter_add_backends_agree():
    rng = np.random.default_rng(1)
    index = rng.integers(0, 7, size=120)
    src = rng.normal(size=(120, 5))
    a = kn.NUMBA_KERNELS["scatter_add_rows"](index, src, 7)
    b = kn.NUMPY_KERNELS["scatter_add_rows"](index, src, 7)
    np.testing.assert_allclose(a, b, atol=1e-12)
    brute = np.zeros((7, 5))
    for i, row in enumerate(index):
        brute[row] += src[i]
    np.testing.assert_allclose(a, brute, atol=1e-12)


def test_distance_kernels_agree():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
    brute = ((a[:, None] - b[None]) ** 2).sum(-1)
    for kernels in (kn.NUMBA_KERNELS, kn.NUMPY_KERNELS):
        np.testing.assert_allclose(kernels["pairwise_sqdist"](a, b), brute, atol=1e-12)
        np.testing.assert_allclose(kernels["nearest_sqdist"](a, b), brute.min(1), atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, POINTATTN_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from pointattn import _kernels; print(_kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
