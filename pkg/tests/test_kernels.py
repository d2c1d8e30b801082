import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from vrnet import _pykernels, kernels
from vrnet.fftsolver import element_matrices
from vrnet.mandel import DEFAULT_PHASES, plane_strain_stiffness

try:
    from vrnet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def _fe_case(n=12, seed=0):
    rng = np.random.default_rng(seed)
    phase = (rng.random((n, n)) < 0.5).astype(np.uint8)
    ke = np.stack([element_matrices(plane_strain_stiffness(p), n, n)[0] for p in DEFAULT_PHASES])
    u = rng.standard_normal((2, 2, n, n))
    return u, phase, ke


def test_backend_name():
    assert kernels.BACKEND in ("cython", "numpy")


@needs_ext
def test_fe_apply_parity():
    u, phase, ke = _fe_case()
    np.testing.assert_allclose(_ckernels.fe_apply(u, phase, ke), _pykernels.fe_apply(u, phase, ke),
                               rtol=1e-13, atol=1e-10)


def test_fe_apply_annihilates_rigid_translation():
    u, phase, ke = _fe_case()
    u[:] = 0.0
    u[:, 0] = 1.3
    assert np.abs(kernels.fe_apply(u, phase, ke)).max() < 1e-9


def test_fe_apply_symmetric():
    u, phase, ke = _fe_case(seed=1)
    v = np.random.default_rng(2).standard_normal(u.shape)
    a = np.sum(v * kernels.fe_apply(u, phase, ke))
    b = np.sum(u * kernels.fe_apply(v, phase, ke))
    assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("impl", ["py", "c"])
def test_jacobi_against_numpy(impl):
    mod = _pykernels if impl == "py" else _ckernels
    if mod is None:
        pytest.skip("compiled extension not built")
    a = np.random.default_rng(3).standard_normal((50, 6, 6))
    a = a + np.swapaxes(a, 1, 2)
    w, v = mod.jacobi_eigh(a, 1e-15, 60)
    np.testing.assert_allclose(np.sort(w, axis=-1), np.linalg.eigvalsh(a), atol=1e-12)
    recon = np.einsum("bij,bj,bkj->bik", v, w, v)
    np.testing.assert_allclose(recon, a, atol=1e-12)


def periodic_count_oracle(mask):
    """Count periodic 4-connected components by merging scipy labels across the wrap edges."""
    lab, n = ndimage.label(mask)
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for a, b in list(zip(lab[0], lab[-1])) + list(zip(lab[:, 0], lab[:, -1])):
        if a and b:
            parent[find(a)] = find(b)
    return len({find(i) for i in range(1, n + 1)})


@pytest.mark.parametrize("impl", ["py", "c"])
def test_label_periodic_against_scipy(impl):
    mod = _pykernels if impl == "py" else _ckernels
    if mod is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(4)
    for _ in range(30):
        mask = rng.random((9, 11)) < 0.45
        labels, count = mod.label_periodic(mask)
        assert count == periodic_count_oracle(mask)
        assert np.array_equal(labels > 0, mask)
    stripes = np.zeros((6, 6), bool)
    stripes[:, 0] = stripes[:, 5] = True
    assert mod.label_periodic(stripes)[1] == 1


def test_pure_python_switch():
    code = "from vrnet import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, VRNET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numpy"


def test_kernel_input_validation():
    u, phase, ke = _fe_case()
    with pytest.raises(ValueError):
        kernels.fe_apply(u[:, :1], phase, ke)
    with pytest.raises(ValueError):
        kernels.fe_apply(u, phase + 2, ke)
    with pytest.raises(ValueError):
        kernels.jacobi_eigh(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        kernels.label_periodic(np.zeros(4))
