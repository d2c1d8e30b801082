"""Shared hypothesis strategies."""
import numpy as np
from hypothesis import strategies as st

from vrnet.mandel import IsotropicPhase


@st.composite
def spd_matrices(draw, m, cond=1e3):
    """Random SPD matrices with eigenvalues in ``[1, cond]``."""
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    w = np.exp(rng.uniform(0.0, np.log(cond), m))
    c = (q * w) @ q.T
    return 0.5 * (c + c.T)


@st.composite
def phase_pairs(draw, contrast=1e4):
    e0 = draw(st.floats(1.0, contrast))
    e1 = draw(st.floats(1.0, contrast))
    nu0 = draw(st.floats(-0.5, 0.49))
    nu1 = draw(st.floats(-0.5, 0.49))
    return IsotropicPhase(e0, nu0), IsotropicPhase(e1, nu1)


def random_spd_pair(rng, m, cond=1e3):
    """Two random SPD matrices of size ``m``."""
    out = []
    for _ in range(2):
        q, _ = np.linalg.qr(rng.standard_normal((m, m)))
        w = np.exp(rng.uniform(0.0, np.log(cond), m))
        c = (q * w) @ q.T
        out.append(0.5 * (c + c.T))
    return out
