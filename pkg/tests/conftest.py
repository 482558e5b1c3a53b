import numpy as np
import pytest

from wmhseg.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (independent oracle)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(1, |n|)."""
    return float((np.abs(analytic - numeric)
                 / np.maximum(1.0, np.abs(numeric))).max())


def check_grad(make_output, x0: np.ndarray, rng, step: float = 1e-5,
               tol: float = 1e-4) -> float:
    """FD-check d(sum(out * probe))/dx for a Tensor-valued op, 64-bit."""
    x = Tensor(x0.copy(), dtype=np.float64, requires_grad=True)
    out = make_output(x)
    probe = rng.standard_normal(out.shape)
    (out * Tensor(probe, dtype=np.float64)).sum().backward()

    def scalar(v):
        return float((make_output(Tensor(v, dtype=np.float64)).data * probe).sum())

    err = rel_err(x.grad, finite_difference(scalar, x0.copy(), step))
    assert err < tol, f"gradient mismatch: rel err {err}"
    return err
