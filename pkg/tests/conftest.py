import numpy as np
import pytest

from viewdiff import autograd as ag
from viewdiff.autograd import Tensor
from viewdiff.config import ModelConfig


def numeric_grad(fn, arrays, index, eps=1e-6, coords=None):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``coords`` restricts the check to a subset of flat indices.
    """
    base = arrays[index]
    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for k, c in enumerate(coords):
        plus = flat.copy()
        minus = flat.copy()
        plus[c] += eps
        minus[c] -= eps
        args_p = list(arrays)
        args_m = list(arrays)
        args_p[index] = plus.reshape(base.shape)
        args_m[index] = minus.reshape(base.shape)
        out[k] = (fn(*args_p) - fn(*args_m)) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(op, arrays, seed=0, eps=1e-6):
    """Compare backward against finite differences for ``sum(op(*inputs) * R)``.

    ``R`` is a fixed random projection so the whole Jacobian is exercised.
    Returns the worst relative error over all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with ag.no_grad():
        shape = op(*[Tensor(a, dtype=np.float64) for a in arrays]).shape
    proj = np.random.default_rng(seed).standard_normal(shape)

    def scalar(*arrs):
        with ag.no_grad():
            out = op(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float((out.numpy() * proj).sum())

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = ag.sum_(ag.mul(op(*leaves), Tensor(proj, dtype=np.float64)))
    ag.backward(loss, leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(mode="b", views=1, d_ctx=8, d_embed=8, n_tok=4, channels=[8, 16], groups=4)


# acceptance results, filled by test_acceptance.py and printed after the run
ACCEPTANCE_RESULTS: dict[int, dict] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        r = ACCEPTANCE_RESULTS[n]
        status = "PASS" if r["ok"] else "FAIL"
        terminalreporter.write_line(f"[{status}] {n}. {r['title']}: {r['detail']}")
