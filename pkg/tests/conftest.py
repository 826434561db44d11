import numpy as np
import pytest

from volseg.tensor import Tensor


def fd_grad(f, arrays, h=1e-5, index=None):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = arrays[index or 0]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(*arrays)
        flat[i] = old - h
        down = f(*arrays)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def autodiff_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) w.r.t. every input."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    return [t.grad for t in tensors]


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(build, arrays, h=1e-5, joint=False):
    """Relative error between autodiff and finite differences.

    Per input (the worst one is returned), or over all inputs concatenated
    when ``joint`` is set, which suits inputs whose true gradient is zero.
    """
    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    auto = autodiff_grads(build, arrays)
    auto = [np.zeros(np.shape(a)) if g is None else g for g, a in zip(auto, arrays)]
    numeric = [fd_grad(scalar, arrays, h, i) for i in range(len(arrays))]
    if joint:
        return rel_err(np.concatenate([g.ravel() for g in auto]),
                       np.concatenate([g.ravel() for g in numeric]))
    return max(rel_err(a, n) for a, n in zip(auto, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------------
ACCEPTANCE = {}


class Criterion:
    """Context manager recording PASS/FAIL plus a measured detail for one criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE[self.number] = (ok, self.title, " ".join(detail.split()))
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} | {detail}")
