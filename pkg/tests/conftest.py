import numpy as np
import pytest

from fortnet.tensor import Tensor


def numeric_gradients(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(list of arrays) w.r.t. each
    array. Independent oracle for the autodiff tape."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            plus = float(f(arrays))
            a[idx] = orig - h
            minus = float(f(arrays))
            a[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradients(build, arrays):
    """Gradients from one backward sweep of the scalar built by `build`."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    return [t.grad for t in tensors]


def assert_grad_matches(build, arrays, rel_tol=1e-4, h=1e-5):
    """build(tensors) -> scalar Tensor; also evaluable on raw arrays wrapped
    in non-grad Tensors for the finite-difference side."""
    analytic = analytic_gradients(build, arrays)

    def f(arrs):
        return build([Tensor(a) for a in arrs]).data

    numeric = numeric_gradients(f, [a.copy() for a in arrays], h=h)
    for a_grad, n_grad in zip(analytic, numeric):
        scale = np.maximum(np.abs(n_grad), 1.0)
        err = np.abs(a_grad - n_grad) / scale
        assert err.max() < rel_tol, f"max rel grad error {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
