import numpy as np
import pytest

from recdevid import kernels

BACKENDS = kernels.available_backends()


def _case(rng, dtype, peep=True, p=3, s=5, f=7):
    z = rng.normal(scale=2.0, size=(p, s, 4, f)).astype(dtype)
    c_prev = rng.normal(size=(p, s, f)).astype(dtype)
    w = rng.normal(scale=0.5, size=(3, s, f)).astype(dtype) if peep else None
    return z, c_prev, w


def _forward(backend, z, c_prev, w):
    p, s, _, f = z.shape
    gates = np.empty_like(z)
    c = np.empty_like(c_prev)
    tc = np.empty_like(c_prev)
    h = np.empty_like(c_prev)
    kernels.get_backend(backend).cell_forward(z, c_prev, w, gates, c, tc, h)
    return gates, c, tc, h


def _reference(z, c_prev, w):
    """Cell equations written out directly in float64."""
    z = z.astype(np.float64)
    cp = c_prev.astype(np.float64)
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    wi, wf, wo = (np.zeros_like(cp[0]),) * 3 if w is None else w.astype(np.float64)
    i = sig(z[:, :, 0] + wi * cp)
    f = sig(z[:, :, 1] + wf * cp)
    g = np.tanh(z[:, :, 3])
    c = f * cp + i * g
    o = sig(z[:, :, 2] + wo * c)
    return np.stack([i, f, o, g], axis=2), c, np.tanh(c), o * np.tanh(c)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-6), (np.float64, 1e-12)])
@pytest.mark.parametrize("peep", [True, False])
def test_forward_matches_equations(backend, dtype, tol, peep, rng):
    z, cp, w = _case(rng, dtype, peep)
    got = _forward(backend, z, cp, w)
    want = _reference(z, cp, w)
    for a, b in zip(got, want):
        assert a.dtype == dtype
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-6), (np.float64, 1e-12)])
@pytest.mark.parametrize("peep", [True, False])
def test_backends_agree(dtype, tol, peep, rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    z, cp, w = _case(rng, dtype, peep)
    fwd = {b: _forward(b, z, cp, w) for b in BACKENDS}
    for a, b in zip(*fwd.values()):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    dh = rng.normal(size=cp.shape).astype(dtype)
    dc = rng.normal(size=cp.shape).astype(dtype)
    outs = []
    for b in BACKENDS:
        gates, c, tc, _ = fwd["python"]
        dz = np.empty_like(z)
        dcp = np.empty_like(cp)
        dw = None if w is None else np.zeros_like(w)
        kernels.get_backend(b).cell_backward(dh, dc, gates, cp, c, tc, w, dz, dcp, dw)
        outs.append((dz, dcp, dw))
    for a, b in zip(*outs):
        if a is not None:
            np.testing.assert_allclose(a, b, rtol=10 * tol, atol=10 * tol)


@pytest.mark.parametrize("backend", BACKENDS)
def test_backward_matches_finite_differences(backend, rng):
    z, cp, w = _case(rng, np.float64, True, p=2, s=3, f=4)
    dh = rng.normal(size=cp.shape)
    dc = rng.normal(size=cp.shape)

    def loss(z_, cp_, w_):
        _, c, _, h = _forward(backend, z_, cp_, w_)
        return float(np.sum(dh * h) + np.sum(dc * c))

    gates, c, tc, _ = _forward(backend, z, cp, w)
    dz, dcp, dw = np.empty_like(z), np.empty_like(cp), np.zeros_like(w)
    kernels.get_backend(backend).cell_backward(dh, dc, gates, cp, c, tc, w, dz, dcp, dw)
    eps = 1e-6
    for arr, grad, idx in ((z, dz, 0), (cp, dcp, 1), (w, dw, 2)):
        flat, g = arr.reshape(-1), grad.reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 15)):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss(z, cp, w)
            flat[k] = orig - eps
            down = loss(z, cp, w)
            flat[k] = orig
            assert abs((up - down) / (2 * eps) - g[k]) < 1e-7 * max(1, abs(g[k])), (idx, k)


def test_backend_selection():
    assert "python" in kernels.available_backends()
    assert kernels.get_backend("python") is not None
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
    prev = kernels.BACKEND
    kernels.use_backend("python")
    assert kernels.BACKEND == "python"
    kernels.use_backend(prev)
