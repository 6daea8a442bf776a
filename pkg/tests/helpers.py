"""Shared test utilities: finite differences and gradient comparison."""

import numpy as np

from cvla.numerics import GradRecord, Tensor, tsum, mul, tensor


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Norm-relative error, guarded against a zero reference."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12))


def central_diff(f, params, h=1e-4):
    """Central finite differences of scalar-valued f() w.r.t. each Tensor in params.

    f must recompute the forward pass from the params' current .data buffers.
    """
    def eval_scalar():
        v = f()
        return v.item() if isinstance(v, Tensor) else float(v)

    grads = []
    for p in params:
        flat = p.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_scalar()
            flat[i] = orig - h
            fm = eval_scalar()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def autodiff_grads(forward, params):
    """Run forward under a fresh record and return grads for params (and loss)."""
    with GradRecord() as rec:
        loss = forward()
        rec.backward(loss)
    return [p.grad.copy() for p in params], loss.item()


def projected_loss(out: Tensor, G: np.ndarray) -> Tensor:
    """sum(G * out): a generic scalar objective exercising every output entry."""
    return tsum(mul(out, tensor(G, dtype=out.dtype)))


def check_op_gradients(build, n_instances=100, tol=1e-4, h=1e-4, seed=0):
    """Finite-difference check a primitive over many random instances.

    `build(rng)` returns (forward, params) where forward() recomputes the f64
    scalar loss from the params' current buffers. Asserts norm-relative error
    <= tol per parameter tensor per instance.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_instances):
        forward, params = build(rng)
        ad, _ = autodiff_grads(forward, params)
        fd = central_diff(forward, params, h=h)
        for a, f, p in zip(ad, fd, params):
            e = rel_err(a, f)
            worst = max(worst, e)
            assert e <= tol, f"instance {k}: rel err {e:.3e} > {tol} on shape {p.data.shape}"
    return worst
