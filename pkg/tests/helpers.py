"""Test-side oracles shared by several modules."""
import numpy as np


def numeric_grad(f, arr, h=1e-5, coords=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = {}
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor=1e-5):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(loss_fn, params, rng, h=1e-5, max_coords=None):
    """Max relative error between analytic and numeric gradients.

    ``loss_fn()`` must build a fresh graph and return a scalar Value.
    """
    from dtsda.autodiff import backward

    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        coords = np.arange(p.data.size)
        if max_coords is not None and coords.size > max_coords:
            coords = rng.choice(coords, max_coords, replace=False)
        num = numeric_grad(lambda: loss_fn().item(), p.data, h=h, coords=coords)
        worst = max(worst, rel_err([analytic[i] for i in coords], [num[i] for i in coords]))
    return worst


def check_grads_surrogate(loss_fn, groups, rng, h=1e-5, max_coords=None):
    """Like :func:`check_grads` for losses containing gradient reversal.

    ``groups`` is a list of ``(params, value_fn)``: the analytic gradient of
    ``loss_fn()`` w.r.t. ``params`` is compared to finite differences of the
    scalar ``value_fn()``. Upstream of a reversal layer that scalar is the
    surrogate ``L_plain - lam * L_adv``.
    """
    from dtsda.autodiff import backward

    params_all = [p for ps, _ in groups for p in ps]
    for p in params_all:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for params, value_fn in groups:
        for p in params:
            analytic = p.grad.reshape(-1).copy()
            coords = np.arange(p.data.size)
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords, max_coords, replace=False)
            num = numeric_grad(value_fn, p.data, h=h, coords=coords)
            worst = max(worst, rel_err([analytic[i] for i in coords], [num[i] for i in coords]))
    return worst
