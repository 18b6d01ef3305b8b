"""Shared test utilities: gradient checking against central differences."""

import numpy as np

from attnmine.autodiff import Tape, Tensor, backward, finite_diff_gradient


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(f, x: Tensor, rel: float = 1e-4, step: float = 1e-5) -> float:
    """Assert analytic d f(x)/dx matches central differences; returns error."""
    assert x.requires_grad, "gradcheck target must require a gradient"
    with Tape() as tape:
        loss = f(x)
    analytic = backward(loss, tape).grad(x)
    numeric = finite_diff_gradient(f, x, step=step).data
    err = rel_error(analytic, numeric)
    assert err < rel, f"gradient mismatch: rel error {err:.3e} >= {rel}"
    return err


def fd_spot_check(loss_fn, params, rng, n_checks: int = 30,
                  rel: float = 1e-4, step: float = 1e-5) -> float:
    """Compare analytic gradients to central differences at randomly sampled
    parameter entries.

    ``loss_fn`` takes no arguments and evaluates the scalar loss from the
    current parameter values; ``params`` are the leaf tensors to probe.
    Cheaper than full finite differences when parameters are large.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)

    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_checks, int(sizes.sum())),
                       replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in sorted(int(p) for p in picks):
        t = int(np.searchsorted(bounds, flat, side="right"))
        idx = flat - (0 if t == 0 else int(bounds[t - 1]))
        tensor = params[t]
        orig = tensor.data.flat[idx]
        tensor.data.flat[idx] = orig + step
        hi = loss_fn().item()
        tensor.data.flat[idx] = orig - step
        lo = loss_fn().item()
        tensor.data.flat[idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        analytic = grads.grad(tensor).flat[idx]
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    assert worst < rel, f"spot FD check failed: rel error {worst:.3e} >= {rel}"
    return worst


def randomize_parameters(named_params, rng, scale: float = 0.2) -> None:
    """Overwrite every parameter (including zero-initialized ones) with small
    random values, so gradients flow through all branches."""
    for _, p in named_params:
        p.data[...] = rng.uniform(-scale, scale, p.data.shape)
