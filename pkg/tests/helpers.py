"""Test helpers that drive the package (oracles.py stays package-free)."""

import numpy as np
from oracles import central_diff, rel_err

from mnmtlab import numerics as nx
from mnmtlab.model import forward
from mnmtlab.smart import smoothness_penalty


def model_loss(model, batch, params=None, x_bar=None, lambda_s=0.0, train=False, alpha=0.1):
    params = model.params if params is None else params
    logits = forward(params, model.config, batch, train=train, seed=3, step=1)
    loss = nx.cross_entropy_label_smoothed(logits, batch.tgt_out, alpha)
    if lambda_s:
        loss = nx.add(loss, nx.mul(smoothness_penalty(model, batch, x_bar, params=params), lambda_s))
    return loss


# Central differences at h=1e-5 on an O(1) loss carry ~5e-11 of fp64 roundoff,
# so entries below this magnitude cannot be resolved to 1e-4 relative.
MODEL_FLOOR = 1e-5


def _tape_grads(model, batch, x_bar, lambda_s, train):
    nx.zero_grad(model.params.values())
    with nx.Tape():
        nx.backward(model_loss(model, batch, x_bar=x_bar, lambda_s=lambda_s, train=train))
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in model.params.items()}


def model_direction_error(model, batch, seed, x_bar=None, lambda_s=0.0, train=False, h=1e-5):
    """Relative error of the directional derivative along a random direction
    spanning every parameter at once."""
    rng = np.random.default_rng(seed)
    grads = _tape_grads(model, batch, x_bar, lambda_s, train)
    dirs = {n: rng.normal(size=t.data.shape) for n, t in model.params.items()}
    analytic = sum(float((grads[n] * dirs[n]).sum()) for n in dirs)

    def at(scale):
        params = {n: nx.Tensor(t.data + scale * dirs[n]) for n, t in model.params.items()}
        return float(model_loss(model, batch, params, x_bar, lambda_s, train).data)

    fd = (at(h) - at(-h)) / (2 * h)
    return rel_err(np.array([analytic]), np.array([fd]), MODEL_FLOOR)


def model_grad_error(model, batch, seed, coords_per_tensor=3, x_bar=None, lambda_s=0.0, train=False):
    """Max relative error between tape and finite-difference gradients over
    randomly sampled coordinates of every parameter tensor (fp64 model)."""
    rng = np.random.default_rng(seed)
    grads = _tape_grads(model, batch, x_bar, lambda_s, train)
    worst = 0.0
    for name, t in model.params.items():
        base = t.data

        def f(arr, name=name):
            params = {n: nx.Tensor(p.data) for n, p in model.params.items()}
            params[name] = nx.Tensor(arr)
            return float(model_loss(model, batch, params, x_bar, lambda_s, train).data)

        k = min(coords_per_tensor, base.size)
        idx = rng.choice(base.size, size=k, replace=False)
        fd = central_diff(f, base.copy(), idx=idx)
        worst = max(worst, rel_err(grads[name], fd, MODEL_FLOOR))
    return worst


def xbar_grad_error(model, batch, x_bar, seed):
    """Gradient of the smoothness penalty w.r.t. the perturbed embeddings."""
    params = model.constant_params()
    t = nx.Tensor(x_bar.copy(), requires_grad=True)
    with nx.Tape():
        nx.backward(smoothness_penalty(model, batch, t, params=params))

    def f(arr):
        return float(smoothness_penalty(model, batch, nx.Tensor(arr), params=params).data)

    rng = np.random.default_rng(seed)
    idx = rng.choice(x_bar.size, size=min(24, x_bar.size), replace=False)
    return rel_err(t.grad, central_diff(f, x_bar.copy(), idx=idx), MODEL_FLOOR)
