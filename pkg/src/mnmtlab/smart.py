"""Smoothness-inducing adversarial regularization for fine-tuning.

The regularizer is the symmetrized KL divergence between the model's output
distribution on clean source embeddings and on adversarially perturbed ones,
with the perturbation confined to a p-norm ball around the clean embeddings.
A SMART step finds the perturbation by noisy projected gradient ascent with
the parameters held fixed, takes one Adam step on
``loss + lambda_s * penalty`` and then limits each parameter's relative
change against its pre-step value (ratio clip).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .model import embed_source, embed_target, forward
from .optim import adam_update, check_loss, clip_grad_norm, collect_grads, effective_config, lr_at

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class SmartConfig:
    lambda_s: float = 1.0
    epsilon: float = 1e-5
    sigma: float = 1e-5
    t_x_tilde: int = 1
    eta: float = 1e-3
    beta: float | None = 0.1  # None or inf disables the clip
    p_norm: str = "inf"
    clip_guard: float = 1e-8
    perturb_decoder: bool = False

    def __post_init__(self):
        for name in ("lambda_s", "epsilon", "sigma", "t_x_tilde", "eta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"smart.{name} must be >= 0")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("smart.beta must be >= 0")
        if self.p_norm not in ("inf", "2"):
            raise ConfigError(f"smart.p_norm must be 'inf' or '2', got {self.p_norm!r}")

    @property
    def clip_enabled(self):
        return self.beta is not None and math.isfinite(self.beta)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "p_norm" in d:
            d["p_norm"] = str(d["p_norm"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad smart config: {e}") from None

    def to_dict(self):
        return asdict(self)


def kl_sym(P, Q, floor=KL_FLOOR):
    """D(P||Q) + D(Q||P) summed over the last axis.

    Accepts arrays or tensors; 1-D inputs give a scalar tensor.
    """
    P, Q = nx.as_tensor(P), nx.as_tensor(Q)
    if P.shape != Q.shape:
        raise ContractError(f"kl_sym: shape mismatch {P.shape} vs {Q.shape}")
    Pc, Qc = nx.clamp_min(P, floor), nx.clamp_min(Q, floor)
    diff = nx.sub(Pc, Qc)
    logratio = nx.sub(nx.log(Pc), nx.log(Qc))
    return nx.tensor_sum(nx.mul(diff, logratio), axis=-1)


def smoothness_penalty(model, batch, x_bar, params=None, tgt_bar=None, clean_logits=None):
    """Symmetrized KL between outputs from clean and perturbed embeddings.

    Averaged over non-pad target positions within each example, then over the
    batch. Both forwards run without dropout.
    """
    params = model.params if params is None else params
    config = model.config
    x_bar = nx.as_tensor(x_bar)
    expected = batch.src.shape + (config.d_model,)
    if x_bar.shape != expected:
        raise ContractError(f"perturbed embeddings have shape {x_bar.shape}, expected {expected}")
    if clean_logits is None:
        clean_logits = forward(params, config, batch)
    noisy_logits = forward(params, config, batch, src_embeddings=x_bar, tgt_embeddings=tgt_bar)
    per_pos = kl_sym(nx.softmax(noisy_logits, -1), nx.softmax(clean_logits, -1))
    mask = batch.tgt_mask.astype(per_pos.dtype)
    weights = mask / mask.sum(axis=1, keepdims=True) / batch.size
    return nx.tensor_sum(nx.mul(per_pos, weights))


def _pull_inside(out, anchor, violated):
    """Shrink ``out - anchor`` until ``violated`` is false everywhere.

    Rounding after a clamp can leave a value just outside the feasible set,
    sometimes by many ulps of ``out`` when ``out`` is small next to
    ``anchor``. Checks run in float64.
    """
    a64 = anchor.astype(np.float64)
    tiny = np.finfo(out.dtype).eps
    for i in range(80):
        bad = np.broadcast_to(violated(out.astype(np.float64)), out.shape)
        if not bad.any():
            break
        shrink = max(1.0 - tiny * 2.0 ** i, 0.0)
        moved = (a64 + (out.astype(np.float64) - a64) * shrink).astype(out.dtype)
        out[bad] = np.nextafter(moved[bad], anchor[bad])
    return out


def project(x_bar, x, eps, p_norm="inf"):
    """Project ``x_bar`` onto the ``eps`` ball around ``x`` (per example for p=2)."""
    x64 = x.astype(np.float64)
    d = x_bar.astype(np.float64) - x64
    axes = tuple(range(1, d.ndim))
    if p_norm == "inf":
        out = (x64 + np.clip(d, -eps, eps)).astype(x.dtype)
        return _pull_inside(out, x, lambda o: np.abs(o - x64) > eps)

    def norms(o):
        return np.sqrt(((o - x64) ** 2).sum(axis=axes, keepdims=True))

    n = norms(x_bar.astype(np.float64))
    scale = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
    out = (x64 + d * scale).astype(x.dtype)
    return _pull_inside(out, x, lambda o: norms(o) > eps)


def _normalized(g):
    axes = tuple(range(1, g.ndim))
    m = np.abs(g).max(axis=axes, keepdims=True)
    return np.where(m > 0, g / np.where(m > 0, m, 1.0), 0.0).astype(g.dtype)


def perturb_ascent(model, batch, config, rng):
    """Noisy init, then ``t_x_tilde`` normalized ascent steps with projection.

    Returns ``(x_bar, tgt_bar)``; ``tgt_bar`` is ``None`` unless decoder
    perturbation is enabled. Parameters are treated as constants.
    """
    params = model.constant_params()
    cfg = model.config
    clean = [embed_source(params, cfg, batch.src).data]
    if config.perturb_decoder:
        clean.append(embed_target(params, cfg, batch.tgt_in).data)
    bars = []
    for x in clean:
        noise = rng.normal(0.0, 1.0, size=x.shape) * config.sigma if config.sigma > 0 else 0.0
        bars.append(project((x + noise).astype(x.dtype), x, config.epsilon, config.p_norm))
    if config.t_x_tilde and config.epsilon > 0:
        clean_logits = forward(params, cfg, batch)
        for _ in range(config.t_x_tilde):
            ts = [nx.Tensor(b, requires_grad=True) for b in bars]
            with nx.Tape():
                pen = smoothness_penalty(model, batch, ts[0], params=params,
                                         tgt_bar=ts[1] if len(ts) > 1 else None, clean_logits=clean_logits)
                nx.backward(pen)
            bars = [project(b + config.eta * _normalized(t.grad if t.grad is not None else np.zeros_like(b)),
                            x, config.epsilon, config.p_norm)
                    for b, t, x in zip(bars, ts, clean)]
    return bars[0], (bars[1] if len(bars) > 1 else None)


def ratio_clip(theta_prev, theta_cand, beta, guard=1e-8):
    """Keep each entry's ratio to its previous value inside [1-beta, 1+beta].

    Entries whose previous magnitude is at most ``guard`` pass through.
    """
    prev = np.asarray(theta_prev)
    cand = np.asarray(theta_cand)
    if prev.shape != cand.shape:
        raise ContractError(f"ratio_clip: shape mismatch {prev.shape} vs {cand.shape}")
    big = np.abs(prev) > guard
    safe = np.where(big, prev, 1.0)
    ratio = np.clip(cand / safe, 1.0 - beta, 1.0 + beta)
    out = np.where(big, prev * ratio, cand).astype(cand.dtype)
    safe64 = safe.astype(np.float64)
    anchor = np.where(big, prev, cand).astype(cand.dtype)
    return _pull_inside(out, anchor, lambda o: big & (np.abs(o / safe64 - 1.0) > beta))


def smart_step(model, batch, state, train_cfg, smart_cfg, rng, lr=None):
    """One regularized fine-tuning step: ascent on the perturbation, then a clipped update.

    Returns loss and penalty.
    """
    step = state.t + 1
    if lr is None:
        lr = lr_at(train_cfg.schedule, step, state.lr, train_cfg.max_steps, train_cfg.warmup_frac)
    prev = {n: t.data.copy() for n, t in model.params.items() if not model.frozen.get(n)}
    x_bar, tgt_bar = perturb_ascent(model, batch, smart_cfg, rng)
    config = effective_config(model, train_cfg)
    nx.zero_grad(model.params.values())
    with nx.Tape():
        logits = forward(model.params, config, batch, train=True, seed=train_cfg.seed, step=step)
        loss = nx.cross_entropy_label_smoothed(logits, batch.tgt_out, train_cfg.label_smoothing)
        if smart_cfg.lambda_s > 0:
            pen = smoothness_penalty(model, batch, x_bar, tgt_bar=tgt_bar)
            total = nx.add(loss, nx.mul(pen, float(smart_cfg.lambda_s)))
        else:
            total = loss
        nx.backward(total)
    if smart_cfg.lambda_s <= 0:
        pen = smoothness_penalty(model, batch, x_bar, params=model.constant_params(), tgt_bar=tgt_bar)
    value = float(loss.data)
    check_loss(value)
    grads = collect_grads(model)
    if train_cfg.clip_norm:
        grads, _ = clip_grad_norm(grads, train_cfg.clip_norm)
    adam_update(model.params, grads, state, model.frozen, lr=lr)
    if smart_cfg.clip_enabled:
        for n, before in prev.items():
            p = model.params[n]
            p.data = ratio_clip(before, p.data, smart_cfg.beta, smart_cfg.clip_guard)
    return {"loss": value, "penalty": float(pen.data), "lr": lr, "step": step}
