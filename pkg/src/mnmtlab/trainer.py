"""Training loops: generic pretraining and resumable fine-tuning trials."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import batch_stream
from .errors import ConfigError
from .model import FreezeSpec
from .optim import Checkpoint, TrainConfig, train_step
from .smart import SmartConfig, smart_step


def pretrain(model, dataset, cfg, evaluator=None, eval_every=0, on_eval=None, on_step=None,
             placement="decoder"):
    """Train ``model`` in place for ``cfg.max_steps`` steps; returns the loss history."""
    state = cfg.adam()
    stream = batch_stream(dataset, cfg.batch_size, seed=cfg.seed, placement=placement)
    losses = []
    for _ in range(cfg.max_steps):
        stats = train_step(model, next(stream), state, cfg)
        losses.append(stats["loss"])
        if on_step is not None:
            on_step(stats)
        step = stats["step"]
        if evaluator is not None and eval_every and (step % eval_every == 0 or step == cfg.max_steps):
            report = evaluator(model)
            if on_eval is not None:
                on_eval(step, report)
    return losses


@dataclass
class TrialState:
    model: object
    adam: object
    stream: object
    rng: object
    total_steps: int
    lr: float
    freeze: FreezeSpec
    step: int = 0
    history: list = field(default_factory=list)


class FineTuneTrainer:
    """Fine-tunes a pretrained checkpoint on domain data.

    ``smart`` switches the step to the SMART procedure; ``pde_mode`` rewrites
    the encoder topology of the loaded model before training.
    """

    def __init__(self, domain_data, train_cfg, smart=None, pde_mode="none", pde_layers=None,
                 placement="decoder", dtype=np.float32):
        if len(domain_data) == 0:
            raise ConfigError("domain data is empty")
        self.domain_data = domain_data
        self.train_cfg = train_cfg
        self.smart = smart
        self.pde_mode = pde_mode
        self.pde_layers = pde_layers
        self.placement = placement
        self.dtype = dtype

    def begin(self, pretrained, lr, freeze, total_steps):
        model = pretrained.to_model(self.dtype)
        if self.pde_mode != "none":
            model.config = model.config.with_pde(self.pde_mode, self.pde_layers)
            model.config.validate()
        spec = FreezeSpec.parse(freeze)
        model.freeze(spec)
        cfg = replace(self.train_cfg, max_steps=total_steps)
        stream = batch_stream(self.domain_data, cfg.batch_size, seed=cfg.seed, placement=self.placement)
        rng = np.random.default_rng([cfg.seed, 7919])
        return TrialState(model, cfg.adam(lr), stream, rng, total_steps, lr, spec)

    def _cfg(self, state):
        return replace(self.train_cfg, max_steps=state.total_steps)

    def advance(self, state, n_steps):
        cfg = self._cfg(state)
        for _ in range(n_steps):
            batch = next(state.stream)
            if self.smart is None:
                stats = train_step(state.model, batch, state.adam, cfg)
            else:
                stats = smart_step(state.model, batch, state.adam, cfg, self.smart, state.rng)
            state.step = stats["step"]
            state.history.append(stats)
        return state.history[-n_steps:] if n_steps else []

    def snapshot(self, state):
        meta = {"lr": state.lr, "freeze": state.freeze.label, "pde_mode": state.model.config.pde_mode,
                "smart": self.smart is not None}
        return Checkpoint.from_model(state.model, step=state.step, seed=self.train_cfg.seed, meta=meta)


class ModelEvaluator:
    """Callable ``checkpoint -> EvalReport`` bound to a set of test sets."""

    def __init__(self, testsets, batch_size=64, placement="decoder"):
        self.testsets = testsets
        self.batch_size = batch_size
        self.placement = placement

    def __call__(self, checkpoint):
        from .metrics import evaluate

        return evaluate(checkpoint, self.testsets, batch_size=self.batch_size, placement=self.placement)


__all__ = ["pretrain", "FineTuneTrainer", "ModelEvaluator", "TrialState", "TrainConfig", "SmartConfig"]
