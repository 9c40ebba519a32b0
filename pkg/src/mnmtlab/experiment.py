"""Experiment recipe: turns a resolved config into corpora, models and trainers."""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import generate_corpus, load_corpus_dir, merge
from .errors import ConfigError, DataError
from .metrics import testset_map
from .model import Model, ModelConfig
from .optim import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint
from .search import SearchConfig
from .smart import SmartConfig
from .trainer import FineTuneTrainer, ModelEvaluator, pretrain


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Experiment:
    """Lazily materializes everything a config describes.

    ``data_dir`` points at a corpus written by ``gen-data``; without it the
    corpus is generated in memory from the config.
    """

    def __init__(self, cfg, data_dir=None):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.data_dir = data_dir
        self._data = None

    # -- data ---------------------------------------------------------------

    @property
    def data(self):
        if self._data is None:
            if self.data_dir is not None:
                self._data = load_corpus_dir(self.data_dir)
            else:
                self._data = generate_corpus(self.cfg["corpus"], self.seed)
        return self._data

    @property
    def vocab(self):
        return self.data[0]

    def split(self, name):
        label = self.cfg["splits"][name]
        out = {k: v for k, v in self.data[1].items() if k[0] == label}
        if not out:
            raise DataError(f"corpus has no {label!r} split")
        return out

    def pretrain_data(self):
        return merge(self.split("pretrain").values())

    @property
    def pair(self):
        return tuple(self.cfg["finetune"]["pair"])

    @property
    def domain(self):
        return self.cfg["finetune"]["domain"]

    def finetune_data(self):
        src, tgt = self.pair
        key = (self.cfg["splits"]["finetune"], self.domain, src, tgt)
        try:
            return self.data[1][key]
        except KeyError:
            raise DataError(f"corpus has no fine-tuning data for {src}->{tgt} {self.domain}") from None

    def testsets(self, which="valid"):
        return testset_map(self.data[1], self.cfg["splits"][which])

    def evaluator(self, which="valid"):
        return ModelEvaluator(self.testsets(which))

    # -- model and training configs ----------------------------------------

    def model_config(self):
        return ModelConfig.from_dict({**self.cfg["model"], "vocab_size": len(self.vocab)})

    def pretrain_config(self):
        d = {k: v for k, v in self.cfg["pretrain"].items() if k != "eval_every"}
        return TrainConfig.from_dict({**d, "seed": self.seed})

    def finetune_config(self, **overrides):
        ft = self.cfg["finetune"]
        keys = ("batch_size", "label_smoothing", "dropout", "weight_decay", "schedule")
        cfg = TrainConfig.from_dict({**{k: ft[k] for k in keys}, "lr": ft["lr"], "max_steps": ft["steps"],
                                     "seed": self.seed})
        return replace(cfg, **overrides) if overrides else cfg

    def smart_config(self, **overrides):
        return SmartConfig.from_dict({**self.cfg["smart"], **overrides})

    def search_config(self, **overrides):
        d = {**self.cfg["search"], "pair": list(self.pair), "domain": self.domain, **overrides}
        return SearchConfig.from_dict(d)

    def trainer(self, smart=None, pde_mode="none", pde_layers=None, dtype=np.float32, **train_overrides):
        if smart is True:
            smart = self.smart_config()
        return FineTuneTrainer(self.finetune_data(), self.finetune_config(**train_overrides), smart=smart or None,
                               pde_mode=pde_mode, pde_layers=pde_layers, dtype=dtype)

    # -- pretraining ---------------------------------------------------------

    def pretrain_key(self):
        return config_hash({"corpus": self.cfg["corpus"], "model": self.cfg["model"],
                            "pretrain": self.cfg["pretrain"], "splits": self.cfg["splits"], "seed": self.seed})

    def pretrain(self, on_eval=None, on_step=None, evaluator=None):
        model = Model.create(self.model_config(), self.seed)
        cfg = self.pretrain_config()
        eval_every = self.cfg["pretrain"]["eval_every"]
        if on_eval is not None and evaluator is None:
            evaluator = self.evaluator("valid")
        losses = pretrain(model, self.pretrain_data(), cfg,
                          evaluator=evaluator,
                          eval_every=eval_every, on_eval=on_eval, on_step=on_step)
        return Checkpoint.from_model(model, step=cfg.max_steps, seed=self.seed,
                                     meta={"stage": "pretrain", "final_loss": losses[-1]})

    def pretrained(self, cache_dir):
        """Pretrained checkpoint, reused from ``cache_dir`` when the config matches."""
        path = Path(cache_dir) / f"pretrain-{self.pretrain_key()[:16]}.mnmt"
        if path.exists():
            ckpt = load_checkpoint(path)
            if ckpt.config.vocab_size != len(self.vocab):
                raise ConfigError(f"{path}: cached checkpoint does not match the corpus")
            return ckpt
        ckpt = self.pretrain()
        save_checkpoint(path, ckpt)
        return ckpt
