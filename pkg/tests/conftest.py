import copy
import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mnmtlab import config  # noqa: E402
from mnmtlab.corpus import collate, generate_corpus  # noqa: E402
from mnmtlab.experiment import Experiment  # noqa: E402
from mnmtlab.model import Model, ModelConfig  # noqa: E402

TINY = {
    "seed": 0,
    "corpus": {
        "languages": [
            {"code": "aa", "seed": 1, "reorder": "identity"},
            {"code": "bb", "seed": 2, "reorder": "swap-adjacent-pairs"},
            {"code": "cc", "seed": 3, "reorder": "reverse-window-3"},
        ],
        "domains": [
            {"name": "generic", "concepts": [0, 20], "length": [2, 5]},
            {"name": "medical", "concepts": [15, 30], "length": [2, 5]},
        ],
        "pairs": [
            {"src": "*", "tgt": "*", "domain": "generic", "count": 40, "split": "pretrain"},
            {"src": "aa", "tgt": "bb", "domain": "medical", "count": 30, "split": "finetune"},
            {"src": "*", "tgt": "*", "domain": "generic", "count": 6, "split": "valid"},
            {"src": "aa", "tgt": "bb", "domain": "medical", "count": 6, "split": "valid"},
            {"src": "cc", "tgt": "bb", "domain": "medical", "count": 6, "split": "valid"},
            {"src": "*", "tgt": "*", "domain": "generic", "count": 6, "split": "test"},
            {"src": "aa", "tgt": "bb", "domain": "medical", "count": 6, "split": "test"},
        ],
    },
    "model": {"d_model": 16, "n_heads": 2, "ffn_dim": 32, "max_seq_len": 8},
    "pretrain": {"max_steps": 30, "batch_size": 16, "eval_every": 15},
    "finetune": {"steps": 20, "eval_every": 10, "batch_size": 8},
    "search": {"lr_grid": [1e-3, 1e-4], "t_max": 20, "eval_every": 10},
}


@pytest.fixture(scope="session")
def tiny_raw():
    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def tiny_cfg():
    return config.resolve(copy.deepcopy(TINY), environ={})


@pytest.fixture(scope="session")
def tiny(tiny_cfg):
    return Experiment(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_pretrained(tiny):
    return tiny.pretrain()


@pytest.fixture(scope="session")
def artifact_cache(request):
    path = os.environ.get("MNMTLAB_TEST_CACHE")
    return Path(path) if path else request.config.cache.mkdir("mnmtlab")


@pytest.fixture(scope="session")
def toy():
    return Experiment(config.load("toy", environ={}))


@pytest.fixture(scope="session")
def toy_pretrained(toy, artifact_cache):
    return toy.pretrained(artifact_cache)


def small_corpus(seed=0, langs=("aa", "bb", "cc"), count=8, length=(2, 5), concepts=(0, 20)):
    spec = {
        "languages": [{"code": c, "seed": i + 1, "reorder": r}
                      for i, (c, r) in enumerate(zip(langs, ["identity", "swap-adjacent-pairs", "reverse-window-3"]))],
        "domains": [{"name": "generic", "concepts": list(concepts), "length": list(length)}],
        "pairs": [{"src": "*", "tgt": "*", "domain": "generic", "count": count}],
    }
    return generate_corpus(spec, seed)


def tiny_model(vocab, seed=0, dtype=np.float64, **overrides):
    kw = dict(vocab_size=len(vocab), d_model=8, n_heads=2, n_encoder_layers=2, n_decoder_layers=2,
              ffn_dim=12, max_seq_len=8, dropout=0.0)
    kw.update(overrides)
    return Model.create(ModelConfig(**kw), seed, dtype=dtype)


def small_batch(vocab, datasets, n=2, placement="decoder"):
    exs = []
    for ds in datasets.values():
        exs.extend(ds.examples)
    return collate(exs[:n], vocab, placement)
