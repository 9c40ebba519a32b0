"""A miniature multilingual encoder-decoder transformer.

Post-norm blocks (sublayer, optional residual add, then layer norm), learned
positional embeddings and untied encoder/decoder/output embeddings by default.
The encoder can drop residual connections in chosen layers (``pde_mode``),
which relaxes the positional correspondence between encoder states and input
tokens.
"""

from __future__ import annotations

import fnmatch
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .corpus import EOS, PAD, collate, ParallelExample
from .errors import ConfigError, ContractError

PDE_MODES = ("none", "penultimate_all", "penultimate_attention_only")
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 16
    dropout: float = 0.1
    pde_mode: str = "none"
    pde_layers: tuple | None = None  # overrides the penultimate-layer default
    tie_embeddings: bool = False
    positional: str = "learned"  # or "sinusoidal" (fixed, not a parameter)
    activation: str = "gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.vocab_size < 5:
            raise ConfigError("vocab_size too small")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.pde_mode not in PDE_MODES:
            raise ConfigError(f"unknown pde_mode {self.pde_mode!r}")
        if self.pde_mode != "none" and self.n_encoder_layers < 2:
            raise ConfigError("pde_mode needs n_encoder_layers >= 2 (no penultimate layer)")
        if self.pde_layers is not None:
            for i in self.pde_layers:
                if not 0 <= i < self.n_encoder_layers:
                    raise ConfigError(f"pde layer index {i} out of range")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.positional not in ("learned", "sinusoidal"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        d = asdict(self)
        d["pde_layers"] = None if self.pde_layers is None else list(self.pde_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("pde_layers") is not None:
            d["pde_layers"] = tuple(d["pde_layers"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None

    def with_pde(self, mode, layers=None):
        return replace(self, pde_mode=mode, pde_layers=None if layers is None else tuple(layers))


def pde_layer_indices(config):
    if config.pde_mode == "none":
        return ()
    if config.pde_layers is not None:
        return tuple(config.pde_layers)
    return (config.n_encoder_layers - 2,)


def residual_topology(config):
    """Encoder residual connections as ``(layer, sublayer, present)`` triples."""
    removed = pde_layer_indices(config)
    out = []
    for i in range(config.n_encoder_layers):
        cut = i in removed
        out.append((i, "self_attn", not cut))
        out.append((i, "ffn", not (cut and config.pde_mode == "penultimate_all")))
    return out


# --------------------------------------------------------------------------
# parameters


def param_shapes(config):
    d, f, V, P = config.d_model, config.ffn_dim, config.vocab_size, config.max_seq_len
    shapes = {}
    if config.tie_embeddings:
        shapes["embeddings.token"] = (V, d)
    else:
        shapes["encoder.embeddings.token"] = (V, d)
        shapes["decoder.embeddings.token"] = (V, d)
    if config.positional == "learned":
        shapes["encoder.embeddings.position"] = (P, d)
        shapes["decoder.embeddings.position"] = (P, d)

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.{p}.weight"] = (d, d)
            shapes[f"{prefix}.{p}.bias"] = (d,)

    def block(prefix, norms):
        shapes[f"{prefix}.ffn.fc1.weight"] = (d, f)
        shapes[f"{prefix}.ffn.fc1.bias"] = (f,)
        shapes[f"{prefix}.ffn.fc2.weight"] = (f, d)
        shapes[f"{prefix}.ffn.fc2.bias"] = (d,)
        for n in norms:
            shapes[f"{prefix}.{n}.gain"] = (d,)
            shapes[f"{prefix}.{n}.bias"] = (d,)

    for i in range(config.n_encoder_layers):
        attn(f"encoder.layers.{i}.self_attn")
        block(f"encoder.layers.{i}", ("norm1", "norm2"))
    for i in range(config.n_decoder_layers):
        attn(f"decoder.layers.{i}.self_attn")
        attn(f"decoder.layers.{i}.cross_attn")
        block(f"decoder.layers.{i}", ("norm1", "norm2", "norm3"))
    if not config.tie_embeddings:
        shapes["output.weight"] = (d, V)
    shapes["output.bias"] = (V,)
    return shapes


def init_params(config, seed, dtype=np.float32):
    """Uniform(-1/sqrt(d_model), 1/sqrt(d_model)) weights, zero biases, unit norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(config.d_model)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.uniform(-scale, scale, size=shape)
        params[name] = nx.Tensor(arr.astype(dtype), requires_grad=True)
    return params


@dataclass
class FreezeSpec:
    """Glob patterns over parameter names; a few readable aliases are expanded."""

    patterns: tuple = ()

    ALIASES = {
        "none": (),
        "encoder-embeddings": ("encoder.embeddings.*",),
        "decoder-embeddings": ("decoder.embeddings.*",),
    }

    @classmethod
    def parse(cls, text):
        if text is None or isinstance(text, FreezeSpec):
            return text or cls()
        if isinstance(text, (list, tuple)):
            pats = []
            for t in text:
                pats.extend(cls.parse(t).patterns)
            return cls(tuple(pats))
        text = text.strip()
        if text in cls.ALIASES:
            return cls(cls.ALIASES[text])
        if text.startswith("encoder-layers:"):
            k = int(text.split(":", 1)[1])
            return cls(tuple(f"encoder.layers.{i}.*" for i in range(k)))
        return cls(tuple(p for p in text.split(",") if p))

    @property
    def label(self):
        for alias, pats in self.ALIASES.items():
            if pats == tuple(self.patterns):
                return alias
        return ",".join(self.patterns)


def apply_freeze(params, spec):
    """Mark matched parameters frozen; returns the ``name -> frozen`` mask."""
    spec = FreezeSpec.parse(spec)
    mask = {name: False for name in params}
    for pat in spec.patterns:
        hits = [n for n in params if fnmatch.fnmatchcase(n, pat)]
        if not hits:
            raise ConfigError(f"freeze pattern {pat!r} matches no parameter")
        for n in hits:
            mask[n] = True
    for name, t in params.items():
        t.requires_grad = not mask[name]
    return mask


@dataclass
class Model:
    config: ModelConfig
    params: dict
    frozen: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, seed, dtype=np.float32):
        params = init_params(config, seed, dtype)
        return cls(config, params, {n: False for n in params})

    def freeze(self, spec):
        self.frozen = apply_freeze(self.params, spec)
        return self.frozen

    def clone(self):
        params = {n: nx.Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return Model(self.config, params, dict(self.frozen))

    def constant_params(self):
        """Views of the parameters that never receive gradients."""
        return {n: nx.Tensor(t.data) for n, t in self.params.items()}

    def astype(self, dtype):
        params = {n: nx.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return Model(self.config, params, dict(self.frozen))

    def n_params(self):
        return sum(t.data.size for t in self.params.values())


# --------------------------------------------------------------------------
# forward


def _site(name):
    return zlib.crc32(name.encode())


class _Ctx:
    __slots__ = ("params", "config", "train", "seed", "step")

    def __init__(self, params, config, train, seed, step):
        self.params, self.config, self.train, self.seed, self.step = params, config, train, seed, step

    def drop(self, x, site):
        return nx.dropout(x, self.config.dropout, [self.seed, _site(site), self.step], self.train)

    def linear(self, x, prefix):
        p = self.params
        return nx.linear(x, p[prefix + ".weight"], p[prefix + ".bias"])

    def norm(self, x, prefix):
        p = self.params
        return nx.layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"], self.config.ln_eps)


def _sinusoidal(n, d, dtype):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def _split_heads(x, h):
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(ctx, x_q, x_kv, prefix, bias):
    h = ctx.config.n_heads
    q = _split_heads(ctx.linear(x_q, prefix + ".q"), h)
    k = _split_heads(ctx.linear(x_kv, prefix + ".k"), h)
    v = _split_heads(ctx.linear(x_kv, prefix + ".v"), h)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    attn = nx.softmax(nx.add(scores, bias), axis=-1)
    return ctx.linear(_merge_heads(nx.matmul(attn, v)), prefix + ".o")


def _ffn(ctx, x, prefix):
    act = nx.gelu if ctx.config.activation == "gelu" else nx.relu
    return ctx.linear(act(ctx.linear(x, prefix + ".fc1")), prefix + ".fc2")


def _sublayer(ctx, x, out, residual, norm, site):
    out = ctx.drop(out, site)
    return ctx.norm(nx.add(x, out) if residual else out, norm)


def _token_table(params, config, side):
    return params["embeddings.token" if config.tie_embeddings else f"{side}.embeddings.token"]


def _positions(params, config, side, n, dtype):
    if config.positional == "learned":
        return nx.embedding(params[f"{side}.embeddings.position"], np.arange(n))
    return nx.Tensor(_sinusoidal(n, config.d_model, dtype))


def _check_ids(config, ids, what):
    if ids.shape[1] > config.max_seq_len:
        raise ContractError(f"{what} length {ids.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if ids.size and ids.max() >= config.vocab_size:
        raise ContractError(f"{what} contains token id >= vocab_size={config.vocab_size}")


def embed_source(params, config, src):
    """Token embeddings of the encoder input (before positions are added)."""
    _check_ids(config, src, "source")
    return nx.embedding(_token_table(params, config, "encoder"), src)


def embed_target(params, config, tgt_in):
    _check_ids(config, tgt_in, "target")
    return nx.embedding(_token_table(params, config, "decoder"), tgt_in)


def encode(params, config, src, src_mask, train=False, seed=0, step=0, src_embeddings=None):
    ctx = _Ctx(params, config, train, seed, step)
    x = embed_source(params, config, src) if src_embeddings is None else nx.as_tensor(src_embeddings)
    if src_embeddings is not None:
        _check_ids(config, src, "source")
    x = nx.add(x, _positions(params, config, "encoder", src.shape[1], x.dtype))
    x = ctx.drop(x, "encoder.embeddings")
    bias = np.where(src_mask, 0.0, NEG_INF).astype(x.dtype)[:, None, None, :]
    removed = pde_layer_indices(config)
    for i in range(config.n_encoder_layers):
        pre = f"encoder.layers.{i}"
        cut = i in removed
        a = _attention(ctx, x, x, pre + ".self_attn", bias)
        x = _sublayer(ctx, x, a, not cut, pre + ".norm1", pre + ".drop1")
        f = _ffn(ctx, x, pre + ".ffn")
        keep = not (cut and config.pde_mode == "penultimate_all")
        x = _sublayer(ctx, x, f, keep, pre + ".norm2", pre + ".drop2")
    return x


def decode(params, config, memory, src_mask, tgt_in, train=False, seed=0, step=0, tgt_embeddings=None):
    ctx = _Ctx(params, config, train, seed, step)
    T = tgt_in.shape[1]
    y = embed_target(params, config, tgt_in) if tgt_embeddings is None else nx.as_tensor(tgt_embeddings)
    y = nx.add(y, _positions(params, config, "decoder", T, y.dtype))
    y = ctx.drop(y, "decoder.embeddings")
    dtype = y.dtype
    causal = np.triu(np.full((T, T), NEG_INF), k=1).astype(dtype)[None, None]
    cross = np.where(src_mask, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
    for i in range(config.n_decoder_layers):
        pre = f"decoder.layers.{i}"
        a = _attention(ctx, y, y, pre + ".self_attn", causal)
        y = _sublayer(ctx, y, a, True, pre + ".norm1", pre + ".drop1")
        c = _attention(ctx, y, memory, pre + ".cross_attn", cross)
        y = _sublayer(ctx, y, c, True, pre + ".norm2", pre + ".drop2")
        f = _ffn(ctx, y, pre + ".ffn")
        y = _sublayer(ctx, y, f, True, pre + ".norm3", pre + ".drop3")
    if config.tie_embeddings:
        w = nx.transpose(params["embeddings.token"], (1, 0))
    else:
        w = params["output.weight"]
    return nx.linear(y, w, params["output.bias"])


def forward(params, config, batch, train=False, seed=0, step=0, src_embeddings=None, tgt_embeddings=None):
    """Teacher-forced logits of shape ``(batch, target_len, vocab)``."""
    memory = encode(params, config, batch.src, batch.src_mask, train, seed, step, src_embeddings)
    return decode(params, config, memory, batch.src_mask, batch.tgt_in, train, seed, step, tgt_embeddings)


# --------------------------------------------------------------------------
# decoding


def greedy_decode_batch(params, config, batch, max_len=None):
    """Argmax decoding from each row's start token; returns id lists without eos."""
    limit = config.max_seq_len if max_len is None else max_len
    if limit > config.max_seq_len:
        raise ContractError(f"max_len={limit} exceeds max_seq_len={config.max_seq_len}")
    params = {n: (t if not t.requires_grad else nx.Tensor(t.data)) for n, t in params.items()}
    memory = encode(params, config, batch.src, batch.src_mask)
    b = batch.src.shape[0]
    ys = batch.tgt_in[:, :1].copy()
    done = np.zeros(b, dtype=bool)
    out = [[] for _ in range(b)]
    for _ in range(limit):
        logits = decode(params, config, memory, batch.src_mask, ys).data[:, -1, :]
        nxt = logits.argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all() or ys.shape[1] >= config.max_seq_len:
            break
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
    return out


def greedy_decode(params, config, source_ids, source_lang, target_lang, vocab, max_len=None,
                  placement="decoder"):
    ids = tuple(int(i) for i in source_ids)
    if not ids or ids[-1] != EOS:
        ids = ids + (EOS,)
    ex = ParallelExample(ids, (EOS,), source_lang, target_lang, "")
    batch = collate([ex], vocab, placement)
    return greedy_decode_batch(params, config, batch, max_len)[0]
