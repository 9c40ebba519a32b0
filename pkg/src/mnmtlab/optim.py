"""Adam with decoupled weight decay, learning-rate schedules, the plain
training step and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import CheckpointCorruptError, CheckpointFormatError, ConfigError, ContractError, NumericError
from .model import Model, ModelConfig, forward

SCHEDULES = ("constant", "triangular")


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 1000
    label_smoothing: float = 0.1
    dropout: float | None = None  # None keeps the model's own setting
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup_frac: float = 0.1
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def adam(self, lr=None):
        return AdamState(lr=self.lr if lr is None else lr, beta1=self.beta1, beta2=self.beta2,
                         eps=self.eps, weight_decay=self.weight_decay)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from None


def lr_at(schedule, step, base_lr, total, warmup_frac=0.1):
    if not 1 <= step <= total:
        raise ContractError(f"step {step} outside [1, {total}]")
    if schedule == "constant":
        return base_lr
    if schedule == "triangular":
        warm = warmup_frac * total
        if warm > 0 and step <= warm:
            return base_lr * step / warm
        if total == warm:
            return base_lr
        return base_lr * (total - step) / (total - warm)
    raise ConfigError(f"unknown lr schedule {schedule!r}")


def adam_update(params, grads, state, frozen=None, lr=None):
    """One Adam step in place; frozen or gradient-less parameters are skipped."""
    frozen = frozen or {}
    state.t += 1
    t = state.t
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if frozen.get(name) or g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if state.weight_decay:
            data = data - lr * state.weight_decay * data
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (data - step).astype(p.data.dtype, copy=False)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        return {n: (None if g is None else g * s) for n, g in grads.items()}, total
    return grads, total


def effective_config(model, cfg):
    if cfg.dropout is None or cfg.dropout == model.config.dropout:
        return model.config
    return replace(model.config, dropout=cfg.dropout)


def collect_grads(model):
    return {n: t.grad for n, t in model.params.items() if not model.frozen.get(n)}


def check_loss(value):
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")


def train_step(model, batch, state, cfg, lr=None):
    """Label-smoothed cross entropy, backward, one Adam update."""
    step = state.t + 1
    if lr is None:
        lr = lr_at(cfg.schedule, step, state.lr, cfg.max_steps, cfg.warmup_frac)
    config = effective_config(model, cfg)
    nx.zero_grad(model.params.values())
    with nx.Tape():
        logits = forward(model.params, config, batch, train=True, seed=cfg.seed, step=step)
        loss = nx.cross_entropy_label_smoothed(logits, batch.tgt_out, cfg.label_smoothing)
        nx.backward(loss)
    value = float(loss.data)
    check_loss(value)
    grads = collect_grads(model)
    if cfg.clip_norm:
        grads, _ = clip_grad_norm(grads, cfg.clip_norm)
    adam_update(model.params, grads, state, model.frozen, lr=lr)
    return {"loss": value, "lr": lr, "step": step}


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MNMT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> np.ndarray
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = None

    @classmethod
    def from_model(cls, model, step=0, seed=0, meta=None, adam=None):
        params = {n: t.data.astype(np.float32) for n, t in model.params.items()}
        return cls(model.config, params, step, seed, dict(meta or {}), adam)

    def to_model(self, dtype=np.float32):
        params = {n: nx.Tensor(a.astype(dtype), requires_grad=True) for n, a in self.params.items()}
        return Model(self.config, params, {n: False for n in params})

    def content_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()


def _tensor_entries(ckpt):
    items = [(n, ckpt.params[n]) for n in sorted(ckpt.params)]
    if ckpt.adam is not None:
        for n in sorted(ckpt.adam.m):
            items.append((f"adam.m:{n}", ckpt.adam.m[n]))
            items.append((f"adam.v:{n}", ckpt.adam.v[n]))
    return items


def checkpoint_bytes(ckpt):
    items = _tensor_entries(ckpt)
    directory, blobs, offset = [], [], 0
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.config.to_dict(),
        "tensors": directory,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "meta": ckpt.meta,
        "optimizer": None if ckpt.adam is None else ckpt.adam.hyper(),
    }
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta] + blobs)


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


def parse_checkpoint(buf, source="<bytes>"):
    if len(buf) < 12:
        raise CheckpointCorruptError(f"{source}: truncated header")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")
    (mlen,) = struct.unpack("<I", buf[8:12])
    if 12 + mlen > len(buf):
        raise CheckpointCorruptError(f"{source}: truncated metadata block")
    try:
        header = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{source}: unreadable metadata ({e})") from None
    payload = memoryview(buf)[12 + mlen:]
    expected = 0
    tensors = {}
    for ent in header["tensors"]:
        name, shape = ent["name"], tuple(ent["shape"])
        need = int(np.prod(shape, dtype=np.int64)) * 4
        if ent["nbytes"] != need or ent["offset"] != expected:
            raise CheckpointCorruptError(f"{source}: tensor {name!r} declares shape {list(shape)} "
                                         f"inconsistent with its {ent['nbytes']} payload bytes")
        if ent["offset"] + need > len(payload):
            raise CheckpointCorruptError(f"{source}: truncated payload in tensor {name!r}")
        arr = np.frombuffer(payload[ent["offset"]:ent["offset"] + need], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
        expected += need
    if expected != len(payload):
        raise CheckpointCorruptError(f"{source}: payload has {len(payload) - expected} trailing bytes")
    config = ModelConfig.from_dict(header["model_config"])
    params = {n: a for n, a in tensors.items() if not n.startswith("adam.")}
    adam = None
    if header.get("optimizer") is not None:
        adam = AdamState(**header["optimizer"])
        for n, a in tensors.items():
            if n.startswith("adam.m:"):
                adam.m[n[7:]] = a
            elif n.startswith("adam.v:"):
                adam.v[n[7:]] = a
    return Checkpoint(config, params, header["step"], header["seed"], header.get("meta", {}), adam)


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointFormatError(f"{path}: no such checkpoint") from None
    return parse_checkpoint(buf, str(path))
