"""Threshold-driven fine-tuning search.

For each learning rate in the grid a trial restarts from the pretrained
parameters, fine-tunes up to ``t_max`` steps and is evaluated every
``eval_every`` steps. An evaluation point passes when the generic-domain
degradation on the fine-tuned pair (delta1) and the mean degradation over all
other generic directions (delta2) are within ``eps1``/``eps2``. Passing points
compete for the optimum by domain BLEU; the first failing point ends the
trial. A freezing stage then retries the winning learning rate with each
freeze spec and accepts a frozen variant only if it gives up at most ``eps3``
domain BLEU while strictly improving delta2.

Trainers and evaluators are duck-typed:

* ``trainer.begin(pretrained, lr, freeze, total_steps) -> state``,
  ``trainer.advance(state, n)`` and ``trainer.snapshot(state) -> Checkpoint``;
* ``evaluator(checkpoint) -> EvalReport``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, ResumeMismatchError
from .metrics import compute_deltas
from .model import FreezeSpec
from .optim import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class SearchConfig:
    lr_grid: tuple = (3e-3, 1e-3, 3e-4, 1e-4)
    t_max: int = 600
    eval_every: int = 100
    eps1: float = 2.0
    eps2: float = 1.0
    eps3: float = 1.0
    combinator: str = "and"
    freeze_grid: tuple = ("none", "encoder-embeddings")
    pair: tuple = ("aa", "bb")
    domain: str = "medical"

    def __post_init__(self):
        if not self.lr_grid:
            raise ConfigError("lr_grid is empty")
        if not self.freeze_grid:
            raise ConfigError("freeze_grid is empty")
        if self.t_max < 1 or self.eval_every < 1 or self.eval_every > self.t_max:
            raise ConfigError("need 1 <= eval_every <= t_max")
        if self.combinator not in ("and", "or"):
            raise ConfigError(f"combinator must be 'and' or 'or', got {self.combinator!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("lr_grid", "freeze_grid", "pair"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("eps1", "eps2", "eps3"):
            if k in d and d[k] is None:
                d[k] = math.inf
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad search config: {e}") from None

    def to_dict(self):
        d = asdict(self)
        for k in ("lr_grid", "freeze_grid", "pair"):
            d[k] = list(d[k])
        for k in ("eps1", "eps2", "eps3"):
            if math.isinf(d[k]):
                d[k] = None
        return d

    def passes(self, d1, d2):
        a, b = d1 <= self.eps1, d2 <= self.eps2
        return (a and b) if self.combinator == "and" else (a or b)


@dataclass(frozen=True)
class EvalPoint:
    step: int
    domain_bleu: float
    delta1: float
    delta2: float
    passed: bool


def selection_key(point, trial_index=0):
    """Total order for the optimum: higher domain BLEU, then lower delta2,
    then earlier step, then earlier trial."""
    return (-point.domain_bleu, point.delta2, point.step, trial_index)


@dataclass
class TrialRecord:
    index: int
    lr: float
    freeze: str
    points: list = field(default_factory=list)
    stop_reason: str = ""
    best: EvalPoint | None = None
    checkpoint: object = field(default=None, compare=False, repr=False)
    checkpoint_hash: str | None = None

    @property
    def key(self):
        return f"{self.index}:lr={self.lr:g}:freeze={self.freeze}"


@dataclass
class SearchResult:
    best_trial: int | None
    best: EvalPoint | None
    lr: float | None
    freeze: str | None
    trials: list
    no_improvement: bool
    checkpoint: object = field(default=None, compare=False, repr=False)
    checkpoint_hash: str | None = None

    def summary(self):
        return {"best_trial": self.best_trial, "lr": self.lr, "freeze": self.freeze,
                "no_improvement": self.no_improvement, "checkpoint_hash": self.checkpoint_hash,
                "best": None if self.best is None else asdict(self.best)}


def run_trial(pretrained, lr, freeze, config, trainer, evaluator, baseline, index=0, on_point=None):
    """One learning-rate/freeze trial; see the module docstring for the rules."""
    freeze = FreezeSpec.parse(freeze)
    record = TrialRecord(index=index, lr=lr, freeze=freeze.label)
    state = trainer.begin(pretrained, lr, freeze, config.t_max)
    src, tgt = config.pair
    domain_key = (src, tgt, config.domain)
    step = 0
    record.stop_reason = "budget-exhausted"
    while step < config.t_max:
        n = min(config.eval_every, config.t_max - step)
        trainer.advance(state, n)
        step += n
        ckpt = trainer.snapshot(state)
        report = evaluator(ckpt)
        if set(report.bleu) != set(baseline.bleu):
            raise ConfigError("evaluator returned a different direction set than the baseline")
        d1, d2 = compute_deltas(baseline, report, config.pair)
        point = EvalPoint(step, report.score(domain_key), d1, d2, config.passes(d1, d2))
        record.points.append(point)
        if on_point is not None:
            on_point(record, point)
        if not point.passed:
            record.stop_reason = "threshold-violation"
            break
        if record.best is None or selection_key(point) < selection_key(record.best):
            record.best = point
            record.checkpoint = ckpt
            record.checkpoint_hash = ckpt.content_hash()
    return record


def _best_of(records):
    best = None
    for r in records:
        if r.best is None:
            continue
        if best is None or selection_key(r.best, r.index) < selection_key(best.best, best.index):
            best = r
    return best


class Ledger:
    """Newline-delimited JSON: a header line, one line per evaluation point
    and one closing line per finished trial."""

    def __init__(self, path, ckpt_dir=None):
        self.path = Path(path)
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else self.path.parent / (self.path.stem + "_ckpt")

    def _append(self, obj):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(obj, sort_keys=True) + "\n")

    def start(self, header, resume):
        """Return finished trials from an earlier run (if resuming)."""
        done = {}
        if resume and self.path.exists():
            lines = [json.loads(l) for l in self.path.read_text(encoding="utf-8").splitlines() if l.strip()]
            if not lines or lines[0].get("kind") != "search":
                raise ResumeMismatchError(f"{self.path}: not a search ledger")
            if lines[0]["header"] != header:
                raise ResumeMismatchError(f"{self.path}: ledger was written for a different configuration")
            points = {}
            for obj in lines[1:]:
                if obj["kind"] == "point":
                    points.setdefault(obj["trial"], []).append(obj)
                elif obj["kind"] == "trial":
                    done[obj["trial"]] = (obj, points.get(obj["trial"], []))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self._append({"kind": "search", "header": header})
        restored = {}
        for key, (obj, pts) in done.items():
            for p in pts:
                self._append(p)
            self._append(obj)
            restored[key] = self._restore(obj, pts)
        return restored

    def _restore(self, obj, pts):
        rec = TrialRecord(index=obj["index"], lr=obj["lr"], freeze=obj["freeze"],
                          stop_reason=obj["stop_reason"])
        rec.points = [EvalPoint(p["step"], p["domain_bleu"], p["delta1"], p["delta2"], p["passed"]) for p in pts]
        if obj["best_step"] is not None:
            rec.best = next(p for p in rec.points if p.step == obj["best_step"])
            rec.checkpoint = load_checkpoint(obj["checkpoint"])
            rec.checkpoint_hash = obj["checkpoint_hash"]
            if rec.checkpoint.content_hash() != rec.checkpoint_hash:
                raise ResumeMismatchError(f"checkpoint {obj['checkpoint']} does not match the ledger")
        return rec

    def point(self, record, point):
        self._append({"kind": "point", "trial": record.key, **asdict(point)})

    def finish(self, record):
        path = None
        if record.checkpoint is not None:
            path = str(save_checkpoint(self.ckpt_dir / f"trial-{record.index}.mnmt", record.checkpoint))
        self._append({"kind": "trial", "trial": record.key, "index": record.index, "lr": record.lr,
                      "freeze": record.freeze, "stop_reason": record.stop_reason,
                      "best_step": None if record.best is None else record.best.step,
                      "checkpoint": path, "checkpoint_hash": record.checkpoint_hash})


def _trial_job(args):
    pretrained, lr, freeze, config, trainer, evaluator, baseline, index = args
    return run_trial(pretrained, lr, freeze, config, trainer, evaluator, baseline, index)


def freeze_stage(incumbent, pretrained, config, trainer, evaluator, baseline, start_index, run=None):
    """Retry the incumbent's learning rate with each remaining freeze spec.

    Returns ``(new_incumbent, records)``.
    """
    run = run or (lambda lr, fz, idx: run_trial(pretrained, lr, fz, config, trainer, evaluator, baseline, idx))
    records = []
    idx = start_index
    first = FreezeSpec.parse(config.freeze_grid[0]).label
    for spec in config.freeze_grid:
        label = FreezeSpec.parse(spec).label
        if label == first:
            continue
        rec = run(incumbent.lr, spec, idx)
        idx += 1
        records.append(rec)
        cand, inc = rec.best, incumbent.best
        if cand is None:
            continue
        if inc.domain_bleu - cand.domain_bleu <= config.eps3 and cand.delta2 < inc.delta2:
            incumbent = rec
    return incumbent, records


def run_search(pretrained, config, trainer, evaluator, ledger=None, resume=False, jobs=1,
               interrupt_after=None):
    """Learning-rate sweep followed by the freezing stage.

    ``ledger`` (path) makes the search resumable: finished trials recorded
    there are restored instead of re-run. ``interrupt_after`` raises
    ``KeyboardInterrupt`` after that many evaluation points (testing hook).
    """
    baseline = evaluator(pretrained)
    header = {"config": config.to_dict(), "pretrained": pretrained.content_hash(),
              "baseline": {"|".join(k): round(v.score, 9) for k, v in sorted(baseline.bleu.items())}}
    book = Ledger(ledger) if ledger else None
    restored = book.start(header, resume) if book else {}
    seen = [0]

    def on_point(record, point):
        if book:
            book.point(record, point)
        seen[0] += 1
        if interrupt_after is not None and seen[0] >= interrupt_after:
            raise KeyboardInterrupt("search interrupted")

    def run(lr, freeze, index):
        key = TrialRecord(index=index, lr=lr, freeze=FreezeSpec.parse(freeze).label).key
        if key in restored:
            return restored[key]
        rec = run_trial(pretrained, lr, freeze, config, trainer, evaluator, baseline, index, on_point)
        if book:
            book.finish(rec)
        return rec

    first = config.freeze_grid[0]
    todo = [(i, lr) for i, lr in enumerate(config.lr_grid)]
    records = [None] * len(todo)
    if jobs > 1:
        pending = []
        for i, lr in todo:
            key = TrialRecord(index=i, lr=lr, freeze=FreezeSpec.parse(first).label).key
            if key in restored:
                records[i] = restored[key]
            else:
                pending.append((pretrained, lr, first, config, trainer, evaluator, baseline, i))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_trial_job, pending):
                records[rec.index] = rec
                if book:
                    for p in rec.points:
                        book.point(rec, p)
                    book.finish(rec)
    else:
        for i, lr in todo:
            records[i] = run(lr, first, i)

    best = _best_of(records)
    trials = list(records)
    if best is None:
        return SearchResult(None, None, None, None, trials, True, pretrained, pretrained.content_hash())
    best, extra = freeze_stage(best, pretrained, config, trainer, evaluator, baseline, len(records), run)
    trials.extend(extra)
    return SearchResult(best.index, best.best, best.lr, best.freeze, trials, False,
                        best.checkpoint, best.checkpoint_hash)
