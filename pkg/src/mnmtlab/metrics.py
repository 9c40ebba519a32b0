"""Corpus BLEU, multi-direction evaluation and the retention deltas.

BLEU variant (fixed, so that scores are bit-reproducible): modified n-gram
precision for n = 1..4 with per-segment clipping, counts pooled over the
corpus; for n >= 2 a pooled numerator of zero is smoothed to (0+1)/(den+1);
brevity penalty exp(1 - r/c) when c <= r; score 0 when the hypothesis side is
empty or no unigram matches.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EOS, PAD, collate
from .errors import ConfigError, ContractError
from .model import greedy_decode_batch

MAX_N = 4
GENERIC = "generic"
CSV_HEADER = ["run_id", "step", "src_lang", "tgt_lang", "domain", "bleu", "p1", "p2", "p3", "p4", "bp"]


@dataclass(frozen=True)
class BleuReport:
    precisions: tuple
    bp: float
    hyp_len: int
    ref_len: int
    score: float


def _segment(s):
    if isinstance(s, str):
        return s.split()
    return list(s)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses, references):
    hyps = [_segment(h) for h in hypotheses]
    refs = [_segment(r) for r in references]
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ContractError("corpus_bleu needs at least one segment")
    num = [0] * MAX_N
    den = [0] * MAX_N
    for h, r in zip(hyps, refs):
        for n in range(1, MAX_N + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            num[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            den[n - 1] += max(len(h) - n + 1, 0)
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    precisions = []
    for n in range(MAX_N):
        if n > 0 and num[n] == 0:
            precisions.append((num[n] + 1) / (den[n] + 1))
        else:
            precisions.append(num[n] / den[n] if den[n] else 0.0)
    if c == 0:
        return BleuReport(tuple(precisions), 0.0, 0, r, 0.0)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if precisions[0] == 0.0:
        return BleuReport(tuple(precisions), bp, c, r, 0.0)
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_N)
    return BleuReport(tuple(precisions), bp, c, r, score)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    bleu: dict  # (src, tgt, domain) -> BleuReport

    def score(self, direction):
        try:
            return self.bleu[tuple(direction)].score
        except KeyError:
            raise ContractError(f"direction {direction} missing from report") from None

    def scores(self):
        return {k: v.score for k, v in self.bleu.items()}

    def directions(self):
        return sorted(self.bleu)

    def mean(self, domain=GENERIC, exclude=()):
        vals = [v.score for k, v in self.bleu.items() if k[2] == domain and k not in exclude]
        return float(np.mean(vals)) if vals else float("nan")


def strip_ids(ids):
    out = []
    for i in ids:
        if i == EOS:
            break
        if i != PAD:
            out.append(int(i))
    return out


def model_translator(model, batch_size=64, max_len=None, placement="decoder"):
    """Greedy-decoding translate function bound to a model or checkpoint."""
    if hasattr(model, "to_model"):
        model = model.to_model()
    params, config = model.constant_params(), model.config

    def translate(dataset):
        hyps = []
        for i in range(0, len(dataset), batch_size):
            batch = collate(dataset.examples[i:i + batch_size], dataset.vocab, placement)
            hyps.extend(greedy_decode_batch(params, config, batch, max_len))
        return hyps

    translate.vocab_size = config.vocab_size
    return translate


def evaluate(model, testsets, translate=None, batch_size=64, max_len=None, placement="decoder"):
    """Greedy-decode every test source and score each direction with corpus BLEU.

    ``model`` may be a :class:`Model`, a checkpoint, or ``None`` when an
    explicit ``translate(dataset) -> list of id lists`` is supplied.
    """
    if translate is None:
        translate = model_translator(model, batch_size, max_len, placement)
    vsize = getattr(translate, "vocab_size", None)
    report = {}
    for direction in sorted(testsets):
        ds = testsets[direction]
        if not len(ds):
            raise ContractError(f"empty test set for {direction}")
        if vsize is not None and len(ds.vocab) != vsize:
            raise ConfigError(f"direction {direction}: vocabulary size {len(ds.vocab)} "
                              f"does not match model vocab_size={vsize}")
        hyps = translate(ds)
        refs = [strip_ids(ex.tgt) for ex in ds.examples]
        report[tuple(direction)] = corpus_bleu([strip_ids(h) for h in hyps], refs)
    return EvalReport(report)


def testset_map(datasets, split):
    """Select ``split`` from a generated-corpus mapping, keyed by direction."""
    return {(src, tgt, dom): ds for (sp, dom, src, tgt), ds in datasets.items() if sp == split}


def compute_deltas(baseline, current, pair, domain=GENERIC):
    """(delta1, delta2): baseline minus current BLEU on the pair's generic
    direction, and the mean of the same over every other generic direction."""
    src, tgt = pair
    key = (src, tgt, domain)
    if key not in baseline.bleu or key not in current.bleu:
        raise ContractError(f"fine-tuned direction {key} missing from report")
    d1 = baseline.bleu[key].score - current.bleu[key].score
    others = sorted(k for k in baseline.bleu if k[2] == domain and k != key)
    if not others:
        raise ContractError("no other generic directions to average over")
    missing = [k for k in others if k not in current.bleu]
    if missing:
        raise ContractError(f"directions {missing} missing from current report")
    d2 = float(np.mean([baseline.bleu[k].score - current.bleu[k].score for k in others]))
    return d1, d2


# --------------------------------------------------------------------------
# report CSV


def report_rows(run_id, step, report):
    rows = []
    for (src, tgt, dom), b in sorted(report.bleu.items()):
        p = b.precisions
        rows.append([run_id, step, src, tgt, dom, f"{b.score:.6f}",
                     f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", f"{p[3]:.6f}", f"{b.bp:.6f}"])
    return rows


class ReportWriter:
    """Appends one row per direction per evaluation point."""

    def __init__(self, path, run_id):
        self.path = Path(path)
        self.run_id = run_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(CSV_HEADER)

    def write(self, step, report):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerows(report_rows(self.run_id, step, report))


def read_report(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected report header {header}")
        return [dict(zip(CSV_HEADER, row)) for row in reader]
