"""Synthetic multilingual parallel corpora, toy tokenization and TSV I/O.

Every synthetic language is a relabelling of one shared pivot vocabulary of
concepts plus a deterministic local word-order rule. Translation between two
synthetic languages is therefore exactly computable, which is what lets the
corpus carry its own reference oracle.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
REORDER_RULES = ("identity", "swap-adjacent-pairs", "reverse-window-3")


def lang_token(code):
    return f"<2{code}>"


class Vocabulary:
    """Reserved ids, then one language token per language, then content tokens."""

    def __init__(self, languages, tokens=()):
        self.languages = list(languages)
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError("duplicate language code in vocabulary")
        self.itos = list(RESERVED) + [lang_token(c) for c in self.languages]
        self.n_special = len(self.itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token in self.stoi:
            if self.stoi[token] < self.n_special:
                raise ConfigError(f"content token {token!r} collides with a reserved token")
            return self.stoi[token]
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def content_tokens(self):
        return self.itos[self.n_special:]

    def lang_id(self, code):
        try:
            return self.stoi[lang_token(code)]
        except KeyError:
            raise ConfigError(f"unknown language code {code!r}") from None

    def id_of(self, token):
        i = self.stoi.get(token, UNK)
        # reserved and language-tag strings inside running text are not control tokens
        return UNK if i < self.n_special else i

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.content_tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, languages):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(languages, [ln for ln in lines if ln])


def tokenize(text, vocab):
    """Whitespace words to ids, eos-terminated; unknown words become ``<unk>``."""
    return [vocab.id_of(w) for w in text.split()] + [EOS]


def detokenize(ids, vocab):
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i == PAD:
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# --------------------------------------------------------------------------
# synthetic languages


def reorder(seq, rule):
    seq = list(seq)
    if rule == "identity":
        return seq
    if rule == "swap-adjacent-pairs":
        out = seq[:]
        for i in range(0, len(seq) - 1, 2):
            out[i], out[i + 1] = seq[i + 1], seq[i]
        return out
    if rule == "reverse-window-3":
        out = []
        for i in range(0, len(seq), 3):
            out.extend(reversed(seq[i:i + 3]))
        return out
    raise ConfigError(f"unknown reorder rule {rule!r}")


def reorder_inverse(seq, rule):
    # apply the rule to position indices and invert that permutation
    n = len(seq)
    perm = reorder(range(n), rule)
    out = [None] * n
    for dst, src in enumerate(perm):
        out[src] = seq[dst]
    return out


@dataclass(frozen=True)
class LanguageSpec:
    code: str
    seed: int
    reorder: str = "identity"

    def __post_init__(self):
        if self.reorder not in REORDER_RULES:
            raise ConfigError(f"language {self.code}: unknown reorder rule {self.reorder!r}")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    concepts: tuple  # half-open [lo, hi) range of pivot concept ids
    length: tuple = (3, 12)  # inclusive sentence-length bounds
    templates: tuple = ()  # each template: sequence of concept ids or None wildcards

    def concept_ids(self):
        return range(*self.concepts)


@dataclass(frozen=True)
class PairRequest:
    src: str
    tgt: str
    domain: str
    count: int
    split: str = "train"


@dataclass
class CorpusSpec:
    languages: list
    domains: list
    pairs: list
    n_concepts: int = 0

    def __post_init__(self):
        if len(self.languages) < 2:
            raise ConfigError("a corpus needs at least two languages")
        hi = max(d.concepts[1] for d in self.domains)
        self.n_concepts = max(self.n_concepts, hi)
        codes = {l.code for l in self.languages}
        names = {d.name for d in self.domains}
        for p in self.pairs:
            if p.src not in codes or p.tgt not in codes:
                raise ConfigError(f"pair {p.src}->{p.tgt}: unknown language code")
            if p.domain not in names:
                raise ConfigError(f"pair {p.src}->{p.tgt}: unknown domain {p.domain!r}")
            if p.count < 1:
                raise ConfigError(f"pair {p.src}->{p.tgt}: count must be >= 1")

    @classmethod
    def from_dict(cls, d):
        try:
            langs = [LanguageSpec(**l) for l in d["languages"]]
            doms = [DomainSpec(name=x["name"], concepts=tuple(x["concepts"]),
                               length=tuple(x.get("length", (3, 12))),
                               templates=tuple(tuple(t) for t in x.get("templates", ())))
                    for x in d["domains"]]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed corpus spec: {e}") from None
        codes = [l.code for l in langs]
        pairs = []
        for p in d.get("pairs", []):
            srcs = codes if p.get("src", "*") == "*" else [p["src"]]
            tgts = codes if p.get("tgt", "*") == "*" else [p["tgt"]]
            for s in srcs:
                for t in tgts:
                    if s == t and (p.get("src") == "*" or p.get("tgt") == "*"):
                        continue
                    pairs.append(PairRequest(s, t, p["domain"], int(p["count"]), p.get("split", "train")))
        return cls(langs, doms, pairs, int(d.get("n_concepts", 0)))

    def to_dict(self):
        return {"n_concepts": self.n_concepts,
                "languages": [asdict(l) for l in self.languages],
                "domains": [{"name": x.name, "concepts": list(x.concepts), "length": list(x.length),
                             "templates": [list(t) for t in x.templates]} for x in self.domains],
                "pairs": [asdict(p) for p in self.pairs]}

    def domain(self, name):
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigError(f"unknown domain {name!r}")


class SyntheticLanguages:
    """Word forms and the exact translation oracle for a set of languages."""

    def __init__(self, languages, n_concepts):
        self.n_concepts = n_concepts
        self.specs = {l.code: l for l in languages}
        self._width = len(str(n_concepts - 1))
        self._perm = {}
        self._inv = {}
        for l in languages:
            perm = np.random.default_rng(l.seed).permutation(n_concepts)
            self._perm[l.code] = perm
            self._inv[l.code] = np.argsort(perm)

    def _spec(self, code):
        try:
            return self.specs[code]
        except KeyError:
            raise ConfigError(f"unknown language code {code!r}") from None

    def word(self, code, concept):
        return f"{code}{int(self._perm[code][concept]):0{self._width}d}"

    def lexicon(self, code):
        return [self.word(code, c) for c in range(self.n_concepts)]

    def realize(self, pivot, code):
        """Pivot concept sequence -> sentence (list of words) in ``code``."""
        spec = self._spec(code)
        return [self.word(code, c) for c in reorder(pivot, spec.reorder)]

    def to_pivot(self, words, code):
        spec = self._spec(code)
        inv = self._inv[code]
        w = len(code)
        concepts = [int(inv[int(x[w:])]) for x in words]
        return reorder_inverse(concepts, spec.reorder)

    def translate(self, words, src, tgt):
        return self.realize(self.to_pivot(words, src), tgt)

    def vocabulary(self):
        vocab = Vocabulary(list(self.specs))
        for code in self.specs:
            for tok in self.lexicon(code):
                vocab.add(tok)
        return vocab


# --------------------------------------------------------------------------
# examples, datasets, batches


@dataclass(frozen=True)
class ParallelExample:
    src: tuple  # eos-terminated ids
    tgt: tuple
    src_lang: str
    tgt_lang: str
    domain: str


@dataclass
class Dataset:
    examples: list
    vocab: Vocabulary

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def direction(self):
        ex = self.examples[0]
        return ex.src_lang, ex.tgt_lang, ex.domain

    def texts(self):
        for ex in self.examples:
            yield detokenize(ex.src, self.vocab), detokenize(ex.tgt, self.vocab)


def make_example(src_text, tgt_text, src_lang, tgt_lang, domain, vocab):
    return ParallelExample(tuple(tokenize(src_text, vocab)), tuple(tokenize(tgt_text, vocab)),
                           src_lang, tgt_lang, domain)


@dataclass
class Batch:
    src: np.ndarray  # (b, S) language tag + tokens + eos, padded
    src_mask: np.ndarray
    tgt_in: np.ndarray  # (b, T) decoder inputs, starting with the start token
    tgt_out: np.ndarray  # (b, T) next-token targets, eos-terminated
    tgt_mask: np.ndarray
    src_langs: tuple
    tgt_langs: tuple

    @property
    def size(self):
        return self.src.shape[0]


PLACEMENTS = ("decoder", "encoder")


def collate(examples, vocab, placement="decoder"):
    """Pad a list of examples into id matrices.

    ``placement="decoder"``: the source-language tag prefixes the encoder
    input and the target-language tag is the decoder start token.
    ``placement="encoder"``: the target-language tag prefixes the encoder
    input and the decoder starts from ``<bos>``.
    """
    if placement not in PLACEMENTS:
        raise ConfigError(f"unknown language-token placement {placement!r}")
    if not examples:
        raise ContractError("cannot collate an empty example list")
    b = len(examples)
    S = max(len(e.src) for e in examples) + 1
    T = max(len(e.tgt) for e in examples)
    src = np.full((b, S), PAD, dtype=np.int64)
    tgt_in = np.full((b, T), PAD, dtype=np.int64)
    tgt_out = np.full((b, T), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        if placement == "decoder":
            head, start = vocab.lang_id(e.src_lang), vocab.lang_id(e.tgt_lang)
        else:
            head, start = vocab.lang_id(e.tgt_lang), BOS
        src[i, 0] = head
        src[i, 1:len(e.src) + 1] = e.src
        tgt_in[i, 0] = start
        tgt_in[i, 1:len(e.tgt)] = e.tgt[:-1]
        tgt_out[i, :len(e.tgt)] = e.tgt
    return Batch(src, src != PAD, tgt_in, tgt_out, tgt_out != PAD,
                 tuple(e.src_lang for e in examples), tuple(e.tgt_lang for e in examples))


def epoch_order(n, seed, epoch=0, shuffle=True):
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(dataset, batch_size, seed=0, shuffle=True, epoch=0, placement="decoder"):
    """One epoch of batches; each example appears exactly once."""
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    if len(dataset) == 0:
        raise DataError("cannot iterate over an empty dataset")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for i in range(0, len(order), batch_size):
        yield collate([dataset.examples[j] for j in order[i:i + batch_size]], dataset.vocab, placement)


def batch_stream(dataset, batch_size, seed=0, shuffle=True, placement="decoder"):
    """Endless stream of batches, epoch after epoch."""
    epoch = 0
    while True:
        yield from batch_iterator(dataset, batch_size, seed, shuffle, epoch, placement)
        epoch += 1


def merge(datasets):
    datasets = list(datasets)
    vocab = datasets[0].vocab
    for d in datasets[1:]:
        if d.vocab != vocab:
            raise ConfigError("cannot merge datasets with different vocabularies")
    return Dataset([e for d in datasets for e in d.examples], vocab)


# --------------------------------------------------------------------------
# generation


def _sample_pivot(domain, rng):
    lo, hi = domain.length
    n = int(rng.integers(lo, hi + 1))
    concepts = np.asarray(list(domain.concept_ids()))
    if domain.templates:
        t = domain.templates[int(rng.integers(len(domain.templates)))]
        pivot = [int(rng.choice(concepts)) if s is None else int(s) for s in t]
    else:
        pivot = []
    while len(pivot) < n:
        pivot.append(int(rng.choice(concepts)))
    return pivot


def _stream_key(req):
    return zlib.crc32(f"{req.split}|{req.domain}|{req.src}|{req.tgt}".encode())


def generate_corpus(spec, seed, out_dir=None):
    """Generate every requested pair; optionally write the TSV/vocab files.

    Returns ``(vocab, datasets)`` with datasets keyed by
    ``(split, domain, src, tgt)``.
    """
    if isinstance(spec, dict):
        spec = CorpusSpec.from_dict(spec)
    langs = SyntheticLanguages(spec.languages, spec.n_concepts)
    vocab = langs.vocabulary()
    out = {}
    for req in spec.pairs:
        dom = spec.domain(req.domain)
        rng = np.random.default_rng([seed, _stream_key(req)])
        exs = []
        for _ in range(req.count):
            pivot = _sample_pivot(dom, rng)
            s = " ".join(langs.realize(pivot, req.src))
            t = " ".join(langs.realize(pivot, req.tgt))
            exs.append(make_example(s, t, req.src, req.tgt, req.domain, vocab))
        key = (req.split, req.domain, req.src, req.tgt)
        if key in out:
            out[key].examples.extend(exs)
        else:
            out[key] = Dataset(exs, vocab)
    if out_dir is not None:
        write_corpus_dir(out_dir, spec, seed, vocab, out)
    return vocab, out


def corpus_file_name(key):
    split, domain, src, tgt = key
    return f"{split}/{domain}.{src}-{tgt}.tsv"


def write_corpus_dir(out_dir, spec, seed, vocab, datasets):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    files = []
    for key in sorted(datasets):
        rel = corpus_file_name(key)
        write_tsv(out_dir / rel, datasets[key])
        files.append(rel)
    meta = {"seed": seed, "languages": vocab.languages, "spec": spec.to_dict(), "files": files}
    (out_dir / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus_dir(path):
    """Read a generated corpus directory back into ``(vocab, datasets)``."""
    path = Path(path)
    meta_path = path / "corpus.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path}: missing corpus metadata")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    vocab = Vocabulary.load(path / "vocab.txt", meta["languages"])
    datasets = {}
    for rel in meta["files"]:
        split = rel.split("/")[0]
        ds = load_tsv(path / rel, vocab, policy="reuse")
        src, tgt, domain = ds.direction()
        datasets[(split, domain, src, tgt)] = ds
    return vocab, datasets


# --------------------------------------------------------------------------
# TSV


def write_tsv(path, dataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in dataset.examples:
            s = detokenize(ex.src, dataset.vocab)
            t = detokenize(ex.tgt, dataset.vocab)
            f.write(f"{ex.src_lang}\t{ex.tgt_lang}\t{ex.domain}\t{s}\t{t}\n")


def read_tsv_rows(path):
    path = Path(path)
    try:
        raw = path.read_bytes().decode("utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 ({e})") from None
    rows = []
    for lineno, line in enumerate(raw.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ParseError(path, lineno, f"expected 5 tab-separated columns, found {len(cols)}")
        rows.append((lineno, cols))
    return rows


def load_tsv(path, vocab=None, policy="reuse", languages=None):
    """Parse a 5-column corpus TSV.

    ``policy="reuse"`` maps words through ``vocab`` (unknown words to
    ``<unk>``); ``"extend"`` adds unseen words to ``vocab``; ``"build"``
    creates a fresh vocabulary from ``languages`` (or the codes found in the
    file) and the file's words.
    """
    rows = read_tsv_rows(path)
    if policy == "build":
        codes = list(languages) if languages else sorted({c for _, r in rows for c in r[:2]})
        vocab = Vocabulary(codes)
    elif vocab is None:
        raise ConfigError(f"policy {policy!r} needs an existing vocabulary")
    elif policy not in ("reuse", "extend"):
        raise ConfigError(f"unknown vocabulary policy {policy!r}")
    known = set(vocab.languages)
    examples = []
    for lineno, (sl, tl, dom, s, t) in rows:
        for code in (sl, tl):
            if code not in known:
                raise ConfigError(f"{path}:{lineno}: unknown language code {code!r}")
        if policy in ("build", "extend"):
            for w in s.split() + t.split():
                vocab.add(w)
        examples.append(make_example(s, t, sl, tl, dom, vocab))
    return Dataset(examples, vocab)
