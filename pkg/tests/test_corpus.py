import numpy as np
import pytest
from oracles import brute_bleu

from mnmtlab import config
from mnmtlab.corpus import (EOS, UNK, CorpusSpec, Dataset, SyntheticLanguages, Vocabulary, batch_iterator,
                            collate, detokenize, generate_corpus, load_corpus_dir, load_tsv, make_example,
                            reorder, reorder_inverse, tokenize, write_tsv)
from mnmtlab.errors import ConfigError, ContractError, DataError, ParseError
from mnmtlab.metrics import corpus_bleu

SPEC = {
    "languages": [{"code": "aa", "seed": 1}, {"code": "bb", "seed": 2, "reorder": "swap-adjacent-pairs"},
                  {"code": "cc", "seed": 3, "reorder": "reverse-window-3"}],
    "domains": [{"name": "generic", "concepts": [0, 30], "length": [3, 9]},
                {"name": "medical", "concepts": [20, 45], "length": [3, 9]}],
    "pairs": [{"src": "*", "tgt": "*", "domain": "generic", "count": 12},
              {"src": "aa", "tgt": "aa", "domain": "medical", "count": 5},
              {"src": "aa", "tgt": "cc", "domain": "medical", "count": 9}],
}


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_gives_byte_identical_files(tmp_path):
    generate_corpus(SPEC, 5, tmp_path / "a")
    generate_corpus(SPEC, 5, tmp_path / "b")
    generate_corpus(SPEC, 6, tmp_path / "c")
    a, b, c = (_files(tmp_path / x) for x in "abc")
    assert a == b
    assert a != c


def test_identity_pair_copies_source():
    _, ds = generate_corpus(SPEC, 0)
    for ex in ds[("train", "medical", "aa", "aa")]:
        assert ex.src == ex.tgt


def test_oracle_translation_scores_100():
    spec = CorpusSpec.from_dict(SPEC)
    langs = SyntheticLanguages(spec.languages, spec.n_concepts)
    _, ds = generate_corpus(SPEC, 0)
    for (_, _, src, tgt), d in ds.items():
        hyps, refs = [], []
        for s, t in d.texts():
            hyps.append(" ".join(langs.translate(s.split(), src, tgt)))
            refs.append(t)
        assert corpus_bleu(hyps, refs).score == 100.0
        assert brute_bleu(hyps, refs) == pytest.approx(100.0)


@pytest.mark.parametrize("rule", ["identity", "swap-adjacent-pairs", "reverse-window-3"])
def test_reorder_rules_invert(rule):
    for n in range(0, 11):
        seq = list(range(n))
        assert reorder_inverse(reorder(seq, rule), rule) == seq
    assert reorder([1, 2, 3, 4, 5], "swap-adjacent-pairs") == [2, 1, 4, 3, 5]
    assert reorder([1, 2, 3, 4, 5], "reverse-window-3") == [3, 2, 1, 5, 4]


def test_oracle_composition_through_pivot():
    spec = CorpusSpec.from_dict(SPEC)
    langs = SyntheticLanguages(spec.languages, spec.n_concepts)
    rng = np.random.default_rng(0)
    for _ in range(50):
        pivot = [int(x) for x in rng.integers(0, spec.n_concepts, size=rng.integers(1, 10))]
        for a in "abc":
            for b in "abc":
                src = langs.realize(pivot, a * 2)
                assert langs.to_pivot(src, a * 2) == pivot
                assert langs.translate(src, a * 2, b * 2) == langs.realize(pivot, b * 2)


def test_bad_specs_are_config_errors():
    bad_lang = dict(SPEC, pairs=[{"src": "aa", "tgt": "zz", "domain": "generic", "count": 1}])
    bad_dom = dict(SPEC, pairs=[{"src": "aa", "tgt": "bb", "domain": "legal", "count": 1}])
    bad_count = dict(SPEC, pairs=[{"src": "aa", "tgt": "bb", "domain": "generic", "count": 0}])
    one_lang = dict(SPEC, languages=SPEC["languages"][:1], pairs=[])
    for spec in (bad_lang, bad_dom, bad_count, one_lang):
        with pytest.raises(ConfigError):
            generate_corpus(spec, 0)


# -- vocabulary and tokenization -------------------------------------------------


def test_vocabulary_layout():
    vocab, _ = generate_corpus(SPEC, 0)
    assert vocab.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert vocab.itos[4:7] == ["<2aa>", "<2bb>", "<2cc>"]
    assert len(set(vocab.itos)) == len(vocab.itos)
    assert not set(vocab.content_tokens) & {"<2aa>", "<2bb>", "<2cc>"}
    assert all(vocab.stoi[t] == i for i, t in enumerate(vocab.itos))


def test_tokenize_round_trip():
    vocab, ds = generate_corpus(SPEC, 0)
    for d in ds.values():
        for s, _ in d.texts():
            ids = tokenize(s, vocab)
            assert ids[-1] == EOS and EOS not in ids[:-1]
            assert detokenize(ids, vocab) == s


def test_tokenize_degenerate_inputs():
    vocab = Vocabulary(["aa", "bb"], ["x", "y"])
    assert tokenize("", vocab) == [EOS]
    assert tokenize("x nope y", vocab) == [vocab.stoi["x"], UNK, vocab.stoi["y"], EOS]
    assert tokenize("<2aa> <eos>", vocab) == [UNK, UNK, EOS]


def test_vocabulary_file_round_trip(tmp_path):
    vocab, _ = generate_corpus(SPEC, 0)
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt", vocab.languages) == vocab


# -- TSV ------------------------------------------------------------------------------

ROWS = "aa\tbb\tgeneric\tx y\ty x\nbb\taa\tmedical\ty\tx\n"


def test_tsv_two_rows(tmp_path):
    p = tmp_path / "two.tsv"
    p.write_text(ROWS, encoding="utf-8")
    ds = load_tsv(p, policy="build")
    assert len(ds) == 2
    assert ds.examples[1].domain == "medical" and ds.examples[1].src_lang == "bb"
    assert list(ds.texts()) == [("x y", "y x"), ("y", "x")]


def test_tsv_four_columns_cites_line_one(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("aa\tbb\tgeneric\tx y\n", encoding="utf-8")
    with pytest.raises(ParseError, match=r"bad.tsv:1\b"):
        load_tsv(p, policy="build")


def test_tsv_crlf_equals_lf(tmp_path):
    lf, crlf = tmp_path / "lf.tsv", tmp_path / "crlf.tsv"
    lf.write_bytes(ROWS.encode())
    crlf.write_bytes(ROWS.replace("\n", "\r\n").encode())
    a, b = load_tsv(lf, policy="build"), load_tsv(crlf, policy="build")
    assert a.examples == b.examples and a.vocab == b.vocab


def test_tsv_errors(tmp_path):
    vocab = Vocabulary(["aa", "bb"], ["x", "y"])
    p = tmp_path / "r.tsv"
    p.write_text("aa\tzz\tgeneric\tx\ty\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="zz"):
        load_tsv(p, vocab)
    with pytest.raises(DataError):
        load_tsv(tmp_path / "missing.tsv", vocab)
    p.write_bytes(b"aa\tbb\tgeneric\t\xff\ty\n")
    with pytest.raises(DataError):
        load_tsv(p, vocab)


def test_tsv_reuse_maps_unknown_words_to_unk(tmp_path):
    vocab = Vocabulary(["aa", "bb"], ["x"])
    p = tmp_path / "r.tsv"
    p.write_text("aa\tbb\tgeneric\tx q\tx\n", encoding="utf-8")
    assert load_tsv(p, vocab).examples[0].src == (vocab.stoi["x"], UNK, EOS)
    size = len(vocab)
    load_tsv(p, vocab, policy="extend")
    assert len(vocab) == size + 1


def test_corpus_dir_round_trip(tmp_path):
    vocab, ds = generate_corpus(SPEC, 3, tmp_path)
    v2, ds2 = load_corpus_dir(tmp_path)
    assert v2 == vocab
    assert set(ds2) == set(ds)
    for k in ds:
        assert ds2[k].examples == ds[k].examples


def test_write_then_load_tsv(tmp_path):
    vocab, ds = generate_corpus(SPEC, 0)
    d = ds[("train", "generic", "bb", "cc")]
    write_tsv(tmp_path / "x.tsv", d)
    assert load_tsv(tmp_path / "x.tsv", vocab).examples == d.examples


# -- batching ----------------------------------------------------------------------


def _ten():
    vocab = Vocabulary(["aa", "bb"], [f"w{i}" for i in range(10)])
    return Dataset([make_example(f"w{i}", f"w{9 - i}", "aa", "bb", "generic", vocab) for i in range(10)], vocab)


def test_batch_sizes():
    assert [b.size for b in batch_iterator(_ten(), 4, seed=0)] == [4, 4, 2]


def test_shuffle_off_preserves_order():
    ds = _ten()
    firsts = np.concatenate([b.src[:, 1] for b in batch_iterator(ds, 4, shuffle=False)])
    assert list(firsts) == [e.src[0] for e in ds.examples]


def test_same_seed_same_batches_and_full_coverage():
    ds = _ten()
    a = [b.src for b in batch_iterator(ds, 3, seed=9)]
    b = [b.src for b in batch_iterator(ds, 3, seed=9)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    seen = sorted(int(x) for m in a for x in m[:, 1])
    assert seen == sorted(e.src[0] for e in ds.examples)
    c = [b.src for b in batch_iterator(ds, 3, seed=10)]
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_errors():
    ds = _ten()
    with pytest.raises(ContractError):
        next(batch_iterator(ds, 0))
    with pytest.raises(DataError):
        next(batch_iterator(Dataset([], ds.vocab), 2))


def test_masks_mark_non_pad_and_language_tokens():
    vocab, ds = generate_corpus(SPEC, 0)
    exs = ds[("train", "generic", "aa", "cc")].examples[:5]
    b = collate(exs, vocab)
    np.testing.assert_array_equal(b.src_mask, b.src != 0)
    np.testing.assert_array_equal(b.tgt_mask, b.tgt_out != 0)
    assert (b.src[:, 0] == vocab.lang_id("aa")).all()
    assert (b.tgt_in[:, 0] == vocab.lang_id("cc")).all()
    for i, e in enumerate(exs):
        assert tuple(b.tgt_out[i, :len(e.tgt)]) == e.tgt
        assert (b.tgt_mask[i].sum(), b.src_mask[i].sum()) == (len(e.tgt), len(e.src) + 1)
    enc = collate(exs, vocab, placement="encoder")
    assert (enc.src[:, 0] == vocab.lang_id("cc")).all() and (enc.tgt_in[:, 0] == 1).all()


def test_toy_domain_separation(tmp_path):
    cfg = config.load("toy", environ={})
    vocab, ds = generate_corpus(cfg["corpus"], cfg["seed"])
    spec = CorpusSpec.from_dict(cfg["corpus"])
    langs = SyntheticLanguages(spec.languages, spec.n_concepts)
    generic_words = {w for (_, dom, _, _), d in ds.items() if dom == "generic" for s, t in d.texts()
                     for w in (s + " " + t).split()}
    medical = spec.domain("medical").concept_ids()
    for code in langs.specs:
        unseen = sum(langs.word(code, c) not in generic_words for c in medical)
        assert unseen / len(medical) >= 0.5, code
