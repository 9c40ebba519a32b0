import math

import numpy as np
import pytest
from conftest import small_batch, small_corpus, tiny_model
from helpers import model_direction_error, xbar_grad_error
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import KL_EXAMPLE, kl_sym_direct

from mnmtlab.corpus import batch_stream, merge
from mnmtlab.errors import ConfigError, ContractError
from mnmtlab.model import embed_source
from mnmtlab.optim import TrainConfig, train_step
from mnmtlab.smart import SmartConfig, kl_sym, perturb_ascent, project, ratio_clip, smart_step, smoothness_penalty


@pytest.fixture(scope="module")
def corpus():
    return small_corpus(count=6)


@pytest.fixture(scope="module")
def batch(corpus):
    return small_batch(*corpus, n=3)


def _clean(model, batch):
    return embed_source(model.constant_params(), model.config, batch.src).data


# -- KL ----------------------------------------------------------------------------


def test_kl_example():
    assert float(kl_sym(np.array([0.5, 0.5]), np.array([0.9, 0.1])).data) == pytest.approx(KL_EXAMPLE, abs=1e-12)


def test_kl_symmetric_and_zero_on_equal():
    rng = np.random.default_rng(0)
    for _ in range(100):
        P, Q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        a, b = float(kl_sym(P, Q).data), float(kl_sym(Q, P).data)
        assert a == pytest.approx(b, rel=1e-12)
        assert a == pytest.approx(kl_sym_direct(P, Q), rel=1e-10)
        assert a > 0
        assert float(kl_sym(P, P).data) == 0.0


def test_kl_length_mismatch():
    with pytest.raises(ContractError):
        kl_sym(np.ones(2) / 2, np.ones(3) / 3)


# -- penalty -------------------------------------------------------------------------


def test_penalty_zero_at_clean_embeddings_and_nonnegative(corpus, batch):
    m = tiny_model(corpus[0])
    x = _clean(m, batch)
    assert float(smoothness_penalty(m, batch, x).data) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        x_bar = x + rng.normal(scale=rng.uniform(1e-3, 1.0), size=x.shape)
        assert float(smoothness_penalty(m, batch, x_bar).data) >= 0.0


def test_penalty_shape_check(corpus, batch):
    m = tiny_model(corpus[0])
    with pytest.raises(ContractError):
        smoothness_penalty(m, batch, np.zeros((1, 2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_penalty_gradient_wrt_xbar(corpus, batch, seed):
    m = tiny_model(corpus[0], seed=seed)
    x = _clean(m, batch)
    x_bar = x + np.random.default_rng(seed).normal(scale=0.1, size=x.shape)
    assert xbar_grad_error(m, batch, x_bar, seed) < 1e-4


def test_penalty_gradient_wrt_params(corpus, batch):
    m = tiny_model(corpus[0], seed=2)
    x = _clean(m, batch)
    x_bar = x + np.random.default_rng(2).normal(scale=0.1, size=x.shape)
    assert model_direction_error(m, batch, 2, x_bar=x_bar, lambda_s=1.0) < 1e-4


# -- perturbation -------------------------------------------------------------------------


def test_zero_radius_gives_clean_embeddings(corpus, batch):
    m = tiny_model(corpus[0])
    x = _clean(m, batch)
    x_bar, _ = perturb_ascent(m, batch, SmartConfig(epsilon=0.0, sigma=1e-2), np.random.default_rng(0))
    np.testing.assert_array_equal(x_bar, x)
    assert float(smoothness_penalty(m, batch, x_bar).data) == 0.0
    x_bar, _ = perturb_ascent(m, batch, SmartConfig(sigma=0.0, t_x_tilde=0), np.random.default_rng(0))
    np.testing.assert_array_equal(x_bar, x)


def test_perturbation_moves_and_ascends(corpus, batch):
    m = tiny_model(corpus[0])
    x = _clean(m, batch)
    cfg = SmartConfig(epsilon=0.05, sigma=0.01, t_x_tilde=0)
    start, _ = perturb_ascent(m, batch, cfg, np.random.default_rng(0))
    end, _ = perturb_ascent(m, batch, SmartConfig(epsilon=0.05, sigma=0.01, t_x_tilde=5, eta=0.01),
                            np.random.default_rng(0))
    assert np.abs(start - x).max() > 0
    assert float(smoothness_penalty(m, batch, end).data) > float(smoothness_penalty(m, batch, start).data)


def test_decoder_perturbation_flag(corpus, batch):
    m = tiny_model(corpus[0])
    _, tgt = perturb_ascent(m, batch, SmartConfig(), np.random.default_rng(0))
    assert tgt is None
    _, tgt = perturb_ascent(m, batch, SmartConfig(perturb_decoder=True), np.random.default_rng(0))
    assert tgt.shape == batch.tgt_in.shape + (m.config.d_model,)


@settings(max_examples=1000, deadline=None)
@given(eps=st.floats(0, 10), scale=st.floats(0, 100), seed=st.integers(0, 2**16),
       p=st.sampled_from(["inf", "2"]), dtype=st.sampled_from([np.float32, np.float64]))
def test_projection_containment(eps, scale, seed, p, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4)).astype(dtype)
    x_bar = (x + rng.normal(scale=scale, size=x.shape)).astype(dtype)
    out = project(x_bar, x, eps, p)
    d = out.astype(np.float64) - x.astype(np.float64)
    if p == "inf":
        assert np.abs(d).max() <= eps
    else:
        norms = np.sqrt((d ** 2).sum(axis=(1, 2)))
        assert (norms <= eps + 1e-12).all()


@settings(max_examples=50, deadline=None)
@given(eps=st.sampled_from([1e-5, 1e-3, 0.1]), sigma=st.sampled_from([0.0, 1e-5, 1.0]),
       t=st.integers(0, 3), seed=st.integers(0, 1000))
def test_ascent_stays_in_ball(eps, sigma, t, seed):
    vocab, ds = small_corpus(count=2)
    m = tiny_model(vocab, dtype=np.float32)
    b = small_batch(vocab, ds, n=2)
    x_bar, _ = perturb_ascent(m, b, SmartConfig(epsilon=eps, sigma=sigma, t_x_tilde=t),
                              np.random.default_rng(seed))
    assert np.abs(x_bar.astype(np.float64) - _clean(m, b).astype(np.float64)).max() <= eps


# -- ratio clip -----------------------------------------------------------------------


def test_ratio_clip_examples():
    assert ratio_clip(np.array([2.0]), np.array([3.0]), 0.25)[0] == 2.5
    assert ratio_clip(np.array([2.0]), np.array([2.1]), 0.25)[0] == 2.1
    prev = np.array([1.5, -0.7, 0.0, 5e-9])
    cand = np.array([9.0, 4.0, 3.0, -2.0])
    out = ratio_clip(prev, cand, 0.0)
    np.testing.assert_array_equal(out[:2], prev[:2])
    np.testing.assert_array_equal(out[2:], cand[2:])


def test_ratio_clip_shape_mismatch():
    with pytest.raises(ContractError):
        ratio_clip(np.zeros(2), np.zeros(3), 0.1)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**16), beta=st.floats(0, 2), dtype=st.sampled_from([np.float32, np.float64]))
def test_ratio_clip_containment(seed, beta, dtype):
    rng = np.random.default_rng(seed)
    prev = (rng.normal(size=50) * 10.0 ** rng.integers(-9, 3, size=50)).astype(dtype)
    cand = (prev + rng.normal(scale=2, size=50)).astype(dtype)
    out = ratio_clip(prev, cand, beta)
    big = np.abs(prev) > 1e-8
    ratio = out[big].astype(np.float64) / prev[big].astype(np.float64)
    assert (np.abs(ratio - 1) <= beta).all()
    np.testing.assert_array_equal(out[~big], cand[~big])


def test_config_invariants():
    for kw in ({"lambda_s": -1}, {"epsilon": -1}, {"beta": -0.1}, {"p_norm": "1"}):
        with pytest.raises(ConfigError):
            SmartConfig(**kw)
    assert not SmartConfig(beta=None).clip_enabled
    assert not SmartConfig(beta=math.inf).clip_enabled
    assert SmartConfig.from_dict(SmartConfig(p_norm="2").to_dict()) == SmartConfig(p_norm="2")


# -- full step ---------------------------------------------------------------------------


def test_lambda_zero_without_clip_matches_plain_step(corpus):
    vocab, ds = corpus
    data = merge(ds.values())
    cfg = TrainConfig(lr=3e-3, batch_size=4, max_steps=10, seed=1)
    plain, smart = tiny_model(vocab, seed=1, dropout=0.1), tiny_model(vocab, seed=1, dropout=0.1)
    sp, ss = cfg.adam(), cfg.adam()
    a, b = batch_stream(data, 4, seed=1), batch_stream(data, 4, seed=1)
    sc = SmartConfig(lambda_s=0.0, beta=None)
    rng = np.random.default_rng(0)
    for _ in range(10):
        lp = train_step(plain, next(a), sp, cfg)["loss"]
        stats = smart_step(smart, next(b), ss, cfg, sc, rng)
        assert stats["loss"] == pytest.approx(lp, rel=1e-12)
        assert stats["penalty"] >= 0
    for n, t in plain.params.items():
        np.testing.assert_allclose(smart.params[n].data, t.data, rtol=1e-6, atol=1e-12)


def test_smart_step_respects_clip_and_freeze(corpus):
    vocab, ds = corpus
    data = merge(ds.values())
    m = tiny_model(vocab, dtype=np.float32)
    m.freeze("encoder.embeddings.*")
    cfg = TrainConfig(lr=1e-1, batch_size=4, max_steps=3)
    state = cfg.adam()
    stream = batch_stream(data, 4)
    rng = np.random.default_rng(0)
    for _ in range(3):
        before = {n: t.data.copy() for n, t in m.params.items()}
        stats = smart_step(m, next(stream), state, cfg, SmartConfig(beta=0.05), rng)
        assert stats["penalty"] >= 0
        for n, t in m.params.items():
            if m.frozen[n]:
                np.testing.assert_array_equal(t.data, before[n])
                continue
            big = np.abs(before[n]) > 1e-8
            ratio = t.data[big].astype(np.float64) / before[n][big].astype(np.float64)
            assert (np.abs(ratio - 1) <= 0.05).all()


@pytest.mark.slow
def test_penalty_decreases_during_toy_finetuning(toy, toy_pretrained):
    trainer = toy.trainer(smart=True)
    state = trainer.begin(toy_pretrained, 1e-4, "none", 200)
    penalties = [h["penalty"] for h in trainer.advance(state, 200)]
    assert min(penalties) >= 0
    assert np.mean(penalties[-50:]) < np.mean(penalties[:50])
