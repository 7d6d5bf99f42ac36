import math

import numpy as np
import pytest
import torch

from mri2speech.text import Lexicon, WORD_BOUNDARY
from mri2speech.tts import (TTS, FlowStack, TTSConfig, alignment_log_prior, expand_by_durations, kl_term,
                            mas_loglike, train_tts, upsample_factors)


def tiny_config(**kw):
    base = dict(speakers=("a", "b"), hidden=32, d_z=8, flow_hidden=16, sdp_hidden=16, decoder_channels=16,
                total_steps=3, batch_size=4, segment_frames=8)
    base.update(kw)
    return TTSConfig(**base)


@pytest.fixture
def lexicon():
    return Lexicon({"ba": ["B", "AA"], "tiy": ["T", "IY"], "kuw": ["K", "UW"]})


@pytest.fixture
def model(lexicon):
    return TTS.initialize(tiny_config(), lexicon)


def perturb(module, scale=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


# -- encoders -----------------------------------------------------------------

def test_prior_encode_contract(model):
    ph = model.phonemize("ba tiy")
    m, logs, h = model.prior_encode(ph, "a")
    assert m.shape == (5, 8) and logs.shape == (5, 8) and h.shape == (5, 32)
    m2, logs2, _ = model.prior_encode(ph, "a")
    assert np.array_equal(m, m2) and np.array_equal(logs, logs2)
    mb, _, _ = model.prior_encode(ph, "b")
    assert not np.array_equal(m, mb)
    assert logs.min() >= -7 and logs.max() <= 5
    with pytest.raises(ValueError):
        model.prior_encode(["B", "ZZ"], "a")
    with pytest.raises(ValueError):
        model.prior_encode(ph, "nobody")


def test_posterior_encode_contract(model):
    mel = np.random.default_rng(0).normal(size=(17, 80)).astype(np.float32)
    m, logs = model.posterior_encode(mel, "a")
    assert m.shape == (17, 8)
    silence = np.full((9, 80), math.log(1e-5), np.float32)
    m, logs = model.posterior_encode(silence, "b")
    assert np.all(np.isfinite(m)) and np.all(np.isfinite(logs))
    assert logs.min() >= -7 and logs.max() <= 5
    assert np.array_equal(model.posterior_encode(mel, "a")[0], model.posterior_encode(mel, "a")[0])


# -- flow ---------------------------------------------------------------------

def test_flow_identity_at_init(model):
    z = np.random.default_rng(0).normal(size=(12, 8)).astype(np.float32)
    u, logdet = model.flow_forward(z, "a")
    # couplings start as the identity; the channel flips compose to the identity for an even count
    assert np.max(np.abs(u - z)) <= 1e-6
    assert abs(logdet) <= 1e-6


def test_flow_round_trip_after_perturbation(model):
    perturb(model.net.flow, 0.1)
    z0 = np.random.default_rng(2).normal(size=(6, 8)).astype(np.float32)
    assert abs(model.flow_forward(z0, "b")[1]) > 1.0  # genuinely non-identity
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        z = rng.normal(size=(int(rng.integers(1, 20)), 8)).astype(np.float32)
        u, _ = model.flow_forward(z, "b")
        worst = max(worst, float(np.max(np.abs(model.flow_inverse(u, "b") - z))))
    assert worst < 1e-4


def test_flow_logdet_matches_numerical_jacobian():
    torch.manual_seed(0)
    flow = FlowStack(4, 8, 3, 4).double()
    perturb(flow, 0.3)
    g = torch.randn(1, 3, dtype=torch.float64)
    mask = torch.ones(1, 3, dtype=torch.float64)
    for _ in range(5):
        z = torch.randn(1, 4, 3, dtype=torch.float64)
        with torch.no_grad():
            _, logdet = flow(z, mask, g)

        @torch.no_grad()
        def f(flat):
            return flow(flat.reshape(1, 4, 3), mask, g)[0].reshape(-1)

        h = 1e-5
        flat = z.reshape(-1)
        J = torch.zeros(12, 12, dtype=torch.float64)
        for k in range(12):
            e = torch.zeros(12, dtype=torch.float64)
            e[k] = h
            J[:, k] = (f(flat + e) - f(flat - e)) / (2 * h)
        _, numeric = torch.linalg.slogdet(J)
        assert abs(float(logdet.sum()) - float(numeric)) < 1e-3


# -- MAS scores, KL, expansion -------------------------------------------------

def test_mas_loglike_closed_form_and_oracle(rng):
    d = 6
    m = rng.normal(size=(4, d))
    ll = mas_loglike(m, np.zeros((4, d)), m)
    assert np.allclose(np.diag(ll), -0.5 * d * math.log(2 * math.pi))
    logs = rng.normal(size=(4, d)) * 0.5
    z = rng.normal(size=(7, d))
    ll = mas_loglike(m, logs, z)
    direct = np.array([[np.sum(-0.5 * np.log(2 * np.pi) - logs[i] - 0.5 * (z[j] - m[i]) ** 2 * np.exp(-2 * logs[i]))
                        for j in range(7)] for i in range(4)])
    assert ll.shape == (4, 7) and np.max(np.abs(ll - direct)) < 1e-8
    # moving further from the mean lowers the score
    near = mas_loglike(m[:1], np.zeros((1, d)), m[:1] + 0.5)[0, 0]
    far = mas_loglike(m[:1], np.zeros((1, d)), m[:1] + 1.0)[0, 0]
    assert far < near


def test_kl_term_closed_forms(rng):
    m, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) * 0.3
    assert kl_term(m, s, m, s) == pytest.approx(0.0, abs=1e-12)
    assert kl_term(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1))) == pytest.approx(0.5)
    for _ in range(1000):
        Tx, Ty, d = 3, 5, 2
        dur = [1, 2, 2]
        val = kl_term(rng.normal(size=(Tx, d)), rng.normal(size=(Tx, d)), rng.normal(size=(Ty, d)),
                      rng.normal(size=(Ty, d)), dur)
        assert val >= 0.0


def test_kl_term_gradient_matches_finite_differences(rng):
    for _ in range(5):
        pm = rng.normal(size=(3, 4))
        pl, qm, ql = rng.normal(size=(3, 4)) * 0.3, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)) * 0.3
        dur = [2, 1, 2]
        t = torch.tensor(pm, requires_grad=True)
        kl_term(t, torch.tensor(pl), torch.tensor(qm), torch.tensor(ql), dur).backward()
        h = 1e-5
        num = np.zeros_like(pm)
        for idx in np.ndindex(pm.shape):
            e = np.zeros_like(pm)
            e[idx] = h
            num[idx] = (kl_term(pm + e, pl, qm, ql, dur) - kl_term(pm - e, pl, qm, ql, dur)) / (2 * h)
        grad = t.grad.numpy()
        assert np.max(np.abs(grad - num)) / np.max(np.abs(num)) < 1e-4


def test_expand_by_durations():
    rows = np.array([[1.0], [2.0]])
    assert expand_by_durations(rows, [2, 3]).ravel().tolist() == [1, 1, 2, 2, 2]
    assert np.array_equal(expand_by_durations(rows, [1, 1]), rows)
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.integers(1, 6, size=4)
        assert expand_by_durations(rng.normal(size=(4, 3)), d).shape == (d.sum(), 3)
    assert expand_by_durations(torch.ones(2, 3), [1, 4]).shape == (5, 3)
    with pytest.raises(ValueError):
        expand_by_durations(rows, [1, 0])
    with pytest.raises(ValueError):
        expand_by_durations(rows, [1, 2, 3])


def test_alignment_prior_is_a_distribution_per_frame():
    lp = alignment_log_prior(5, 40)
    assert np.allclose(np.logaddexp.reduce(lp, axis=0), 0.0)
    means = (np.exp(lp) * np.arange(5)[:, None]).sum(axis=0)
    assert np.all(np.diff(means) > 0)


# -- duration model, decoder ----------------------------------------------------

def test_sdp_sampling_contract(model):
    ph = model.phonemize("ba tiy kuw")
    _, _, h = model.prior_encode(ph, "a")
    d0 = model.sdp_sample(h, "a", temperature=0.0)
    assert d0.dtype == np.int64 and d0.shape == (len(ph.tokens),) and d0.min() >= 1
    assert np.array_equal(d0, model.sdp_sample(h, "a", temperature=0.0))
    d1 = model.sdp_sample(h, "a", temperature=1.0, seed=3)
    assert d1.min() >= 1
    with pytest.raises(ValueError):
        model.sdp_sample(h, "a", temperature=-0.1)
    assert math.isfinite(model.sdp_loss(h, np.full(len(ph.tokens), 4), "a"))


def test_decoder_length_and_range(model):
    assert upsample_factors(256) == [4, 4, 4, 4]
    assert math.prod(upsample_factors(240)) == 240
    wav = model.decode_waveform(np.zeros((10, 8), np.float32), "a")
    assert wav.shape == (2560,) and np.all(np.abs(wav) <= 1.0) and np.all(np.isfinite(wav))
    wav = model.decode_waveform(np.random.default_rng(0).normal(size=(3, 8)) * 10, "b")
    assert wav.shape == (768,) and np.all(np.abs(wav) <= 1.0)


def test_synthesize_length_chain(model):
    ph = model.phonemize("kuw ba")
    wav, dur = model.synthesize(ph, "a", durations=[3, 1, 2, 1, 4])
    assert wav.size == 256 * 11 and dur.tolist() == [3, 1, 2, 1, 4]
    wav, dur = model.synthesize(ph, "b")
    assert wav.size == 256 * int(dur.sum())


def test_tts_checkpoint_round_trip(model, tmp_path):
    perturb(model.net, 0.05)
    model.save(tmp_path / "t.ckpt")
    back = TTS.load(tmp_path / "t.ckpt")
    assert back.config.speakers == ("a", "b") and dict(back.lexicon) == dict(model.lexicon)
    ph = model.phonemize("ba")
    assert np.array_equal(back.prior_encode(ph, "a")[0], model.prior_encode(ph, "a")[0])
    assert WORD_BOUNDARY in back.config.alphabet
    assert set(back.speaker_table()) == {"a", "b"}


# -- training -----------------------------------------------------------------

def test_train_tts_contracts(small_corpus, tmp_path):
    seen = []

    def audit(step, out, batch):
        for ex, dur in zip(batch, out.durations):
            assert dur.sum() == ex.mel.shape[0] and dur.min() >= 1 and dur.size == len(ex.tokens)
        seen.append(step)

    cfg = lambda: tiny_config(speakers=())  # noqa: E731
    model, rows = train_tts(small_corpus.manifest, cfg(), out_dir=tmp_path, on_step=audit)
    assert seen == [1, 2, 3]
    assert model.config.speakers == ("spk0", "spk1")
    assert all(math.isfinite(r["total"]) and r["kl"] > -1e-3 for r in rows)
    header = (tmp_path / "tts_loss.csv").read_text().splitlines()[0]
    assert header == "step,recon,kl,dur,total"
    assert (tmp_path / "tts.ckpt").is_file()
    _, rows2 = train_tts(small_corpus.manifest, cfg())
    assert [r["total"] for r in rows] == [r["total"] for r in rows2]


def test_single_speaker_training(small_corpus):
    model, _ = train_tts(small_corpus.manifest, tiny_config(speakers=(), total_steps=1), speakers=["spk1"])
    assert model.config.speakers == ("spk1",)
    with pytest.raises(ValueError):
        model.speaker_index("spk0")


def test_adversarial_term_is_optional(small_corpus):
    _, plain = train_tts(small_corpus.manifest, tiny_config(speakers=(), total_steps=2))
    model, adv = train_tts(small_corpus.manifest, tiny_config(speakers=(), total_steps=2, adversarial_weight=0.1))
    assert all(math.isfinite(r["total"]) for r in adv)
    # the first update is identical; the critic only changes what follows
    assert adv[0]["recon"] == plain[0]["recon"]
    assert adv[0]["total"] > plain[0]["total"]
    assert not any(k.startswith("disc") for k in model.net.state_dict())
