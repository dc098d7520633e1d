"""
Tests for the variational topic network: priors, posteriors, decoder and ELBO
"""

import math

import numpy as np
import pytest

from vti.core.errors import ContractViolation
from vti.engine import Tape, Tensor, backward, grad_check_many, precision
from vti.schemas.records import BOS_ID, EOS_ID, ReportExample
from vti.services.latent_service import reparameterize
from vti.services.model_service import (
    VtiModel,
    decode_step,
    elbo_loss,
    extract_visual_features,
    infer_posterior,
    infer_priors,
    init_decoder,
    score_sentences,
    teacher_forced_log_likelihood,
    visual_attention,
)

from conftest import tiny_network


def miniature(**overrides) -> VtiModel:
    """d_v=8, d_h=8, d_z=4, vocab 12, k=4"""
    cfg = tiny_network(12, image_size=16, n_max=2, **overrides)
    return VtiModel(cfg, seed=3)


def miniature_example(seed: int = 0) -> ReportExample:
    image = np.random.default_rng(seed).random((16, 16))
    return ReportExample(image=image, sentences=[[5, 6, 7]])


# ============================================================================
# Construction and features
# ============================================================================

def test_model_rejects_tiny_vocabulary():
    """Test the vocabulary must hold more than the special tokens"""
    with pytest.raises(ContractViolation):
        VtiModel(tiny_network(5))


def test_same_seed_same_parameters(tiny_cfg):
    """Test construction is deterministic given the seed"""
    a, b = VtiModel(tiny_cfg, seed=1).state(), VtiModel(tiny_cfg, seed=1).state()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_visual_features_shape_and_determinism(tiny_cfg, synth_records):
    """Test a 32x32 image gives 16 local features of width d_v"""
    m = VtiModel(tiny_cfg)
    image = synth_records[0].image
    V = extract_visual_features(m, image)
    assert V.shape == (16, tiny_cfg.d_v)
    assert np.array_equal(V.data, extract_visual_features(m, image.copy()).data)
    with pytest.raises(ContractViolation):
        extract_visual_features(m, np.zeros((16, 16)))


def test_zero_image_with_zero_biases_gives_zero_features(tiny_cfg):
    """Test the conv stack has no hidden offsets"""
    m = VtiModel(tiny_cfg)
    for stage in m.conv_encoder:
        stage.bias.data[:] = 0.0
    assert np.allclose(extract_visual_features(m, np.zeros((32, 32))).data, 0.0)


def test_priors_one_per_slot(tiny_cfg, synth_records):
    """Test n_max priors of dimension d_z"""
    m = VtiModel(tiny_cfg)
    priors = infer_priors(m, extract_visual_features(m, synth_records[1].image))
    assert len(priors) == tiny_cfg.n_max
    assert all(p.dim == tiny_cfg.d_z for p in priors)


def test_shared_prior_mlp(vocab):
    """Test one shared head still yields a prior per slot"""
    m = VtiModel(tiny_network(len(vocab), shared_prior_mlp=True))
    assert not any(name.startswith("prior.head1.") for name in m.named_parameters())
    priors = infer_priors(m, Tensor(np.random.default_rng(0).random((16, 8))))
    assert len(priors) == m.cfg.n_max


def test_priors_invariant_to_feature_order(tiny_cfg):
    """Test permuting the k feature positions leaves every prior unchanged"""
    with precision(np.float64):
        m = VtiModel(tiny_cfg, seed=4)
        V = np.random.default_rng(4).random((16, tiny_cfg.d_v))
        perm = np.random.default_rng(5).permutation(16)
        a = infer_priors(m, Tensor(V))
        b = infer_priors(m, Tensor(V[perm]))
    for pa, pb in zip(a, b):
        assert np.allclose(pa.mu.data, pb.mu.data, atol=1e-5)
        assert np.allclose(pa.log_sigma.data, pb.log_sigma.data, atol=1e-5)


def test_each_head_feeds_one_slot(vocab):
    """Test changing head 0 of the topic attention moves prior 0 only, with or without visual layers"""
    for layers in (1, 0):
        m = VtiModel(tiny_network(len(vocab), transformer_layers=layers), seed=6)
        V = Tensor(np.random.default_rng(6).random((16, 8)))
        before = infer_priors(m, V)
        hd = m.topic_attention.head_dim
        m.topic_attention.value.weight.data[:, :hd] += 0.5
        after = infer_priors(m, V)
        assert not np.allclose(before[0].mu.data, after[0].mu.data)
        for pb, pa in zip(before[1:], after[1:]):
            assert np.array_equal(pb.mu.data, pa.mu.data)
            assert np.array_equal(pb.log_sigma.data, pa.log_sigma.data)


def test_distinct_images_give_distinct_priors(tiny_cfg, synth_records):
    """Test two synthetic images with different findings get different priors"""
    a = synth_records[0]
    b = next(r for r in synth_records if r.labels != a.labels)
    m = VtiModel(tiny_cfg, seed=2)
    pa = infer_priors(m, extract_visual_features(m, a.image))
    pb = infer_priors(m, extract_visual_features(m, b.image))
    assert any(not np.allclose(x.mu.data, y.mu.data, atol=1e-6) for x, y in zip(pa, pb))
    assert any(not np.allclose(x.log_sigma.data, y.log_sigma.data, atol=1e-6) for x, y in zip(pa, pb))


def test_posterior_contract(tiny_cfg):
    """Test posterior dimension, determinism and input checks"""
    m = VtiModel(tiny_cfg)
    q1 = infer_posterior(m, [5, 6, 7])
    q2 = infer_posterior(m, [5, 6, 7])
    assert q1.dim == tiny_cfg.d_z
    assert np.array_equal(q1.mu.data, q2.mu.data)
    assert not np.allclose(q1.mu.data, infer_posterior(m, [7, 6, 5]).mu.data)
    with pytest.raises(ContractViolation):
        infer_posterior(m, [])
    with pytest.raises(ContractViolation):
        infer_posterior(m, [5] * (tiny_cfg.max_positions + 1))


# ============================================================================
# Decoder
# ============================================================================

def test_visual_attention_identical_features_uniform(tiny_cfg):
    """Test identical locations get uniform weight and v_a equals that location"""
    m = VtiModel(tiny_cfg)
    row = np.random.default_rng(0).random(tiny_cfg.d_v)
    V = Tensor(np.tile(row, (16, 1)))
    alpha, v_a = visual_attention(m, V, Tensor(np.random.default_rng(1).normal(size=tiny_cfg.d_h)))
    assert alpha.shape == (16,)
    assert np.allclose(alpha.data, 1 / 16, atol=1e-6)
    assert np.allclose(v_a.data, row, atol=1e-5)


def test_visual_attention_zero_scorer_uniform(tiny_cfg):
    """Test w_a = 0 gives uniform attention for any input, batched"""
    m = VtiModel(tiny_cfg)
    m.attn_w.data[:] = 0.0
    rng = np.random.default_rng(2)
    alpha, v_a = visual_attention(m, Tensor(rng.random((16, tiny_cfg.d_v))), Tensor(rng.normal(size=(3, tiny_cfg.d_h))))
    assert alpha.shape == (3, 16) and v_a.shape == (3, tiny_cfg.d_v)
    assert np.allclose(alpha.data, 1 / 16, atol=1e-6)


def test_visual_attention_matches_formula(tiny_cfg):
    """Test alpha = softmax(w_a . tanh(W_v v_j + W_h h + b)) and v_a = alpha V"""
    with precision(np.float64):
        m = VtiModel(tiny_cfg, seed=6)
        rng = np.random.default_rng(6)
        V = rng.random((16, tiny_cfg.d_v))
        h = rng.normal(size=tiny_cfg.d_h)
        alpha, v_a = visual_attention(m, Tensor(V), Tensor(h))
    joint = np.tanh(V @ m.attn_v.weight.data + h @ m.attn_h.weight.data + m.attn_h.bias.data)
    scores = (joint @ m.attn_w.data)[:, 0]
    expected = np.exp(scores - scores.max())
    expected /= expected.sum()
    assert np.allclose(alpha.data, expected, atol=1e-10)
    assert np.allclose(v_a.data, expected @ V, atol=1e-10)


def test_decode_step_distribution(tiny_cfg, synth_records):
    """Test p_t is a distribution; a zero output layer makes it uniform"""
    m = VtiModel(tiny_cfg)
    V = extract_visual_features(m, synth_records[0].image)
    state = init_decoder(m, Tensor(np.zeros(tiny_cfg.d_z)))
    p, state, alpha = decode_step(m, BOS_ID, state, V)
    assert p.shape == (tiny_cfg.vocab_size,) and alpha.shape == (16,)
    assert np.all(p.data >= 0) and abs(p.data.sum() - 1.0) < 1e-5
    assert abs(alpha.data.sum() - 1.0) < 1e-5

    m.out_proj.weight.data[:] = 0.0
    m.out_proj.bias.data[:] = 0.0
    p, _, _ = decode_step(m, 7, state, V)
    assert np.allclose(p.data, 1.0 / tiny_cfg.vocab_size)


def test_decode_step_batch_contract(tiny_cfg, synth_records):
    """Test one id per state row"""
    m = VtiModel(tiny_cfg)
    V = extract_visual_features(m, synth_records[0].image)
    state = init_decoder(m, Tensor(np.zeros((3, tiny_cfg.d_z))))
    p, new_state, alpha = decode_step(m, np.array([BOS_ID, 5, 6]), state, V)
    assert p.shape == (3, tiny_cfg.vocab_size) and alpha.shape == (3, 16)
    assert new_state.batch == 3
    with pytest.raises(ContractViolation):
        decode_step(m, np.array([BOS_ID, 5]), state, V)
    with pytest.raises(ContractViolation):
        decode_step(m, np.array([BOS_ID, 5, tiny_cfg.vocab_size]), state, V)


def test_init_decoder_uses_topic_only_in_first_cell(tiny_cfg):
    """Test h1 = h2 = c2 = 0 and c1 = z_to_cell(z)"""
    m = VtiModel(tiny_cfg)
    z = Tensor(np.random.default_rng(0).normal(size=tiny_cfg.d_z))
    state = init_decoder(m, z)
    assert np.allclose(state.h1.data, 0) and np.allclose(state.h2.data, 0) and np.allclose(state.c2.data, 0)
    expected = z.data @ m.z_to_cell.weight.data + m.z_to_cell.bias.data
    assert np.allclose(state.c1.data[0], expected, atol=1e-6)


def test_teacher_forcing_is_causal(tiny_cfg, synth_records):
    """Test changing a later target leaves earlier steps untouched"""
    m = VtiModel(tiny_cfg)
    V = extract_visual_features(m, synth_records[0].image)
    z = Tensor(np.random.default_rng(0).normal(size=(1, tiny_cfg.d_z)))
    _, _, maps_a = teacher_forced_log_likelihood(m, V, z, [[5, 6, 7, EOS_ID]])
    _, _, maps_b = teacher_forced_log_likelihood(m, V, z, [[5, 9, 8, EOS_ID]])
    assert len(maps_a) == 4
    assert np.array_equal(maps_a[0], maps_b[0]) and np.array_equal(maps_a[1], maps_b[1])
    assert all(np.allclose(a.sum(axis=1), 1.0, atol=1e-5) for a in maps_a)


def test_score_sentences_matches_manual_decode(tiny_cfg, synth_records):
    """Test teacher-forced scores equal step-by-step decoding"""
    with precision(np.float64):
        m = VtiModel(tiny_cfg, seed=2)
        V = extract_visual_features(m, synth_records[0].image)
        z = Tensor(np.random.default_rng(0).normal(size=tiny_cfg.d_z))
        sentence = [5, 6, EOS_ID]
        score = score_sentences(m, V, Tensor(z.data[None, :]), [sentence])[0]
        state = init_decoder(m, z)
        prev, total = BOS_ID, 0.0
        for token in sentence:
            p, state, _ = decode_step(m, prev, state, V)
            total += math.log(p.data[token])
            prev = token
    assert score == pytest.approx(total / len(sentence), abs=1e-9)


# ============================================================================
# Objective
# ============================================================================

def test_elbo_beta_zero_is_mean_ce(tiny_cfg, examples):
    """Test beta = 0 reduces the loss to the average cross entropy"""
    m = VtiModel(tiny_cfg)
    loss, parts = elbo_loss(m, examples[0], beta=0.0, rng=np.random.default_rng(0))
    assert loss.item() == pytest.approx(float(np.mean(parts.ce)), rel=1e-5)
    assert len(parts.ce) == tiny_cfg.n_max
    assert len(parts.kl_per_sentence) == len(examples[0].sentences)
    assert all(kl >= 0 for kl in parts.kl_per_sentence)


def test_elbo_adds_weighted_kl(tiny_cfg, examples):
    """Test loss = mean CE + beta * sum KL / rows and loss >= mean CE"""
    m = VtiModel(tiny_cfg)
    loss, parts = elbo_loss(m, examples[1], beta=0.7, rng=np.random.default_rng(0))
    expected = (sum(parts.ce) + 0.7 * sum(parts.kl_per_sentence)) / len(parts.ce)
    assert loss.item() == pytest.approx(expected, rel=1e-5)
    assert loss.item() >= float(np.mean(parts.ce)) - 1e-6


def test_elbo_uniform_decoder_costs_log_vocab(tiny_cfg, examples):
    """Test a uniform p_t costs ln(d_vocab) per token"""
    m = VtiModel(tiny_cfg)
    m.out_proj.weight.data[:] = 0.0
    m.out_proj.bias.data[:] = 0.0
    loss, parts = elbo_loss(m, examples[2], beta=0.0, rng=np.random.default_rng(0))
    assert np.allclose(parts.ce, math.log(tiny_cfg.vocab_size), rtol=1e-5)
    assert loss.item() == pytest.approx(math.log(tiny_cfg.vocab_size), rel=1e-5)


def test_elbo_without_empty_slot_supervision(tiny_cfg, examples):
    """Test only sentence slots are scored when empty slots are not supervised"""
    m = VtiModel(tiny_cfg)
    record = examples[3]
    _, parts = elbo_loss(m, record, beta=1.0, rng=np.random.default_rng(0), supervise_empty_slots=False)
    assert len(parts.ce) == len(record.sentences)


def test_elbo_posterior_mean_is_deterministic(tiny_cfg, examples):
    """Test epsilon = 0 validation loss ignores the generator"""
    m = VtiModel(tiny_cfg)
    a, _ = elbo_loss(m, examples[0], 1.0, rng=np.random.default_rng(0), use_posterior_mean=True)
    b, _ = elbo_loss(m, examples[0], 1.0, rng=np.random.default_rng(99), use_posterior_mean=True)
    assert a.item() == b.item()


def test_elbo_deterministic_baseline_has_no_kl(vocab, examples):
    """Test the non-latent baseline trains on prior means only"""
    m = VtiModel(tiny_network(len(vocab), deterministic_topics=True))
    loss, parts = elbo_loss(m, examples[0], beta=1.0, rng=np.random.default_rng(0))
    assert parts.kl_per_sentence == []
    assert loss.item() == pytest.approx(float(np.mean(parts.ce)), rel=1e-5)


def test_elbo_rejects_bad_records(tiny_cfg, synth_records):
    """Test empty reports and empty sentences are contract violations"""
    m = VtiModel(tiny_cfg)
    image = synth_records[0].image
    with pytest.raises(ContractViolation):
        elbo_loss(m, ReportExample(image=image, sentences=[]), 1.0)
    with pytest.raises(ContractViolation):
        elbo_loss(m, ReportExample(image=image, sentences=[[5], []]), 1.0)


def test_elbo_truncates_to_n_max(vocab, examples):
    """Test sentences beyond n_max are dropped"""
    m = VtiModel(tiny_network(len(vocab), n_max=2))
    record = ReportExample(image=examples[0].image, sentences=[[5, 6]] * 4)
    _, parts = elbo_loss(m, record, 1.0, rng=np.random.default_rng(0))
    assert len(parts.kl_per_sentence) == 2 and len(parts.ce) == 2


def test_elbo_gradient_reaches_every_parameter(tiny_cfg, examples):
    """Test one backward pass trains every component"""
    m = VtiModel(tiny_cfg)
    with Tape() as tape:
        loss, _ = elbo_loss(m, examples[0], beta=1.0, rng=np.random.default_rng(0))
    backward(loss, tape)
    for name, p in m.named_parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_elbo_end_to_end_gradient():
    """Test the miniature network's loss gradient against central differences (64-bit)"""
    with precision(np.float64):
        m = miniature()
        record = miniature_example()
        params = m.named_parameters()
        checked = [
            params[name] for name in (
                "decoder.out_proj.weight",
                "decoder.lstm1.bias",
                "decoder.attn.w_a",
                "prior.head0.mu.bias",
                "prior.topic_attn.query.weight",
                "posterior.head.log_sigma.weight",
                "encoder.conv3.bias",
                "words.table",
            )
        ]

        def program():
            loss, _ = elbo_loss(m, record, beta=1.0, rng=np.random.default_rng(0))
            return loss

        report = grad_check_many(program, checked, eps=1e-6, tol=1e-3)
    assert report.passed, f"{report.max_rel_err} at {report.worst}"


@pytest.mark.parametrize("variant", ["inject_topic_each_step", "visual_positional"])
def test_architecture_variants_forward_and_gradient(variant):
    """Test each optional wiring changes the forward pass and keeps exact gradients (64-bit)"""
    with precision(np.float64):
        plain, m = miniature(), miniature(**{variant: True})
        record = miniature_example(1)
        loss, parts = elbo_loss(m, record, beta=1.0, rng=np.random.default_rng(0))
        assert math.isfinite(loss.item()) and len(parts.ce) == m.cfg.n_max
        if variant == "inject_topic_each_step":
            assert m.lstm1.d_in == plain.lstm1.d_in + m.cfg.d_z
        else:
            V = extract_visual_features(m, record.image)
            perm = Tensor(V.data[::-1].copy())
            moved = [not np.allclose(a.mu.data, b.mu.data) for a, b in zip(infer_priors(m, V), infer_priors(m, perm))]
            assert any(moved)

        params = m.named_parameters()
        checked = [params[name] for name in (
            "decoder.lstm1.w_ih", "prior.head0.mu.bias", "prior.topic_attn.query.weight",
        )]

        def program():
            value, _ = elbo_loss(m, record, beta=1.0, rng=np.random.default_rng(0))
            return value

        report = grad_check_many(program, checked, eps=1e-6, tol=1e-3)
    assert report.passed, f"{report.max_rel_err} at {report.worst}"


def test_generation_path_never_uses_posterior(tiny_cfg, synth_records, monkeypatch):
    """Test prior sampling runs with the posterior network disabled"""
    import vti.services.generation_service as generation_service
    import vti.services.model_service as model_service
    from vti.services.generation_service import generate_report

    def forbidden(*args, **kwargs):
        raise AssertionError("posterior reached at generation time")

    monkeypatch.setattr(model_service, "infer_posterior", forbidden)
    monkeypatch.setattr(generation_service, "infer_posterior", forbidden, raising=False)
    m = VtiModel(tiny_cfg)
    variant = generate_report(m, synth_records[0].image, 0.7, 5, np.random.default_rng(0))
    assert variant.topic_samples.shape == (tiny_cfg.n_max, tiny_cfg.d_z)


def test_reparameterized_prior_sample_shape(tiny_cfg, synth_records):
    """Test prior draws have the topic width"""
    m = VtiModel(tiny_cfg)
    prior = infer_priors(m, extract_visual_features(m, synth_records[0].image))[0]
    z = reparameterize(prior, np.random.default_rng(0).standard_normal(tiny_cfg.d_z))
    assert z.shape == (tiny_cfg.d_z,)


def test_truncated_long_sentence_trains(tiny_cfg, vocab, synth_records):
    """Test an over-long manifest sentence fits the posterior once encoded with max_tokens"""
    m = VtiModel(tiny_cfg)
    record = synth_records[0]
    record.sentences = [" ".join(["normal"] * 40)]
    with pytest.raises(ContractViolation, match="max_positions"):
        elbo_loss(m, vocab.encode_record(record), 1.0, rng=np.random.default_rng(0))
    loss, parts = elbo_loss(m, vocab.encode_record(record, tiny_cfg.max_positions), 1.0,
                            rng=np.random.default_rng(0))
    assert math.isfinite(loss.item()) and len(parts.kl_per_sentence) == 1
