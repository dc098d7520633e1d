# vti/services/model_service.py
"""
Variational Topic Inference Network

- Visual prior net: conv encoder -> [IMG] + projected local features -> Transformer,
  one attention head per topic slot feeding a per-topic Gaussian MLP
- Language posterior net: [SENT] + positioned word embeddings -> Transformer -> Gaussian MLP
  (training only)
- Sentence generator: two LSTMs with additive visual attention, conditioned on z through
  the first cell state
- elbo_loss: per-report objective averaged over supervised topic slots

All operations take the model as their first argument and use only engine ops, so the
same code runs under a Tape (training) or without one (validation, generation).
"""

from dataclasses import dataclass, field

import numpy as np

from vti.core.errors import ContractViolation
from vti.engine import (
    Tensor,
    add,
    broadcast_to,
    concat,
    dropout,
    index,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    tanh,
    tensor_sum,
)
from vti.nn import (
    AttentionParams,
    ConvStage,
    EmbeddingTable,
    LinearLayer,
    LstmCellParams,
    ParameterStore,
    TransformerLayerParams,
    conv_stage,
    embed,
    layer_norm,
    linear,
    lstm_cell,
    multi_head_attention,
    sinusoidal_table,
    to_feature_map,
    transformer_layer,
)
from vti.schemas.config import NetworkConfig
from vti.schemas.records import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, ReportExample
from vti.services.latent_service import DiagonalGaussian, kl_diag_gauss, reparameterize

CONV_CHANNELS = (16, 32)


class DropoutSampler:
    """Draws Bernoulli keep-masks from a seeded generator and applies inverted dropout"""

    def __init__(self, rng: np.random.Generator, rate: float):
        self.rng = rng
        self.rate = rate

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return x
        mask = self.rng.random(x.shape) >= self.rate
        return dropout(x, mask, self.rate)


@dataclass
class GaussianHead:
    hidden: LinearLayer
    mu: LinearLayer
    log_sigma: LinearLayer

    @classmethod
    def create(cls, store: ParameterStore, name: str, d_in: int, d_hidden: int, d_z: int) -> "GaussianHead":
        return cls(
            hidden=LinearLayer.create(store, f"{name}.hidden", d_in, d_hidden),
            mu=LinearLayer.create(store, f"{name}.mu", d_hidden, d_z),
            log_sigma=LinearLayer.create(store, f"{name}.log_sigma", d_hidden, d_z),
        )


def gaussian_head(p: GaussianHead, x: Tensor, drop: DropoutSampler | None = None) -> DiagonalGaussian:
    hidden = relu(linear(p.hidden, x))
    if drop is not None:
        hidden = drop(hidden)
    return DiagonalGaussian.from_raw(linear(p.mu, hidden), linear(p.log_sigma, hidden))


@dataclass
class DecoderState:
    """Row-batched LSTM states (B x d_h) plus the topic rows that produced them"""
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    z: Tensor

    @property
    def batch(self) -> int:
        return self.h1.shape[0]


@dataclass
class TopicSet:
    """Per-slot priors, optional posteriors and the sampled topic vectors"""
    priors: list[DiagonalGaussian]
    posteriors: list[DiagonalGaussian] = field(default_factory=list)
    samples: list[Tensor] = field(default_factory=list)


@dataclass
class ElboParts:
    ce: list[float]                # per supervised slot (sentence slots first)
    kl_per_sentence: list[float]   # per active sentence
    token_accuracy: float
    n_tokens: int


class VtiModel:
    """
    Parameters of the full network, registered in one ParameterStore

    Parameter names are stable dotted paths ("prior.head3.mu.weight", ...) and are what
    checkpoints store.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        if cfg.vocab_size <= len(SPECIAL_TOKENS):
            raise ContractViolation(f"vocab_size must exceed the {len(SPECIAL_TOKENS)} special tokens")
        self.cfg = cfg
        self.store = ParameterStore(np.random.default_rng(seed))
        s = self.store
        dm = cfg.visual_model_dim

        channels = (1, *CONV_CHANNELS, cfg.d_v)
        self.conv_encoder = [
            ConvStage.create(s, f"encoder.conv{i + 1}", channels[i], channels[i + 1])
            for i in range(3)
        ]

        self.img_token = s.uniform("prior.img_token", (1, dm), 0.5)
        self.visual_proj = LinearLayer.create(s, "prior.visual_proj", cfg.d_v, dm)
        self.visual_positions = Tensor(sinusoidal_table(self.k + 1, dm))
        self.visual_transformer = [
            TransformerLayerParams.create(s, f"prior.layer{i}", dm, cfg.n_max)
            for i in range(cfg.transformer_layers)
        ]
        self.topic_ln_gain = s.ones("prior.topic_ln.gain", (dm,))
        self.topic_ln_bias = s.zeros("prior.topic_ln.bias", (dm,))
        self.topic_attention = AttentionParams.create(s, "prior.topic_attn", dm, cfg.n_max, with_output=False)
        n_heads = 1 if cfg.shared_prior_mlp else cfg.n_max
        self.prior_heads = [
            GaussianHead.create(s, f"prior.head{i}", cfg.visual_head_dim, cfg.d_hidden, cfg.d_z)
            for i in range(n_heads)
        ]

        self.word_embeddings = EmbeddingTable.create(s, "words", cfg.vocab_size, cfg.d_e, cfg.max_positions + 1)
        self.sent_token = s.uniform("posterior.sent_token", (1, cfg.d_e), 0.5)
        self.language_transformer = [
            TransformerLayerParams.create(s, f"posterior.layer{i}", cfg.d_e, cfg.language_heads)
            for i in range(cfg.transformer_layers)
        ]
        self.posterior_head = GaussianHead.create(s, "posterior.head", cfg.d_e, cfg.d_hidden, cfg.d_z)

        self.z_to_cell = LinearLayer.create(s, "decoder.z_to_cell", cfg.d_z, cfg.d_h)
        lstm1_in = cfg.d_e + (cfg.d_z if cfg.inject_topic_each_step else 0)
        self.lstm1 = LstmCellParams.create(s, "decoder.lstm1", lstm1_in, cfg.d_h)
        # additive attention with d_a = d_h; one bias inside tanh, none on w_a
        self.attn_v = LinearLayer.create(s, "decoder.attn.w_v", cfg.d_v, cfg.d_h, bias=False)
        self.attn_h = LinearLayer.create(s, "decoder.attn.w_h", cfg.d_h, cfg.d_h)
        self.attn_w = s.uniform("decoder.attn.w_a", (cfg.d_h, 1), 1.0 / np.sqrt(cfg.d_h))
        self.lstm2 = LstmCellParams.create(s, "decoder.lstm2", cfg.d_v + cfg.d_h, cfg.d_h)
        self.out_proj = LinearLayer.create(s, "decoder.out_proj", cfg.d_h, cfg.vocab_size)

    @property
    def k(self) -> int:
        """Number of local visual features (positions of the final conv map)"""
        side = self.cfg.image_size // 8
        return side * side

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def named_parameters(self) -> dict[str, Tensor]:
        return self.store.named_parameters()

    def parameters(self):
        return self.store.parameters()

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return self.store.state()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.store.load_state(arrays)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.store.parameters())


# ============================================================================
# Prior and posterior networks
# ============================================================================

def extract_visual_features(m: VtiModel, image) -> Tensor:
    """Conv encoder: (S x S) grayscale image -> (k x d_v) local features"""
    img = np.asarray(image)
    size = m.cfg.image_size
    if img.shape != (size, size):
        raise ContractViolation(f"image must be {size}x{size}, got {img.shape}")
    x = Tensor(img.reshape(1, size, size))
    features, grid = conv_stage(m.conv_encoder[0], x)
    for stage in m.conv_encoder[1:]:
        features, grid = conv_stage(stage, to_feature_map(features, grid))
    return features


def _check_features(m: VtiModel, V: Tensor) -> None:
    if V.shape != (m.k, m.cfg.d_v):
        raise ContractViolation(f"visual features must be ({m.k}, {m.cfg.d_v}), got {V.shape}")


def infer_priors(m: VtiModel, V: Tensor, drop: DropoutSampler | None = None) -> list[DiagonalGaussian]:
    """
    One prior per topic slot, read from the [IMG] position of each attention head

    The per-head outputs are taken before concatenation, so head i only ever feeds slot i.
    The heads belong to topic_attention, an attention sublayer without output projection
    stacked on the visual transformer. Inside a full Transformer layer the heads are mixed
    by the output projection and feed-forward block, so the routed heads come from this
    extra sublayer. It also yields priors when transformer_layers = 0.
    """
    _check_features(m, V)
    seq = concat([m.img_token, linear(m.visual_proj, V)], axis=0)
    if m.cfg.visual_positional:
        seq = add(seq, Tensor(m.visual_positions.data))
    for layer in m.visual_transformer:
        seq = transformer_layer(layer, seq)
    normed = layer_norm(seq, m.topic_ln_gain, m.topic_ln_bias)
    heads = multi_head_attention(m.topic_attention, normed, return_per_head=True)
    priors = []
    for i, head in enumerate(heads):
        mlp = m.prior_heads[0 if m.cfg.shared_prior_mlp else i]
        priors.append(gaussian_head(mlp, index(head, 0), drop))
    return priors


def infer_posterior(m: VtiModel, sentence_tokens, drop: DropoutSampler | None = None) -> DiagonalGaussian:
    """Posterior over the topic of one ground-truth sentence (training only)"""
    ids = [int(t) for t in sentence_tokens]
    if not ids:
        raise ContractViolation("infer_posterior: empty sentence")
    if len(ids) > m.cfg.max_positions:
        raise ContractViolation(f"sentence of {len(ids)} tokens exceeds max_positions={m.cfg.max_positions}")
    seq = concat([m.sent_token, embed(m.word_embeddings, ids)], axis=0)
    seq = add(seq, Tensor(m.word_embeddings.positional.data[: len(ids) + 1]))
    for layer in m.language_transformer:
        seq = transformer_layer(layer, seq)
    return gaussian_head(m.posterior_head, index(seq, 0), drop)


# ============================================================================
# Sentence generator
# ============================================================================

def visual_attention(m: VtiModel, V: Tensor, h1: Tensor) -> tuple[Tensor, Tensor]:
    """
    scores_j = w_a . tanh(W_v v_j + W_h h1), alpha = softmax(scores), v_a = sum_j alpha_j v_j

    h1 may be a vector (d_h) or a row batch (B x d_h); outputs follow the same rank.
    """
    _check_features(m, V)
    was_vector = h1.ndim == 1
    h_rows = reshape(h1, (1, h1.shape[0])) if was_vector else h1
    if h_rows.ndim != 2 or h_rows.shape[1] != m.cfg.d_h:
        raise ContractViolation(f"h1 must have width {m.cfg.d_h}, got {h1.shape}")
    b, k, d_a = h_rows.shape[0], m.k, m.cfg.d_h
    pv = reshape(linear(m.attn_v, V), (1, k, d_a))
    ph = reshape(linear(m.attn_h, h_rows), (b, 1, d_a))
    joint = tanh(add(broadcast_to(pv, (b, k, d_a)), broadcast_to(ph, (b, k, d_a))))
    scores = reshape(matmul(reshape(joint, (b * k, d_a)), m.attn_w), (b, k))
    alpha = softmax(scores, axis=1)
    v_a = matmul(alpha, V)
    if was_vector:
        return reshape(alpha, (k,)), reshape(v_a, (m.cfg.d_v,))
    return alpha, v_a


def init_decoder(m: VtiModel, z: Tensor) -> DecoderState:
    """h1 = 0, c1 = z_to_cell(z), h2 = c2 = 0; z is (d_z) or (B x d_z)"""
    z_rows = reshape(z, (1, z.shape[0])) if z.ndim == 1 else z
    if z_rows.shape[1] != m.cfg.d_z:
        raise ContractViolation(f"topic vectors must have width {m.cfg.d_z}, got {z.shape}")
    b = z_rows.shape[0]
    return DecoderState(
        h1=Tensor(np.zeros((b, m.cfg.d_h))),
        c1=linear(m.z_to_cell, z_rows),
        h2=Tensor(np.zeros((b, m.cfg.d_h))),
        c2=Tensor(np.zeros((b, m.cfg.d_h))),
        z=z_rows,
    )


def _step(m: VtiModel, ids: np.ndarray, state: DecoderState, V: Tensor,
          drop: DropoutSampler | None = None) -> tuple[Tensor, DecoderState, Tensor]:
    x = embed(m.word_embeddings, ids)
    if m.cfg.inject_topic_each_step:
        x = concat([x, state.z], axis=1)
    h1, c1 = lstm_cell(m.lstm1, x, state.h1, state.c1)
    alpha, v_a = visual_attention(m, V, h1)
    h2, c2 = lstm_cell(m.lstm2, concat([v_a, h1], axis=1), state.h2, state.c2)
    out = drop(h2) if drop is not None else h2
    logits = linear(m.out_proj, out)
    return logits, DecoderState(h1=h1, c1=c1, h2=h2, c2=c2, z=state.z), alpha


def decode_step(m: VtiModel, prev_token_id, state: DecoderState, V: Tensor) -> tuple[Tensor, DecoderState, Tensor]:
    """
    One generation step

    Args:
        prev_token_id: an int (state batch of 1) or one id per state row

    Returns:
        (p_t, new state, alpha); rank-1 outputs for an int input, row batches otherwise
    """
    scalar = np.ndim(prev_token_id) == 0
    ids = np.atleast_1d(np.asarray(prev_token_id, dtype=np.int64))
    if ids.shape != (state.batch,):
        raise ContractViolation(f"{ids.size} token id(s) for a decoder batch of {state.batch}")
    logits, new_state, alpha = _step(m, ids, state, V)
    p = softmax(logits, axis=1)
    if scalar:
        return reshape(p, (m.vocab_size,)), new_state, reshape(alpha, (m.k,))
    return p, new_state, alpha


def _teacher_batch(targets: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs ([BOS] + target[:-1]), targets and mask, right-padded with [PAD]"""
    if any(len(t) == 0 for t in targets):
        raise ContractViolation("teacher forcing needs non-empty target sequences")
    width = max(len(t) for t in targets)
    inputs = np.full((len(targets), width), PAD_ID, dtype=np.int64)
    target_ids = np.full((len(targets), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(targets), width))
    for row, seq in enumerate(targets):
        inputs[row, 0] = BOS_ID
        inputs[row, 1:len(seq)] = seq[:-1]
        target_ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = 1.0
    return inputs, target_ids, mask


def teacher_forced_log_likelihood(m: VtiModel, V: Tensor, z_rows: Tensor, targets: list[list[int]],
                                  drop: DropoutSampler | None = None) -> tuple[Tensor, int, list[np.ndarray]]:
    """
    Mean target log-probability per row under teacher forcing

    Returns:
        ((B,) tensor of per-row mean log-likelihoods, number of argmax hits on unmasked
        positions, per-step (B x k) attention maps)
    """
    inputs, target_ids, mask = _teacher_batch(targets)
    weights = mask / mask.sum(axis=1, keepdims=True)
    state = init_decoder(m, z_rows)
    b = inputs.shape[0]
    rows = np.arange(b)
    picked, maps, hits = [], [], 0
    for t in range(inputs.shape[1]):
        logits, state, alpha = _step(m, inputs[:, t], state, V, drop)
        logp = log_softmax(logits, axis=1)
        picked.append(reshape(index(logp, (rows, target_ids[:, t])), (b, 1)))
        maps.append(alpha.data)
        hits += int(np.sum((logits.data.argmax(axis=1) == target_ids[:, t]) & (mask[:, t] > 0)))
    log_likelihood = tensor_sum(mul(concat(picked, axis=1), Tensor(weights)), axis=1)
    return log_likelihood, hits, maps


def score_sentences(m: VtiModel, V: Tensor, z_rows: Tensor, sentences: list[list[int]]) -> np.ndarray:
    """Mean token log-probability of each (already terminated) sentence under its topic row"""
    log_likelihood, _, _ = teacher_forced_log_likelihood(m, V, z_rows, sentences)
    return log_likelihood.data.astype(np.float64)


# ============================================================================
# Objective
# ============================================================================

def elbo_loss(m: VtiModel, record: ReportExample, beta: float, L: int = 1,
              rng: np.random.Generator | None = None, dropout_rate: float = 0.0,
              use_posterior_mean: bool = False,
              supervise_empty_slots: bool = True) -> tuple[Tensor, ElboParts]:
    """
    Negative ELBO of one report

    Sentence i is paired with topic slot i; sentences beyond n_max are dropped. Each
    active slot contributes CE_i + beta * KL(q_i || p_i), CE_i being the mean token cross
    entropy averaged over L reparameterized posterior samples. With supervise_empty_slots,
    the remaining slots are trained to emit [EOS] from a prior sample and carry no KL term.
    The total is divided by the number of supervised slots.

    Args:
        use_posterior_mean: epsilon = 0 (variance-free validation loss)
    """
    cfg = m.cfg
    if not record.sentences:
        raise ContractViolation("elbo_loss: report has no sentences")
    if L < 1:
        raise ContractViolation("elbo_loss: L must be >= 1")
    if beta < 0:
        raise ContractViolation("elbo_loss: beta must be >= 0")
    sentences = [[int(t) for t in s] for s in record.sentences[: cfg.n_max]]
    if any(not s for s in sentences):
        raise ContractViolation("elbo_loss: report contains an empty sentence")
    rng = rng if rng is not None else np.random.default_rng(0)
    drop = DropoutSampler(rng, dropout_rate) if dropout_rate > 0 else None

    V = extract_visual_features(m, record.image)
    priors = infer_priors(m, V, drop)
    n_active = len(sentences)
    posteriors: list[DiagonalGaussian] = []
    kls: list[Tensor] = []
    if not cfg.deterministic_topics:
        posteriors = [infer_posterior(m, s, drop) for s in sentences]
        kls = [kl_diag_gauss(q, priors[i]) for i, q in enumerate(posteriors)]

    n_rows = cfg.n_max if supervise_empty_slots else n_active
    targets = [s + [EOS_ID] for s in sentences] + [[EOS_ID]] * (n_rows - n_active)
    n_tokens = sum(len(t) for t in targets)

    total_ll, hits = None, 0
    for _ in range(L):
        z_rows = []
        for i in range(n_rows):
            dist = posteriors[i] if i < len(posteriors) else priors[i]
            if cfg.deterministic_topics or use_posterior_mean:
                z = dist.mu
            else:
                z = reparameterize(dist, rng.standard_normal(cfg.d_z))
            z_rows.append(reshape(z, (1, cfg.d_z)))
        ll, sample_hits, _ = teacher_forced_log_likelihood(m, V, concat(z_rows, axis=0), targets, drop)
        total_ll = ll if total_ll is None else add(total_ll, ll)
        hits += sample_hits

    ce_rows = scale(total_ll, -1.0 / L)
    total = tensor_sum(ce_rows)
    if kls:
        kl_vector = concat([reshape(kl, (1,)) for kl in kls], axis=0)
        total = add(total, scale(tensor_sum(kl_vector), beta))
    loss = scale(total, 1.0 / n_rows)

    parts = ElboParts(
        ce=[float(v) for v in ce_rows.data],
        kl_per_sentence=[float(kl.item()) for kl in kls],
        token_accuracy=hits / (L * n_tokens),
        n_tokens=n_tokens,
    )
    return loss, parts
