# vti/services/generation_service.py
"""
Report Generation

Topics are drawn from the image-conditioned priors only; nothing here reaches the
posterior network or ground-truth sentences. Every topic slot is decoded as one row of
a batched decoder, with temperature + top-k sampling per token.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from vti.core.errors import ContractViolation, DatasetIOError
from vti.core.logger import log
from vti.engine import Tensor, concat, reshape
from vti.schemas.config import GenerationConfig
from vti.schemas.manifest import ManifestEntry
from vti.schemas.records import BOS_ID, CONDITIONS, EOS_ID, DatasetRecord
from vti.services.dataset_service import Vocabulary, write_pgm
from vti.services.latent_service import DiagonalGaussian, reparameterize
from vti.services.metrics_service import label_report
from vti.services.model_service import (
    TopicSet,
    VtiModel,
    decode_step,
    extract_visual_features,
    infer_priors,
    init_decoder,
    score_sentences,
)

ATTENTION_UPSAMPLE = 8


@dataclass
class ReportVariant:
    """
    One sampled report

    sentences keep their terminal [EOS] (absent only when max_sentence_len was reached);
    slots[i] is the topic slot sentence i was decoded from.
    """
    sentences: list[list[int]]
    slots: list[int]
    topic_samples: np.ndarray                 # (n_max, d_z)
    log_probs: list[float]                    # mean token log-probability per sentence
    attention_maps: list[np.ndarray]          # per sentence: (tokens x k)
    selection_scores: list[float] = field(default_factory=list)


# ============================================================================
# Token sampling
# ============================================================================

def sampling_distribution(p_t, temperature: float, k: int) -> np.ndarray:
    """
    Distribution sample_token draws from: p^(1/temperature) restricted to the top k ids
    (ties go to the lower id), renormalized
    """
    p = np.asarray(p_t.data if isinstance(p_t, Tensor) else p_t, dtype=np.float64).reshape(-1)
    if temperature <= 0:
        raise ContractViolation(f"temperature must be > 0, got {temperature}")
    if not 1 <= k <= p.size:
        raise ContractViolation(f"top-k must be in [1, {p.size}], got {k}")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-4):
        raise ContractViolation("p_t must be a probability distribution")
    keep = np.argsort(-p, kind="stable")[:k]
    with np.errstate(divide="ignore"):
        logits = np.log(p[keep]) / temperature
    weights = np.exp(logits - logits.max())
    out = np.zeros_like(p)
    out[keep] = weights / weights.sum()
    return out


def sample_token(p_t, temperature: float, k: int, rng: np.random.Generator) -> int:
    """Temperature + top-k sample; consumes exactly one uniform draw"""
    dist = sampling_distribution(p_t, temperature, k)
    cdf = np.cumsum(dist)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), dist.size - 1))


# ============================================================================
# Variants
# ============================================================================

def sample_topics(m: VtiModel, priors: list[DiagonalGaussian], rng: np.random.Generator) -> TopicSet:
    """One reparameterized draw per slot (prior means for the deterministic baseline)"""
    eps = rng.standard_normal((m.cfg.n_max, m.cfg.d_z))
    if m.cfg.deterministic_topics:
        eps = np.zeros_like(eps)
    samples = [reparameterize(prior, eps[i]) for i, prior in enumerate(priors)]
    return TopicSet(priors=priors, samples=samples)


def generate_report(m: VtiModel, image, temperature: float, k: int, rng: np.random.Generator,
                    max_len: int = 20) -> ReportVariant:
    """
    Sample a report: one topic per slot from its prior, one sentence per topic

    A slot whose first token is [EOS] yields no sentence; a sentence identical to an
    earlier one is dropped.
    """
    if max_len < 1:
        raise ContractViolation("max_len must be >= 1")
    n_max = m.cfg.n_max
    V = extract_visual_features(m, image)
    topics = sample_topics(m, infer_priors(m, V), rng)
    z_rows = concat([reshape(z, (1, m.cfg.d_z)) for z in topics.samples], axis=0)
    state = init_decoder(m, z_rows)

    prev = np.full(n_max, BOS_ID, dtype=np.int64)
    done = np.zeros(n_max, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(n_max)]
    logps: list[list[float]] = [[] for _ in range(n_max)]
    maps: list[list[np.ndarray]] = [[] for _ in range(n_max)]
    for _ in range(max_len):
        p, state, alpha = decode_step(m, prev, state, V)
        for i in range(n_max):
            if done[i]:
                continue
            token = sample_token(p.data[i], temperature, k, rng)
            tokens[i].append(token)
            logps[i].append(float(np.log(max(float(p.data[i, token]), 1e-300))))
            maps[i].append(alpha.data[i].astype(np.float64))
            prev[i] = token
            done[i] = token == EOS_ID
        if done.all():
            break

    kept, slots, log_probs, attention = [], [], [], []
    seen: set[tuple[int, ...]] = set()
    for i in range(n_max):
        if tokens[i][0] == EOS_ID:
            continue
        content = tuple(t for t in tokens[i] if t != EOS_ID)
        if content in seen:
            continue
        seen.add(content)
        kept.append(tokens[i])
        slots.append(i)
        log_probs.append(float(np.mean(logps[i])))
        attention.append(np.stack(maps[i]))
    return ReportVariant(
        sentences=kept,
        slots=slots,
        topic_samples=np.stack([z.data for z in topics.samples]).astype(np.float64),
        log_probs=log_probs,
        attention_maps=attention,
    )


def score_slot_candidates(m: VtiModel, V: Tensor, priors: list[DiagonalGaussian], slot: int,
                          candidates: list[list[int]], eps: np.ndarray) -> np.ndarray:
    """
    Model-averaged score of each candidate sentence for one slot

    Mean teacher-forced token log-likelihood, averaged over the topic draws
    prior_slot.mu + sigma * eps[s] for s = 1..S.
    """
    prior = priors[slot]
    z = prior.mu.data[None, :] + prior.sigma[None, :] * eps          # (S, d_z)
    n, s = len(candidates), eps.shape[0]
    rows = [c for c in candidates for _ in range(s)]
    z_rows = Tensor(np.tile(z, (n, 1)))
    return score_sentences(m, V, z_rows, rows).reshape(n, s).mean(axis=1)


def select_best_report(m: VtiModel, image, variants: list[ReportVariant], S: int,
                       rng: np.random.Generator) -> ReportVariant:
    """
    Combine variants slot by slot, keeping the candidate with the highest model-averaged score

    All candidates of a slot are scored on the same S prior draws; ties go to the earliest
    variant. A candidate repeating a sentence already chosen for an earlier slot is passed
    over for the next best one. A single variant is returned unchanged.
    """
    if not variants:
        raise ContractViolation("select_best_report needs at least one variant")
    if len(variants) == 1:
        return variants[0]
    if S < 1:
        raise ContractViolation("S must be >= 1")
    V = extract_visual_features(m, image)
    priors = infer_priors(m, V)
    eps = rng.standard_normal((S, m.cfg.n_max, m.cfg.d_z))

    sentences, slots, log_probs, attention, scores = [], [], [], [], []
    topic_samples = variants[0].topic_samples.copy()
    seen: set[tuple[int, ...]] = set()
    for slot in range(m.cfg.n_max):
        candidates = [
            (vi, j) for vi, v in enumerate(variants) for j, s in enumerate(v.slots) if s == slot
        ]
        if not candidates:
            continue
        texts = [variants[vi].sentences[j] for vi, j in candidates]
        slot_scores = score_slot_candidates(m, V, priors, slot, texts, eps[:, slot, :])
        # best candidate not already used by an earlier slot; ties go to the earliest variant
        ranked = sorted(range(len(candidates)), key=lambda c: (-slot_scores[c], c))
        contents = [tuple(t for t in text if t != EOS_ID) for text in texts]
        best = next((c for c in ranked if contents[c] not in seen), None)
        if best is None:
            continue
        vi, j = candidates[best]
        seen.add(contents[best])
        winner = variants[vi]
        sentences.append(winner.sentences[j])
        slots.append(slot)
        log_probs.append(winner.log_probs[j])
        attention.append(winner.attention_maps[j])
        scores.append(float(slot_scores[best]))
        topic_samples[slot] = winner.topic_samples[slot]
    return ReportVariant(
        sentences=sentences,
        slots=slots,
        topic_samples=topic_samples,
        log_probs=log_probs,
        attention_maps=attention,
        selection_scores=scores,
    )


# ============================================================================
# Export
# ============================================================================

def export_attention_maps(v: ReportVariant, out_dir: str | Path, upsample: int = ATTENTION_UPSAMPLE) -> list[Path]:
    """
    sentence_XX.csv: one row per decoding step, one column per image location
    sentence_XX_token_YY.pgm: that step's weights on the feature grid, scaled by their maximum
    """
    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, maps in enumerate(v.attention_maps):
            k = maps.shape[1]
            side = int(round(np.sqrt(k)))
            if side * side != k:
                raise ContractViolation(f"attention over {k} locations is not a square grid")
            csv_path = out_dir / f"sentence_{i:02d}.csv"
            pd.DataFrame(maps, columns=[f"loc_{j}" for j in range(k)]).to_csv(csv_path, index=False)
            written.append(csv_path)
            for t, alpha in enumerate(maps):
                peak = alpha.max()
                heat = alpha / peak if peak > 0 else alpha
                pgm_path = out_dir / f"sentence_{i:02d}_token_{t:02d}.pgm"
                write_pgm(pgm_path, np.kron(heat.reshape(side, side), np.ones((upsample, upsample))))
                written.append(pgm_path)
    except OSError as e:
        log.error(f"Cannot write attention maps to {out_dir}: {e}")
        raise DatasetIOError(f"cannot write attention maps ({e.strerror})", out_dir) from e
    return written


def variant_entry(v: ReportVariant, vocab: Vocabulary, record: DatasetRecord,
                  variant: int | None = None) -> ManifestEntry:
    """Manifest line for a generated report; labels are what the rule labeler reads from it"""
    texts = [vocab.decode_text(s) for s in v.sentences]
    texts = [t for t in texts if t]
    predicted = label_report(texts)
    return ManifestEntry(
        image=record.image_path,
        sentences=texts,
        labels=[c for c in CONDITIONS if c in predicted],
        style=record.style,
        split=record.split,
        variant=variant,
    )


def generate_for_records(m: VtiModel, records: list[DatasetRecord], vocab: Vocabulary,
                         cfg: GenerationConfig, best: bool = False,
                         attention_dir: str | Path | None = None,
                         attention_records: int = 0) -> list[ManifestEntry]:
    """
    Generate cfg.variants reports per record (or their best combination)

    Record i draws from a generator seeded with (cfg.seed, i), so output does not depend on
    how records are scheduled.
    """
    entries = []
    for i, record in enumerate(records):
        rng = np.random.default_rng([cfg.seed, i])
        variants = [
            generate_report(m, record.image, cfg.temperature, cfg.top_k, rng, cfg.max_sentence_len)
            for _ in range(cfg.variants)
        ]
        if best:
            chosen = [(None, select_best_report(m, record.image, variants, cfg.rescoring_samples, rng))]
        else:
            chosen = list(enumerate(variants))
        for index, v in chosen:
            entries.append(variant_entry(v, vocab, record, index))
            if attention_dir is not None and i < attention_records:
                stem = Path(record.image_path).stem + ("" if index is None else f"_v{index}")
                export_attention_maps(v, Path(attention_dir) / stem)
        log.debug(f"Generated {len(chosen)} report(s) for {record.image_path}")
    log.info(f"Generated {len(entries)} reports for {len(records)} images")
    return entries
