# vti/services/metrics_service.py
"""
Report Evaluation Metrics

- bleu / sentence_bleu: clipped n-gram precision with brevity penalty (corpus-pooled)
- rouge_l: LCS F1 averaged over pairs
- meteor_lite: exact unigram alignment with the minimum number of chunks
- label_report / clinical_efficacy: keyword labeler with a negation window, micro/macro P/R/F1
- length_hist: report length histogram

Inputs are token lists; evaluate_reports works on manifest entries and tokenizes itself.
"""

import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from vti.core.errors import ContractViolation, DatasetIOError
from vti.core.logger import log
from vti.schemas.evaluation import PRF, ClinicalScores, EvalReport
from vti.schemas.manifest import ManifestEntry
from vti.services.dataset_service import tokenize

Tokens = Sequence[str]

LABEL_KEYWORDS: dict[str, frozenset[str]] = {
    "cardiomegaly": frozenset({"cardiomegaly", "enlarged", "enlargement", "heart", "cardiac"}),
    "effusion": frozenset({"effusion", "fluid", "blunting"}),
    "opacity": frozenset({"opacity", "consolidation", "density"}),
    "pneumothorax": frozenset({"pneumothorax", "air"}),
    "fracture": frozenset({"fracture", "fractured", "broken", "break"}),
    "device": frozenset({"device", "catheter", "pacemaker", "line", "lines", "tube", "wires", "leads"}),
}
NEGATIONS = frozenset({"no", "without"})
NEGATION_WINDOW = 3

METEOR_SEARCH_BUDGET = 20_000


def _check_paired(candidates, references) -> None:
    if len(candidates) != len(references):
        raise ContractViolation(f"{len(candidates)} candidates vs {len(references)} references")


# ============================================================================
# BLEU
# ============================================================================

def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> list[float]:
    """
    Corpus BLEU-1..max_n

    Clipped n-gram matches and candidate n-gram totals are pooled over the corpus; BLEU-n is
    the geometric mean of orders 1..n times exp(1 - r/c) when the candidate corpus is shorter.
    """
    _check_paired(candidates, references)
    if max_n < 1:
        raise ContractViolation("max_n must be >= 1")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(count, r[g]) for g, count in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if cand_len == 0:
        return [0.0] * max_n
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(min(1.0, brevity * math.exp(log_sum / (n + 1))))
    return scores


def sentence_bleu(candidate: Tokens, reference: Tokens, max_n: int = 4) -> list[float]:
    return bleu([candidate], [reference], max_n)


# ============================================================================
# ROUGE-L
# ============================================================================

def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, reference: Tokens) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    _check_paired(candidates, references)
    if not candidates:
        return 0.0
    return float(np.mean([rouge_l_pair(c, r) for c, r in zip(candidates, references)]))


# ============================================================================
# METEOR-lite
# ============================================================================

class _BudgetExceeded(Exception):
    pass


def _align_exact(candidate: Tokens, reference: Tokens, budget: int) -> tuple[int, int]:
    """(matches, chunks) maximizing matches, then minimizing chunks"""
    positions = defaultdict(list)
    for j, token in enumerate(reference):
        positions[token].append(j)
    memo: dict[tuple[int, int, int], tuple[int, int]] = {}

    def best(i: int, used: int, prev: int) -> tuple[int, int]:
        # prev: reference position aligned to candidate i-1, or -2 when it is unaligned
        if i == len(candidate):
            return 0, 0
        key = (i, used, prev)
        if key in memo:
            return memo[key]
        if len(memo) >= budget:
            raise _BudgetExceeded
        result = best(i + 1, used, -2)
        for j in positions.get(candidate[i], ()):
            if used >> j & 1:
                continue
            m, chunks = best(i + 1, used | (1 << j), j)
            option = (m + 1, chunks + (0 if j == prev + 1 else 1))
            if option[0] > result[0] or (option[0] == result[0] and option[1] < result[1]):
                result = option
        memo[key] = result
        return result

    return best(0, 0, -2)


def _align_greedy(candidate: Tokens, reference: Tokens) -> tuple[int, int]:
    """Left-to-right: continue the current chunk when possible, else the leftmost free match"""
    free = defaultdict(list)
    for j, token in enumerate(reference):
        free[token].append(j)
    matches = chunks = 0
    prev = -2
    for token in candidate:
        slots = free.get(token)
        if not slots:
            prev = -2
            continue
        j = prev + 1 if prev + 1 in slots else slots[0]
        slots.remove(j)
        matches += 1
        chunks += 0 if j == prev + 1 else 1
        prev = j
    return matches, chunks


def align_unigrams(candidate: Tokens, reference: Tokens, budget: int = METEOR_SEARCH_BUDGET) -> tuple[int, int]:
    """Exact minimum-chunk alignment; greedy when the search exceeds `budget` states"""
    try:
        return _align_exact(candidate, reference, budget)
    except _BudgetExceeded:
        log.debug(f"METEOR-lite search budget exceeded ({len(candidate)}x{len(reference)}), using greedy alignment")
        return _align_greedy(candidate, reference)


def meteor_lite_pair(candidate: Tokens, reference: Tokens) -> float:
    if not candidate or not reference:
        return 0.0
    m, chunks = align_unigrams(candidate, reference)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def meteor_lite(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    _check_paired(candidates, references)
    if not candidates:
        return 0.0
    return float(np.mean([meteor_lite_pair(c, r) for c, r in zip(candidates, references)]))


# ============================================================================
# Clinical efficacy
# ============================================================================

def label_sentence(tokens: Tokens, rules: dict[str, frozenset[str]] = LABEL_KEYWORDS) -> set[str]:
    labels = set()
    for i, token in enumerate(tokens):
        window = tokens[max(0, i - NEGATION_WINDOW):i]
        if any(w in NEGATIONS for w in window):
            continue
        for label, keywords in rules.items():
            if token in keywords:
                labels.add(label)
    return labels


def label_report(report: str | Iterable[str], rules: dict[str, frozenset[str]] = LABEL_KEYWORDS) -> set[str]:
    """
    Conditions asserted by a report

    The negation window never crosses a sentence boundary; a plain string is split on '.'.
    """
    sentences = report.split(".") if isinstance(report, str) else report
    labels: set[str] = set()
    for sentence in sentences:
        labels |= label_sentence(tokenize(sentence), rules)
    return labels


def _prf(tp: int, fp: int, fn: int) -> PRF:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(precision=p, recall=r, f1=f1)


def clinical_efficacy(generated_reports: Sequence, gt_labels: Sequence[Iterable[str]],
                      rules: dict[str, frozenset[str]] = LABEL_KEYWORDS) -> ClinicalScores:
    """
    Micro and macro precision/recall/F1 of labeler output against ground-truth labels

    generated_reports items are report strings, sentence lists, or already-extracted label
    sets. Macro means run over labels that occur in the ground truth or the predictions;
    precision skips labels that were never predicted.
    """
    _check_paired(generated_reports, gt_labels)
    counts = {label: [0, 0, 0] for label in rules}  # tp, fp, fn
    for report, gt in zip(generated_reports, gt_labels):
        gt = set(gt)
        unknown = gt - set(rules)
        if unknown:
            raise ContractViolation(f"unknown ground-truth label(s): {', '.join(sorted(unknown))}")
        predicted = set(report) if isinstance(report, (set, frozenset)) else label_report(report, rules)
        for label in rules:
            if label in predicted and label in gt:
                counts[label][0] += 1
            elif label in predicted:
                counts[label][1] += 1
            elif label in gt:
                counts[label][2] += 1

    per_label = {label: _prf(*c) for label, c in counts.items()}
    micro = _prf(*(sum(c[i] for c in counts.values()) for i in range(3)))
    seen = [label for label, (tp, fp, fn) in counts.items() if tp + fp + fn > 0]
    predicted_any = [label for label in seen if counts[label][0] + counts[label][1] > 0]
    macro = PRF(
        precision=float(np.mean([per_label[lb].precision for lb in predicted_any])) if predicted_any else 0.0,
        recall=float(np.mean([per_label[lb].recall for lb in seen])) if seen else 0.0,
        f1=float(np.mean([per_label[lb].f1 for lb in seen])) if seen else 0.0,
    )
    return ClinicalScores(micro=micro, macro=macro, per_label=per_label)


# ============================================================================
# Length histograms and corpus evaluation
# ============================================================================

def length_hist(reports: Iterable[Tokens]) -> dict[int, int]:
    """Total token count per report -> number of reports"""
    hist = Counter(len(r) for r in reports)
    return dict(sorted(hist.items()))


def _report_tokens(entry: ManifestEntry) -> list[str]:
    return [t for s in entry.sentences for t in tokenize(s)]


def evaluate_reports(generated: Sequence[ManifestEntry], references: Sequence[ManifestEntry],
                     max_n: int = 4) -> EvalReport:
    """
    Pair each generated entry with the reference sharing its image path and score the corpus

    Several generated variants may share one reference; variant-wise clinical micro-F1 is
    reported separately, as is the share of images whose variants are not all identical.
    """
    by_image = {}
    for ref in references:
        if ref.image in by_image:
            raise ContractViolation(f"duplicate reference for image {ref.image}")
        by_image[ref.image] = ref
    candidates, refs, cand_reports, gt_labels, variants = [], [], [], [], []
    paired: dict[str, list[tuple[str, ...]]] = {}
    for entry in generated:
        ref = by_image.get(entry.image)
        if ref is None:
            raise ContractViolation(f"no reference for generated image {entry.image}")
        candidates.append(_report_tokens(entry))
        refs.append(_report_tokens(ref))
        cand_reports.append(entry.sentences)
        gt_labels.append(ref.labels)
        variants.append(entry.variant or 0)
        paired.setdefault(entry.image, []).append(tuple(candidates[-1]))

    variant_f1 = {}
    if len(set(variants)) > 1:
        for v in sorted(set(variants)):
            idx = [i for i, x in enumerate(variants) if x == v]
            scores = clinical_efficacy([cand_reports[i] for i in idx], [gt_labels[i] for i in idx])
            variant_f1[v] = scores.micro.f1

    # images whose variants differ in at least one token
    diverse = sum(len(set(reports)) > 1 for reports in paired.values())

    return EvalReport(
        bleu=bleu(candidates, refs, max_n),
        rouge_l=rouge_l(candidates, refs),
        meteor_lite=meteor_lite(candidates, refs),
        clinical=clinical_efficacy(cand_reports, gt_labels),
        length_hist_generated=length_hist(candidates),
        length_hist_reference=length_hist(_report_tokens(by_image[image]) for image in paired),
        per_report_bleu=[sentence_bleu(c, r, max_n)[-1] for c, r in zip(candidates, refs)],
        variant_micro_f1=variant_f1,
        variant_diversity=diverse / len(paired) if paired else 0.0,
        n_reports=len(candidates),
    )


def write_eval_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """metrics.csv (metric,value), the two length histograms and per-report BLEU"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [
            out_dir / "metrics.csv",
            out_dir / "length_hist_generated.csv",
            out_dir / "length_hist_reference.csv",
            out_dir / "per_report_bleu.csv",
        ]
        pd.DataFrame(report.metric_rows(), columns=["metric", "value"]).to_csv(paths[0], index=False)
        for path, hist in ((paths[1], report.length_hist_generated), (paths[2], report.length_hist_reference)):
            pd.DataFrame(sorted(hist.items()), columns=["length", "count"]).to_csv(path, index=False)
        pd.DataFrame({"report": range(len(report.per_report_bleu)), "bleu": report.per_report_bleu}).to_csv(
            paths[3], index=False
        )
    except OSError as e:
        log.error(f"Cannot write evaluation to {out_dir}: {e}")
        raise DatasetIOError(f"cannot write evaluation ({e.strerror})", out_dir) from e
    return paths
