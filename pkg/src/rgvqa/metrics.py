"""Scoring stack: BLEU-1..4, ROUGE-L, METEOR (exact+stem), CIDEr, exact match.

Difference questions are scored with the generation metrics; all other
question types with exact-match accuracy over normalized strings. Single
reference is the expected setting but every metric accepts a list of
references per hypothesis.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ContractError
from .records import QARecord, QuestionType
from .textproc import AnswerStyle, normalize_answer, tokenize

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
CIDER_SCALE = 10.0

_STEM_RULES = (("sses", "ss"), ("ies", "y"), ("ing", ""), ("ed", ""), ("es", ""), ("s", ""))


def stem(word: str) -> str:
    """Fixed suffix-stripping stemmer (first matching rule, stem >= 3 chars)."""
    for suffix, repl in _STEM_RULES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            return word[: len(word) - len(suffix)] + repl
    return word


def _as_reference_lists(references: Sequence) -> list[list[list[str]]]:
    """Normalize to one token-list group per hypothesis."""
    groups = []
    for ref in references:
        if isinstance(ref, str):
            groups.append([tokenize(ref)])
        else:
            groups.append([tokenize(r) for r in ref])
    return groups


def _check_corpus(hypotheses: Sequence[str], references: Sequence, op: str) -> None:
    if len(hypotheses) == 0:
        raise ContractError(f"{op}: empty corpus")
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{op}: {len(hypotheses)} hypotheses vs {len(references)} references"
        )


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(hypotheses: Sequence[str], references: Sequence, max_n: int = 4) -> list[float]:
    """Corpus-level modified n-gram precision with brevity penalty.

    Returns [BLEU-1 .. BLEU-max_n]; BLEU-k uses uniform weights over orders
    1..k and is 0 whenever some order up to k has no matches.
    """
    _check_corpus(hypotheses, references, "bleu")
    ref_groups = _as_reference_lists(references)
    matched = [0] * (max_n + 1)
    total = [0] * (max_n + 1)
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, ref_groups):
        h = tokenize(hyp)
        hyp_len += len(h)
        # effective reference length: closest to the hypothesis, ties -> shorter
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(h, n)
            best = Counter()
            for r in refs:
                for gram, c in _ngram_counts(r, n).items():
                    if c > best[gram]:
                        best[gram] = c
            matched[n] += sum(min(c, best[gram]) for gram, c in counts.items())
            total[n] += max(len(h) - n + 1, 0)

    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    precisions = [
        (matched[n] / total[n]) if total[n] > 0 else 0.0 for n in range(1, max_n + 1)
    ]
    scores = []
    for k in range(1, max_n + 1):
        if any(precisions[n - 1] == 0.0 for n in range(1, k + 1)):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(precisions[n - 1]) for n in range(1, k + 1)) / k
        scores.append(bp * math.exp(log_mean))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            row.append(prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def _rouge_pair(h: list[str], r: list[str]) -> float:
    if not h and not r:
        return 1.0
    if not h or not r:
        return 0.0
    lcs = _lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p = lcs / len(h)
    rec = lcs / len(r)
    b2 = ROUGE_BETA**2
    return (1 + b2) * rec * p / (rec + b2 * p)


def rouge_l(hypotheses: Sequence[str], references: Sequence) -> float:
    """Mean per-pair LCS F-score (beta=1.2); multi-reference takes the best ref."""
    _check_corpus(hypotheses, references, "rouge_l")
    ref_groups = _as_reference_lists(references)
    total = 0.0
    for hyp, refs in zip(hypotheses, ref_groups):
        h = tokenize(hyp)
        total += max(_rouge_pair(h, r) for r in refs)
    return total / len(hypotheses)


# ---------------------------------------------------------------------------
# METEOR


def _meteor_align(h: list[str], r: list[str]) -> list[tuple[int, int]]:
    """Two-stage greedy alignment: exact tokens first, then stems.

    Hypothesis positions are scanned left to right and take the leftmost
    unmatched reference position with the same key.
    """
    pairs: list[tuple[int, int]] = []
    h_free = [True] * len(h)
    r_free = [True] * len(r)
    for key_fn in (lambda w: w, stem):
        r_keys = [key_fn(w) for w in r]
        for i, w in enumerate(h):
            if not h_free[i]:
                continue
            key = key_fn(w)
            for j, rk in enumerate(r_keys):
                if r_free[j] and rk == key:
                    pairs.append((i, j))
                    h_free[i] = False
                    r_free[j] = False
                    break
    return sorted(pairs)


def _meteor_pair(h: list[str], r: list[str]) -> float:
    if not h and not r:
        return 1.0
    if not h or not r:
        return 0.0
    pairs = _meteor_align(h, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(h)
    recall = m / len(r)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    chunks = 1
    for (hi, ri), (hj, rj) in zip(pairs, pairs[1:]):
        if hj != hi + 1 or rj != ri + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def meteor_stem(hypotheses: Sequence[str], references: Sequence) -> float:
    """Mean per-pair METEOR restricted to exact and stem matching stages."""
    _check_corpus(hypotheses, references, "meteor_stem")
    ref_groups = _as_reference_lists(references)
    total = 0.0
    for hyp, refs in zip(hypotheses, ref_groups):
        h = tokenize(hyp)
        total += max(_meteor_pair(h, r) for r in refs)
    return total / len(hypotheses)


# ---------------------------------------------------------------------------
# CIDEr


def _tf(tokens: list[str], n: int) -> dict[tuple, float]:
    counts = _ngram_counts(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: c / total for g, c in counts.items()}


def _cosine(a: Mapping, b: Mapping) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider(hypotheses: Sequence[str], references: Sequence, max_n: int = 4) -> float:
    """TF-IDF n-gram cosine averaged over orders 1..max_n, scaled by 10.

    Document frequencies come from the evaluated split's reference corpus;
    an n-gram absent from every reference gets idf log(corpus_size / 1).
    When idf weighting zeroes both vectors of a pair (degenerate small-corpus
    idf), the raw TF vectors are compared instead so identical texts still
    score 1 before scaling.
    """
    _check_corpus(hypotheses, references, "cider")
    ref_groups = _as_reference_lists(references)
    m = len(ref_groups)
    df: list[defaultdict] = [defaultdict(int) for _ in range(max_n + 1)]
    for refs in ref_groups:
        for n in range(1, max_n + 1):
            grams = set()
            for r in refs:
                grams.update(_ngram_counts(r, n))
            for g in grams:
                df[n][g] += 1

    def idf(n: int, gram: tuple) -> float:
        return math.log(m / max(df[n][gram], 1))

    total = 0.0
    for hyp, refs in zip(hypotheses, ref_groups):
        h = tokenize(hyp)
        pair = 0.0
        for n in range(1, max_n + 1):
            h_tf = _tf(h, n)
            h_vec = {g: tf * idf(n, g) for g, tf in h_tf.items()}
            best = 0.0
            for r in refs:
                r_tf = _tf(r, n)
                r_vec = {g: tf * idf(n, g) for g, tf in r_tf.items()}
                if (
                    h_vec
                    and r_vec
                    and all(v == 0.0 for v in h_vec.values())
                    and all(v == 0.0 for v in r_vec.values())
                ):
                    sim = _cosine(h_tf, r_tf)
                else:
                    sim = _cosine(h_vec, r_vec)
                best = max(best, sim)
            pair += best / max_n
        total += pair
    return CIDER_SCALE * total / m


# ---------------------------------------------------------------------------
# Exact match and assembly


@dataclass
class MetricReport:
    bleu: list[float] | None = None
    meteor: float | None = None
    rouge_l: float | None = None
    cider: float | None = None
    acc_open: float | None = None
    acc_closed: float | None = None
    acc_all: float | None = None
    per_question_type: dict[str, dict] = field(default_factory=dict)
    n_difference: int = 0
    n_open: int = 0
    n_closed: int = 0

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "acc_open": self.acc_open,
            "acc_closed": self.acc_closed,
            "acc_all": self.acc_all,
            "per_question_type": self.per_question_type,
            "n_difference": self.n_difference,
            "n_open": self.n_open,
            "n_closed": self.n_closed,
        }


def exact_match(
    predictions: Sequence[str], qa_records: Sequence[QARecord]
) -> tuple[float | None, float | None, float | None, dict[str, dict]]:
    """Normalized-equality accuracy, bucketed open/closed and per question type.

    Difference records are not admissible here (they are scored with the
    generation metrics).
    """
    if len(predictions) != len(qa_records):
        raise ContractError(
            f"exact_match: {len(predictions)} predictions vs {len(qa_records)} records"
        )
    hits = {"open": 0, "closed": 0}
    counts = {"open": 0, "closed": 0}
    per_type: dict[str, dict] = {}
    for pred, rec in zip(predictions, qa_records):
        if rec.question_type == QuestionType.DIFFERENCE:
            raise ContractError(
                f"exact_match: difference question for study {rec.study_id} not admitted"
            )
        bucket = "closed" if rec.answer_style == AnswerStyle.CLOSED else "open"
        ok = normalize_answer(pred) == normalize_answer(rec.answer)
        hits[bucket] += ok
        counts[bucket] += 1
        t = per_type.setdefault(rec.question_type.value, {"hits": 0, "count": 0})
        t["hits"] += ok
        t["count"] += 1

    def ratio(h, c):
        return h / c if c else None

    acc_open = ratio(hits["open"], counts["open"])
    acc_closed = ratio(hits["closed"], counts["closed"])
    total = counts["open"] + counts["closed"]
    acc_all = ratio(hits["open"] + hits["closed"], total)
    per_type_acc = {
        t: {"acc": v["hits"] / v["count"], "count": v["count"]}
        for t, v in sorted(per_type.items())
    }
    return acc_open, acc_closed, acc_all, per_type_acc


def evaluate(
    predictions: Sequence[str | None] | Mapping[int, str],
    qa_records: Sequence[QARecord],
) -> MetricReport:
    """Route difference questions to the generation metrics and the rest to
    exact match, assembling one report."""
    resolved: list[str] = []
    for i, rec in enumerate(qa_records):
        if isinstance(predictions, Mapping):
            value = predictions.get(i)
        else:
            value = predictions[i] if i < len(predictions) else None
        if value is None:
            raise ContractError(
                f"evaluate: missing prediction for record {i} "
                f"(study {rec.study_id}: {rec.question!r})"
            )
        resolved.append(value)

    report = MetricReport()
    diff_idx = [i for i, r in enumerate(qa_records) if r.question_type == QuestionType.DIFFERENCE]
    other_idx = [i for i, r in enumerate(qa_records) if r.question_type != QuestionType.DIFFERENCE]

    if diff_idx:
        hyps = [resolved[i] for i in diff_idx]
        refs = [qa_records[i].answer for i in diff_idx]
        report.bleu = bleu(hyps, refs)
        report.meteor = meteor_stem(hyps, refs)
        report.rouge_l = rouge_l(hyps, refs)
        report.cider = cider(hyps, refs)
        report.n_difference = len(diff_idx)
        report.per_question_type[QuestionType.DIFFERENCE.value] = {
            "bleu_4": report.bleu[3],
            "meteor": report.meteor,
            "rouge_l": report.rouge_l,
            "cider": report.cider,
            "count": len(diff_idx),
        }

    if other_idx:
        preds = [resolved[i] for i in other_idx]
        recs = [qa_records[i] for i in other_idx]
        acc_open, acc_closed, acc_all, per_type = exact_match(preds, recs)
        report.acc_open = acc_open
        report.acc_closed = acc_closed
        report.acc_all = acc_all
        report.n_open = sum(1 for r in recs if r.answer_style == AnswerStyle.OPEN)
        report.n_closed = len(recs) - report.n_open
        report.per_question_type.update(per_type)

    return report


# ---------------------------------------------------------------------------
# Table formatting


_NLG_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")
_ACC_COLUMNS = ("Open", "Closed", "All")


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def format_metric_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned text table; generation metric columns then accuracy columns."""
    header = ["Model", *_NLG_COLUMNS, *_ACC_COLUMNS]
    body = []
    for label, rep in rows:
        b = rep.bleu or [None] * 4
        body.append([
            label, _fmt(b[0]), _fmt(b[1]), _fmt(b[2]), _fmt(b[3]),
            _fmt(rep.meteor), _fmt(rep.rouge_l), _fmt(rep.cider),
            _fmt(rep.acc_open), _fmt(rep.acc_closed), _fmt(rep.acc_all),
        ])
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for row in [header, *body]:
        lines.append("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
