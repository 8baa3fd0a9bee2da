"""Two-stage orchestration: report-generator training, answer-generator
training initialized from report-generator weights, report caching,
visual-input routing, and evaluation over splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus_io import Corpus
from .errors import ContractError
from .metrics import MetricReport, bleu, evaluate
from .model import (
    ModelConfig,
    assemble_joint_input,
    config_digest,
    forward,
    generate_greedy_batch,
    init_params,
    project_scan_pair,
)
from .optim import AdamState, adam_step, lr_at_epoch
from .records import QARecord, QuestionType, Split, StudyRecord
from .textproc import (
    AnswerStyle,
    Section,
    TokenSequence,
    Vocabulary,
    answer_prompt,
    build_vocab,
    normalize_answer,
    report_prompt,
    FINDING_INSTRUCTION,
    IMPRESSION_INSTRUCTION,
)


@dataclass
class PredictedReport:
    findings: str
    impression: str

    @property
    def rr(self) -> str:
        """Grounding text: findings then impression, space-joined."""
        return f"{self.findings} {self.impression}"


class VisualInput(str, Enum):
    CURRENT_ONLY = "current_only"
    CURRENT_AND_PRIOR = "current_and_prior"
    NONE = "none"


class TextSource(str, Enum):
    NONE = "none"
    FINDINGS = "findings"
    IMPRESSION = "impression"
    FINDINGS_AND_IMPRESSION = "findings_and_impression"
    GROUND_TRUTH_REPORT = "ground_truth_report"


_VISUAL_LABEL = {
    VisualInput.CURRENT_ONLY: "C",
    VisualInput.CURRENT_AND_PRIOR: "C + P",
    VisualInput.NONE: "-",
}
_TEXT_LABEL = {
    TextSource.NONE: "-",
    TextSource.FINDINGS: "F",
    TextSource.IMPRESSION: "I",
    TextSource.FINDINGS_AND_IMPRESSION: "F + I",
    TextSource.GROUND_TRUTH_REPORT: "F + I (Ground Truth)",
}


@dataclass(frozen=True)
class AblationSpec:
    visual: VisualInput = VisualInput.CURRENT_AND_PRIOR
    text: TextSource = TextSource.FINDINGS_AND_IMPRESSION

    @property
    def label(self) -> str:
        return f"{_VISUAL_LABEL[self.visual]}, {_TEXT_LABEL[self.text]}"

    @property
    def upper_bound(self) -> bool:
        return self.text == TextSource.GROUND_TRUTH_REPORT


ABLATION_GRID = (
    AblationSpec(VisualInput.CURRENT_ONLY, TextSource.NONE),
    AblationSpec(VisualInput.CURRENT_AND_PRIOR, TextSource.NONE),
    AblationSpec(VisualInput.CURRENT_AND_PRIOR, TextSource.IMPRESSION),
    AblationSpec(VisualInput.CURRENT_AND_PRIOR, TextSource.FINDINGS),
    AblationSpec(VisualInput.NONE, TextSource.FINDINGS_AND_IMPRESSION),
    AblationSpec(VisualInput.CURRENT_AND_PRIOR, TextSource.FINDINGS_AND_IMPRESSION),
    AblationSpec(VisualInput.CURRENT_AND_PRIOR, TextSource.GROUND_TRUTH_REPORT),
)


@dataclass
class TrainRunConfig:
    epochs: int = 30
    lr0: float = 3e-3          # desk-scale default; published_recipe() keeps 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 10
    batch_size: int = 8
    seed: int = 0
    max_new_report: int = 96
    max_new_answer: int = 40
    decode_batch: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


def published_recipe(seed: int = 0) -> TrainRunConfig:
    """The full-scale training recipe (100 epochs, lr 1e-4, decay 0.8/10).

    Kept as a named configuration; CI runs the desk-scale defaults.
    """
    return TrainRunConfig(epochs=100, lr0=1e-4, seed=seed)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_epoch: int
    best_score: float
    epoch_log: list[dict]
    digest: str


# ---------------------------------------------------------------------------
# Parameter bookkeeping


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: ad.parameter(p.data.copy(), name=name) for name, p in params.items()}


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Corpus views


def split_studies(corpus: Corpus) -> dict[Split, list[StudyRecord]]:
    split_of = {a.study_id: a.split for a in corpus.splits}
    out: dict[Split, list[StudyRecord]] = {s: [] for s in Split}
    for st in corpus.studies:
        out[split_of[st.study_id]].append(st)
    return out


def split_qa(corpus: Corpus) -> dict[Split, list[QARecord]]:
    split_of = {a.study_id: a.split for a in corpus.splits}
    out: dict[Split, list[QARecord]] = {s: [] for s in Split}
    for rec in corpus.qa:
        out[split_of[rec.study_id]].append(rec)
    return out


def corpus_vocabulary(corpus: Corpus, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over the training split plus the fixed prompt/answer phrases."""
    train_ids = {a.study_id for a in corpus.splits if a.split == Split.TRAIN}
    texts = [FINDING_INSTRUCTION, IMPRESSION_INSTRUCTION, "yes", "no"]
    for st in corpus.studies:
        if st.study_id in train_ids:
            texts.extend([st.indication, st.findings, st.impression])
    for rec in corpus.qa:
        if rec.study_id in train_ids:
            texts.extend([rec.question, rec.answer])
            if rec.choices:
                texts.extend(rec.choices)
    return build_vocab(texts, min_freq=min_freq)


def zero_tokens(config: ModelConfig) -> np.ndarray:
    return np.zeros((config.N, config.d_visual), dtype=np.float32)


def study_visuals(
    study: StudyRecord, by_id: dict[str, StudyRecord], config: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Current tokens plus prior-study tokens when the study has a prior."""
    current = study.tokens.vectors
    if study.prior_study_id is not None:
        prior = by_id[study.prior_study_id].tokens.vectors
    else:
        prior = zero_tokens(config)
    return current, prior


def select_visual_inputs(
    question_type: QuestionType,
    current: np.ndarray,
    prior: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Difference questions see both scans; every other type gets a zeroed prior."""
    current = np.asarray(current)
    if question_type == QuestionType.DIFFERENCE:
        if prior is None:
            raise ContractError("difference question requires prior-scan tokens")
        return current, np.asarray(prior)
    return current, np.zeros_like(current)


# ---------------------------------------------------------------------------
# Example assembly and the batch loss


@dataclass
class Example:
    current: np.ndarray
    prior: np.ndarray
    prompt: TokenSequence
    target_ids: list[int]


def _rg_examples(
    studies: list[StudyRecord], by_id: dict[str, StudyRecord],
    vocab: Vocabulary, config: ModelConfig,
) -> list[Example]:
    out = []
    for st in studies:
        current, prior = study_visuals(st, by_id, config)
        for section, text in (
            (Section.FINDING, st.findings),
            (Section.IMPRESSION, st.impression),
        ):
            out.append(Example(
                current=current,
                prior=prior,
                prompt=report_prompt(st.indication, section, vocab),
                target_ids=vocab.encode_text(text),
            ))
    return out


def _grounding_text(
    rec: QARecord,
    study: StudyRecord,
    reports: dict[str, PredictedReport] | None,
    text_source: TextSource,
) -> str | None:
    if text_source == TextSource.NONE:
        return None
    if text_source == TextSource.GROUND_TRUTH_REPORT:
        return f"{study.findings} {study.impression}"
    if reports is None or rec.study_id not in reports:
        raise ContractError(
            f"text source {text_source.value} requires a cached report for study {rec.study_id}"
        )
    report = reports[rec.study_id]
    if text_source == TextSource.FINDINGS:
        return report.findings
    if text_source == TextSource.IMPRESSION:
        return report.impression
    return report.rr


def _ag_visuals(
    rec: QARecord,
    by_id: dict[str, StudyRecord],
    config: ModelConfig,
    visual: VisualInput,
    route_probe=None,
) -> tuple[np.ndarray, np.ndarray]:
    study = by_id[rec.study_id]
    current = study.tokens.vectors
    prior_opt = (
        by_id[rec.prior_study_id].tokens.vectors
        if rec.prior_study_id is not None
        else None
    )
    if visual == VisualInput.NONE:
        current = np.zeros_like(current)
        prior = np.zeros_like(current)
    elif visual == VisualInput.CURRENT_ONLY:
        prior = np.zeros_like(current)
    else:
        current, prior = select_visual_inputs(rec.question_type, current, prior_opt)
    if route_probe is not None:
        route_probe(rec, current, prior)
    return current, prior


def _ag_examples(
    records: list[QARecord],
    corpus: Corpus,
    reports: dict[str, PredictedReport] | None,
    ablation: AblationSpec,
    vocab: Vocabulary,
    config: ModelConfig,
    route_probe=None,
) -> list[Example]:
    by_id = corpus.study_by_id()
    out = []
    for rec in records:
        current, prior = _ag_visuals(rec, by_id, config, ablation.visual, route_probe)
        rr = _grounding_text(rec, by_id[rec.study_id], reports, ablation.text)
        prompt = answer_prompt(rec.question, rr, rec.choices, rec.answer_style, vocab)
        out.append(Example(
            current=current,
            prior=prior,
            prompt=prompt,
            target_ids=vocab.encode_text(rec.answer),
        ))
    return out


def _batch_loss(
    batch: list[Example], params: dict[str, Tensor],
    config: ModelConfig, vocab: Vocabulary,
) -> Tensor:
    from .model import pad_text_batch

    current = np.stack([ex.current for ex in batch])
    prior = np.stack([ex.prior for ex in batch])
    ids, valid = pad_text_batch([ex.prompt for ex in batch], vocab.pad_id)
    room = config.max_len - 1
    targets = [ex.target_ids[:room] for ex in batch]
    width = max(len(t) for t in targets) + 1
    dec_in = np.full((len(batch), width), vocab.pad_id, dtype=np.int64)
    labels = np.full((len(batch), width), vocab.pad_id, dtype=np.int64)
    for r, t in enumerate(targets):
        dec_in[r, 0] = vocab.bos_id
        dec_in[r, 1 : len(t) + 1] = t
        labels[r, : len(t)] = t
        labels[r, len(t)] = vocab.eos_id

    joint = project_scan_pair(current, prior, params, config)
    enc_in = assemble_joint_input(joint, ids, valid, params, config)
    logits = forward(enc_in, dec_in, params, config, bos_id=vocab.bos_id)
    return ad.cross_entropy(logits, labels, ignore_id=vocab.pad_id)


def _decode_batched(
    params: dict[str, Tensor], config: ModelConfig, vocab: Vocabulary,
    examples: list[Example], max_new: int, decode_batch: int,
) -> list[str]:
    out: list[str] = []
    for lo in range(0, len(examples), decode_batch):
        chunk = examples[lo : lo + decode_batch]
        out.extend(generate_greedy_batch(
            params, config, vocab,
            np.stack([ex.current for ex in chunk]),
            np.stack([ex.prior for ex in chunk]),
            [ex.prompt for ex in chunk],
            max_new,
        ))
    return out


# ---------------------------------------------------------------------------
# Training


def _run_training(
    examples: list[Example],
    params: dict[str, Tensor],
    config: ModelConfig,
    run: TrainRunConfig,
    vocab: Vocabulary,
    validate,
    digest: str,
) -> TrainResult:
    """Shared loop: epochs of Adam steps, per-epoch validation decode, and
    selection of the highest-scoring epoch (ties resolve to the earlier one)."""
    state = AdamState(lr=run.lr0)
    rng = np.random.default_rng(run.seed)
    best_score = -np.inf
    best_epoch = -1
    best_params = clone_params(params)
    log: list[dict] = []
    for epoch in range(run.epochs):
        lr = lr_at_epoch(epoch, run.lr0, run.lr_decay, run.lr_decay_every)
        order = rng.permutation(len(examples))
        running = 0.0
        for lo in range(0, len(order), run.batch_size):
            batch = [examples[i] for i in order[lo : lo + run.batch_size]]
            loss = _batch_loss(batch, params, config, vocab)
            ad.backward(loss, params.values())
            adam_step(state, params, lr)
            running += float(loss.data) * len(batch)
        train_loss = running / len(examples)
        val_score = validate(params)
        log.append({
            "epoch": epoch, "lr": lr,
            "train_loss": train_loss, "val_bleu4": val_score,
        })
        if val_score > best_score:
            best_score = val_score
            best_epoch = epoch
            best_params = clone_params(params)
    return TrainResult(
        params=best_params,
        best_epoch=best_epoch,
        best_score=float(best_score),
        epoch_log=log,
        digest=digest,
    )


def train_rg(
    corpus: Corpus,
    config: ModelConfig,
    run: TrainRunConfig,
    vocab: Vocabulary | None = None,
) -> tuple[TrainResult, Vocabulary]:
    """Report-generator pretraining: cross-entropy over section tokens, epoch
    selection by validation BLEU-4 pooled over both report sections."""
    vocab = vocab or corpus_vocabulary(corpus)
    by_split = split_studies(corpus)
    if not by_split[Split.TRAIN] or not by_split[Split.VALIDATION]:
        raise ContractError("train_rg requires non-empty train and validation splits")
    by_id = corpus.study_by_id()
    train_ex = _rg_examples(by_split[Split.TRAIN], by_id, vocab, config)
    val_ex = _rg_examples(by_split[Split.VALIDATION], by_id, vocab, config)
    val_refs = []
    for st in by_split[Split.VALIDATION]:
        val_refs.extend([st.findings, st.impression])
    digest = config_digest(config, vocab)

    def validate(params: dict[str, Tensor]) -> float:
        hyps = _decode_batched(params, config, vocab, val_ex, run.max_new_report, run.decode_batch)
        return bleu(hyps, val_refs)[3]

    params = init_params(config, seed=run.seed)
    result = _run_training(train_ex, params, config, run, vocab, validate, digest)
    return result, vocab


def generate_report(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    current: np.ndarray,
    prior: np.ndarray | None,
    indication: str,
    max_new: int = 96,
) -> PredictedReport:
    """Two independent section generations over identical visual inputs."""
    if prior is None:
        prior = zero_tokens(config)
    prompts = [
        report_prompt(indication, Section.FINDING, vocab),
        report_prompt(indication, Section.IMPRESSION, vocab),
    ]
    stacked_c = np.stack([current, current])
    stacked_p = np.stack([prior, prior])
    findings, impression = generate_greedy_batch(
        params, config, vocab, stacked_c, stacked_p, prompts, max_new
    )
    return PredictedReport(findings=findings, impression=impression)


def predict_reports(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    corpus: Corpus,
    run: TrainRunConfig,
) -> dict[str, PredictedReport]:
    """One cached report per study (each section decoded exactly once)."""
    by_id = corpus.study_by_id()
    examples = []
    for st in corpus.studies:
        current, prior = study_visuals(st, by_id, config)
        for section in (Section.FINDING, Section.IMPRESSION):
            examples.append(Example(
                current=current, prior=prior,
                prompt=report_prompt(st.indication, section, vocab),
                target_ids=[],
            ))
    texts = _decode_batched(params, config, vocab, examples, run.max_new_report, run.decode_batch)
    reports: dict[str, PredictedReport] = {}
    for i, st in enumerate(corpus.studies):
        reports[st.study_id] = PredictedReport(
            findings=texts[2 * i], impression=texts[2 * i + 1]
        )
    return reports


def train_ag(
    corpus: Corpus,
    config: ModelConfig,
    run: TrainRunConfig,
    vocab: Vocabulary,
    rg_params: dict[str, Tensor],
    rg_digest: str,
    reports: dict[str, PredictedReport] | None,
    ablation: AblationSpec = AblationSpec(),
) -> TrainResult:
    """Answer-generator fine-tuning, initialized from report-generator weights.

    Grounding text comes from the cached per-study reports (or gold text for
    the upper-bound variant); epoch selection is validation BLEU-4 over all
    answers, closed questions included.
    """
    digest = config_digest(config, vocab)
    if rg_digest != digest:
        raise ContractError(
            f"checkpoint digest mismatch: {rg_digest[:12]} != {digest[:12]}"
        )
    by_qa = split_qa(corpus)
    if not by_qa[Split.TRAIN] or not by_qa[Split.VALIDATION]:
        raise ContractError("train_ag requires non-empty train and validation splits")
    train_ex = _ag_examples(by_qa[Split.TRAIN], corpus, reports, ablation, vocab, config)
    val_ex = _ag_examples(by_qa[Split.VALIDATION], corpus, reports, ablation, vocab, config)
    val_refs = [rec.answer for rec in by_qa[Split.VALIDATION]]

    def validate(params: dict[str, Tensor]) -> float:
        hyps = _decode_batched(params, config, vocab, val_ex, run.max_new_answer, run.decode_batch)
        return bleu(hyps, val_refs)[3]

    params = clone_params(rg_params)
    return _run_training(train_ex, params, config, run, vocab, validate, digest)


# ---------------------------------------------------------------------------
# Inference and evaluation


def answer_question(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    corpus: Corpus,
    rec: QARecord,
    reports: dict[str, PredictedReport] | None,
    ablation: AblationSpec = AblationSpec(),
    max_new: int = 40,
) -> str:
    return predict_answers(
        params, config, vocab, [rec], corpus, reports, ablation,
        TrainRunConfig(max_new_answer=max_new),
    )[0]


def predict_answers(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[QARecord],
    corpus: Corpus,
    reports: dict[str, PredictedReport] | None,
    ablation: AblationSpec = AblationSpec(),
    run: TrainRunConfig | None = None,
    route_probe=None,
) -> list[str]:
    run = run or TrainRunConfig()
    examples = _ag_examples(records, corpus, reports, ablation, vocab, config, route_probe)
    return _decode_batched(params, config, vocab, examples, run.max_new_answer, run.decode_batch)


def overall_exact_match(predictions: list[str], records: list[QARecord]) -> float:
    """Normalized-equality rate over all records, difference included.

    The reporting metric partitions by question type; this flat rate is the
    overfit-training criterion.
    """
    if len(predictions) != len(records):
        raise ContractError("overall_exact_match: length mismatch")
    hits = sum(
        normalize_answer(p) == normalize_answer(r.answer)
        for p, r in zip(predictions, records)
    )
    return hits / len(records)


def evaluate_split(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    corpus: Corpus,
    split: Split,
    reports: dict[str, PredictedReport] | None,
    ablation: AblationSpec = AblationSpec(),
    run: TrainRunConfig | None = None,
) -> tuple[MetricReport, list[str], list[QARecord]]:
    records = split_qa(corpus)[split]
    preds = predict_answers(params, config, vocab, records, corpus, reports, ablation, run)
    return evaluate(preds, records), preds, records


# ---------------------------------------------------------------------------
# Ablation harness


@dataclass
class AblationRow:
    spec: AblationSpec
    label: str
    upper_bound: bool
    report: MetricReport


@dataclass
class AblationResult:
    rows: list[AblationRow]
    rg: TrainResult
    epoch_logs: dict[str, list[dict]] = field(default_factory=dict)


def run_ablation(
    corpus: Corpus,
    config: ModelConfig,
    run: TrainRunConfig,
    variants: tuple[AblationSpec, ...] = ABLATION_GRID,
) -> AblationResult:
    """Train the report stage once, cache its reports, then train and score
    one answer stage per variant on the test split."""
    rg_result, vocab = train_rg(corpus, config, run)
    reports = predict_reports(rg_result.params, config, vocab, corpus, run)
    rows: list[AblationRow] = []
    logs: dict[str, list[dict]] = {"rg": rg_result.epoch_log}
    for spec in variants:
        ag = train_ag(
            corpus, config, run, vocab,
            rg_result.params, rg_result.digest,
            reports,
            ablation=spec,
        )
        metric, _, _ = evaluate_split(
            ag.params, config, vocab, corpus, Split.TEST, reports, spec, run
        )
        rows.append(AblationRow(
            spec=spec, label=spec.label, upper_bound=spec.upper_bound, report=metric,
        ))
        logs[spec.label] = ag.epoch_log
    return AblationResult(rows=rows, rg=rg_result, epoch_logs=logs)


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Aligned text table in the published ablation column order."""
    header = ["Visual", "Text", "BLEU-1", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "Acc"]
    body = []
    for row in rows:
        rep = row.report
        b = rep.bleu or [None] * 4

        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        visual, text = row.label.split(", ", 1)
        if row.upper_bound:
            text += " [upper bound]"
        body.append([
            visual, text, fmt(b[0]), fmt(b[3]), fmt(rep.meteor),
            fmt(rep.rouge_l), fmt(rep.cider), fmt(rep.acc_all),
        ])
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, *body]:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoint helpers


def save_train_result(path, result: TrainResult) -> None:
    save_checkpoint(path, result.params, result.digest)


def load_train_params(path) -> tuple[dict[str, Tensor], str]:
    return load_checkpoint(path)
