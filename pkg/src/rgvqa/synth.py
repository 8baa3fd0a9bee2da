"""Deterministic synthetic corpus: scenes, tokens, reports, questions.

Every study is rendered from a SceneSpec, so report text, token vectors and
gold answers are mutually consistent by construction, and an oracle that
reads only the scene reproduces every gold answer. All randomness flows
from hashed (seed, key) pairs, never from process state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .records import (
    AnatomicalTokenSet,
    QARecord,
    QuestionType,
    SceneSpec,
    Split,
    SplitAssignment,
    StudyRecord,
    classify_answer_style,
)

REGION_NAMES = (
    "right lung", "left lung", "right upper lobe", "right lower lobe",
    "left upper lobe", "left lower lobe", "cardiac silhouette", "mediastinum",
    "right hilum", "left hilum", "right costophrenic angle", "left costophrenic angle",
    "right hemidiaphragm", "left hemidiaphragm", "trachea", "carina",
    "aortic arch", "right clavicle", "left clavicle", "right middle lobe",
    "lingula", "right apical zone", "left apical zone", "right pleura",
    "left pleura", "retrocardiac region", "right paratracheal stripe",
    "left paratracheal stripe", "spine", "right ribs", "left ribs",
    "sternum", "upper abdomen", "right neck base", "left neck base", "azygos region",
)

DEFAULT_FINDINGS = (
    "effusion", "pneumonia", "atelectasis", "consolidation",
    "edema", "opacity", "pneumothorax",
)
DEFAULT_LEVELS = ("mild", "moderate", "severe")
DEFAULT_TYPES = ("acute", "chronic", "recurrent")
VIEWS = ("ap", "pa")
COMPLAINTS = ("cough", "fever", "chest pain", "shortness of breath", "follow up")

CHANGE_VERBS = {"appeared": 0, "resolved": 1, "worsened": 2, "improved": 3}
NO_CHANGE_ANSWER = "no change"
NO_ABNORMALITY_ANSWER = "nothing"

QUESTIONS_PER_STUDY = 8


@dataclass(frozen=True)
class GenConfig:
    n_patients: int = 20
    studies_per_patient: int = 2
    N: int = 8
    d: int = 16
    findings: tuple[str, ...] = DEFAULT_FINDINGS
    levels: tuple[str, ...] = DEFAULT_LEVELS
    types: tuple[str, ...] = DEFAULT_TYPES
    regions: tuple[str, ...] = REGION_NAMES
    detect_prob: float = 0.9

    def __post_init__(self):
        if self.n_patients < 3:
            raise ConfigError("n_patients must be >= 3 so every split is non-empty")
        if self.N < 1 or self.d < 1:
            raise ConfigError("N and d must be >= 1")
        if not self.findings:
            raise ConfigError("finding vocabulary must not be empty")
        if self.N > len(self.regions):
            raise ConfigError(f"N={self.N} exceeds the {len(self.regions)} named regions")
        n_labels = len(self.findings) * len(self.levels) * len(self.types)
        if n_labels > 71:
            raise ConfigError(
                f"label vocabulary has {n_labels} entries; at most 71 are allowed"
            )

    def region_name(self, index: int) -> str:
        return self.regions[index]


@dataclass
class SyntheticCorpus:
    studies: list[StudyRecord]
    qa: list[QARecord]
    splits: list[SplitAssignment]
    scenes: dict[str, SceneSpec]
    config: GenConfig
    seed: int


def _hash_seed(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(_hash_seed(*parts))


# ---------------------------------------------------------------------------
# Labels


def make_label(level: str, type_: str, finding: str) -> str:
    return f"{level} {type_} {finding}"


def parse_label(label: str) -> tuple[str, str, str]:
    level, type_, finding = label.split(" ", 2)
    return level, type_, finding


def label_finding(label: str) -> str:
    return parse_label(label)[2]


# ---------------------------------------------------------------------------
# Token synthesis


def synth_tokens(
    scene: SceneSpec, scan: str, n_regions: int, d: int, seed: int
) -> AnatomicalTokenSet:
    """Embed each region's finding-label set into R^d.

    The vector is a pure function of (label set, seed): a shared "detected"
    base plus one hashed unit vector per label, scaled by 1/sqrt(1+k).
    Undetected regions (absent from the scene map) are zero rows.
    """
    if scan not in ("current", "prior"):
        raise ContractError(f"synth_tokens: scan must be current|prior, got {scan!r}")
    state = scene.current if scan == "current" else scene.prior
    vectors = np.zeros((n_regions, d), dtype=np.float32)
    if state is None:
        return AnatomicalTokenSet(vectors)
    for region, labels in state.items():
        if region < 0 or region >= n_regions:
            raise ContractError(f"synth_tokens: region index {region} outside [0, {n_regions})")
        vectors[region] = _embed_label_set(labels, d, seed)
    return AnatomicalTokenSet(vectors)


def _embed_label_set(labels: frozenset[str], d: int, seed: int) -> np.ndarray:
    vec = _rng(seed, "detected-base").normal(size=d)
    for label in sorted(labels):
        vec = vec + _rng(seed, "label", label).normal(size=d)
    vec = vec / np.sqrt(1.0 + len(labels))
    return vec.astype(np.float32)


# ---------------------------------------------------------------------------
# Report grammar


def scene_view(scene: SceneSpec) -> str:
    return VIEWS[scene.seed % len(VIEWS)]


def _sorted_regions(state: dict[int, frozenset[str]]) -> list[int]:
    return sorted(state)


def render_findings(scene: SceneSpec, config: GenConfig) -> str:
    # pre-tokenized surface form (standalone "."), so decoded token streams
    # can match the gold text byte for byte
    sentences = [f"{scene_view(scene)} view of the chest ."]
    any_label = False
    for region in _sorted_regions(scene.current):
        for label in sorted(scene.current[region]):
            sentences.append(f"there is {label} in the {config.region_name(region)} .")
            any_label = True
    if not any_label:
        sentences.append("the lungs are clear .")
    return " ".join(sentences)


def render_impression(scene: SceneSpec) -> str:
    labels = sorted({label for labels in scene.current.values() for label in labels})
    if not labels:
        return "no acute findings ."
    return " ".join(f"{label} ." for label in labels)


def _findings_in(state: dict[int, frozenset[str]]) -> dict[str, str]:
    """Base finding -> its full label (unique per scan by construction)."""
    out: dict[str, str] = {}
    for labels in state.values():
        for label in labels:
            out[label_finding(label)] = label
    return out


def difference_answer(
    prior_labels: frozenset[str], current_labels: frozenset[str], levels: tuple[str, ...]
) -> str:
    """Closed change grammar for one region.

    "<finding> has <appeared|resolved|worsened|improved>" clauses sorted by
    finding and joined by "; "; no clause -> the fixed no-change phrase.
    """
    rank = {level: i for i, level in enumerate(levels)}
    prior = {label_finding(l): l for l in prior_labels}
    current = {label_finding(l): l for l in current_labels}
    clauses = []
    for f in sorted(set(prior) | set(current)):
        if f in current and f not in prior:
            clauses.append(f"{f} has appeared")
        elif f in prior and f not in current:
            clauses.append(f"{f} has resolved")
        else:
            before = rank[parse_label(prior[f])[0]]
            after = rank[parse_label(current[f])[0]]
            if after > before:
                clauses.append(f"{f} has worsened")
            elif after < before:
                clauses.append(f"{f} has improved")
    if not clauses:
        return NO_CHANGE_ANSWER
    return "; ".join(clauses)


# ---------------------------------------------------------------------------
# Question templates (one canonical form per type)


def q_abnormality(region_name: str) -> str:
    return f"what abnormalities are seen in the {region_name}?"


def q_location(finding: str) -> str:
    return f"where in the image is the {finding} located?"


def q_type(finding: str) -> str:
    return f"what type is the {finding}?"


def q_level(finding: str) -> str:
    return f"what level is the {finding}?"


def q_view() -> str:
    return "which view is this image taken?"


def q_presence(finding: str) -> str:
    return f"is there any evidence of {finding}?"


def q_difference(region_name: str) -> str:
    return f"what has changed in the {region_name} area?"


# ---------------------------------------------------------------------------
# Scene evolution


def _initial_state(
    rng: np.random.Generator, detected: list[int], config: GenConfig
) -> dict[int, set[str]]:
    state: dict[int, set[str]] = {r: set() for r in detected}
    for region in detected:
        roll = rng.random()
        n = 0 if roll < 0.45 else (1 if roll < 0.85 else 2)
        if n:
            picks = rng.choice(len(config.findings), size=n, replace=False)
            state[region] = {config.findings[i] for i in picks}
    return state


def _evolve_state(
    rng: np.random.Generator, prev: dict[int, set[str]], config: GenConfig
) -> dict[int, set[str]]:
    state: dict[int, set[str]] = {}
    for region in sorted(prev):
        kept = {f for f in sorted(prev[region]) if rng.random() > 0.3}
        if rng.random() < 0.3:
            candidates = [f for f in config.findings if f not in kept]
            if candidates:
                kept.add(candidates[int(rng.integers(len(candidates)))])
        state[region] = kept
    return state


def _labelled(
    state: dict[int, set[str]],
    level_of: dict[str, str],
    type_of: dict[str, str],
) -> dict[int, frozenset[str]]:
    return {
        region: frozenset(
            make_label(level_of[f], type_of[f], f) for f in state[region]
        )
        for region in state
    }


def _assign_levels(
    rng: np.random.Generator,
    state: dict[int, set[str]],
    previous: dict[str, str] | None,
    levels: tuple[str, ...],
) -> dict[str, str]:
    """One level per base finding per scan; sticky across scans with p=0.6."""
    present = sorted({f for fs in state.values() for f in fs})
    out: dict[str, str] = {}
    for f in present:
        if previous and f in previous and rng.random() < 0.6:
            out[f] = previous[f]
        else:
            out[f] = levels[int(rng.integers(len(levels)))]
    return out


# ---------------------------------------------------------------------------
# Question emission


def _answer_abnormality(scene: SceneSpec, region: int) -> str:
    findings = sorted(label_finding(l) for l in scene.current.get(region, frozenset()))
    return ", ".join(findings) if findings else NO_ABNORMALITY_ANSWER


def _answer_location(scene: SceneSpec, finding: str, config: GenConfig) -> str:
    regions = [
        config.region_name(r)
        for r in _sorted_regions(scene.current)
        if finding in {label_finding(l) for l in scene.current[r]}
    ]
    return ", ".join(regions)


def _emit_questions(
    scene: SceneSpec,
    study: StudyRecord,
    config: GenConfig,
    rng: np.random.Generator,
) -> list[QARecord]:
    detected = _sorted_regions(scene.current)
    label_of = _findings_in(scene.current)
    present = sorted(label_of)
    absent = [f for f in config.findings if f not in label_of]

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    def record(qtype: QuestionType, question: str, answer: str) -> QARecord:
        style = classify_answer_style(answer)
        choices = list(CLOSED_CHOICES) if style.value == "closed" else None
        return QARecord(
            study_id=study.study_id,
            patient_id=study.patient_id,
            prior_study_id=study.prior_study_id,
            question_type=qtype,
            answer_style=style,
            question=question,
            answer=answer,
            choices=choices,
        )

    def presence_question() -> QARecord:
        if absent and (not present or rng.random() < 0.5):
            f = pick(absent)
            return record(QuestionType.PRESENCE, q_presence(f), "no")
        f = pick(present)
        return record(QuestionType.PRESENCE, q_presence(f), "yes")

    out: list[QARecord] = []

    region = pick(detected)
    out.append(record(QuestionType.ABNORMALITY, q_abnormality(config.region_name(region)),
                      _answer_abnormality(scene, region)))

    if present:
        f = pick(present)
        out.append(record(QuestionType.LOCATION, q_location(f),
                          _answer_location(scene, f, config)))
        f = pick(present)
        out.append(record(QuestionType.TYPE, q_type(f), parse_label(label_of[f])[1]))
        f = pick(present)
        out.append(record(QuestionType.LEVEL, q_level(f), parse_label(label_of[f])[0]))
    else:
        for _ in range(3):
            out.append(presence_question())

    out.append(record(QuestionType.VIEW, q_view(), scene_view(scene)))

    if present:
        out.append(record(QuestionType.PRESENCE, q_presence(pick(present)), "yes"))
    else:
        out.append(presence_question())
    if absent:
        out.append(record(QuestionType.PRESENCE, q_presence(pick(absent)), "no"))
    else:
        out.append(presence_question())

    if scene.prior is not None:
        region = pick(detected)
        answer = difference_answer(
            scene.prior.get(region, frozenset()),
            scene.current.get(region, frozenset()),
            config.levels,
        )
        out.append(record(QuestionType.DIFFERENCE,
                          q_difference(config.region_name(region)), answer))
    else:
        region = pick(detected)
        out.append(record(QuestionType.ABNORMALITY,
                          q_abnormality(config.region_name(region)),
                          _answer_abnormality(scene, region)))

    assert len(out) == QUESTIONS_PER_STUDY
    return out


CLOSED_CHOICES = ("yes", "no")


# ---------------------------------------------------------------------------
# Splits


def assign_splits(patient_ids: list[str]) -> dict[str, Split]:
    """Hash-ranked quota split: patients ordered by id hash, then dealt
    train/validation/test at 8:1:1 with at least one patient per split."""
    n = len(patient_ids)
    if n < 3:
        raise ConfigError("need at least 3 patients for non-empty splits")
    ranked = sorted(patient_ids, key=lambda pid: (_hash_seed("split", pid), pid))
    n_val = max(1, round(n / 10))
    n_test = max(1, round(n / 10))
    n_train = n - n_val - n_test
    out: dict[str, Split] = {}
    for i, pid in enumerate(ranked):
        if i < n_train:
            out[pid] = Split.TRAIN
        elif i < n_train + n_val:
            out[pid] = Split.VALIDATION
        else:
            out[pid] = Split.TEST
    return out


# ---------------------------------------------------------------------------
# Corpus generation


def generate_synthetic_corpus(config: GenConfig, seed: int) -> SyntheticCorpus:
    """Pure function of (config, seed); see SceneSpec for the latent model."""
    studies: list[StudyRecord] = []
    qa: list[QARecord] = []
    scenes: dict[str, SceneSpec] = {}

    for p in range(config.n_patients):
        patient_id = f"p{p:04d}"
        prng = _rng(seed, "patient", p)
        detected = [r for r in range(config.N) if prng.random() < config.detect_prob]
        while len(detected) < 2:
            extra = int(prng.integers(config.N))
            if extra not in detected:
                detected.append(extra)
        detected.sort()
        type_of = {
            f: config.types[int(prng.integers(len(config.types)))]
            for f in config.findings
        }

        base_state: dict[int, set[str]] | None = None
        level_of: dict[str, str] | None = None
        prior_labels: dict[int, frozenset[str]] | None = None
        prior_study_id: str | None = None
        for s in range(config.studies_per_patient):
            study_id = f"{patient_id}s{s}"
            srng = _rng(seed, "study", p, s)
            if base_state is None:
                base_state = _initial_state(srng, detected, config)
            else:
                base_state = _evolve_state(srng, base_state, config)
            level_of = _assign_levels(srng, base_state, level_of, config.levels)
            current_labels = _labelled(base_state, level_of, type_of)
            scene = SceneSpec(
                study_id=study_id,
                seed=_hash_seed(seed, "scene", p, s),
                current=current_labels,
                prior=prior_labels,
            )
            study = StudyRecord(
                study_id=study_id,
                patient_id=patient_id,
                indication=COMPLAINTS[int(srng.integers(len(COMPLAINTS)))],
                findings=render_findings(scene, config),
                impression=render_impression(scene),
                tokens=synth_tokens(scene, "current", config.N, config.d, seed),
                prior_study_id=prior_study_id,
            )
            studies.append(study)
            scenes[study_id] = scene
            qa.extend(_emit_questions(scene, study, config, _rng(seed, "qa", p, s)))
            prior_labels = current_labels
            prior_study_id = study_id

    split_of = assign_splits([f"p{p:04d}" for p in range(config.n_patients)])
    splits = [
        SplitAssignment(split=split_of[st.patient_id], study_id=st.study_id)
        for st in studies
    ]
    return SyntheticCorpus(
        studies=studies, qa=qa, splits=splits, scenes=scenes, config=config, seed=seed
    )


# ---------------------------------------------------------------------------
# Scene oracle (answers re-derived from the latent state, not the generator)


OVERFIT_QA_SLOTS = (0, 1, 4, 7)  # abnormality, location-ish, view, difference-ish


def overfit_fixture(seed: int, n_regions: int = 8, d: int = 16) -> SyntheticCorpus:
    """Memorization fixture: five training studies (three patients, two with
    a follow-up scan) carrying four questions each, plus byte-identical twin
    studies under fresh patient ids serving as the validation/test splits.

    Including follow-up scans keeps difference questions (multi-token
    answers) in the mix, so validation BLEU-4 carries signal and best-epoch
    selection converges to the memorized checkpoint the overfit harness
    asserts on.
    """
    gen = GenConfig(n_patients=3, studies_per_patient=2, N=n_regions, d=d)
    base = generate_synthetic_corpus(gen, seed=seed)
    keep_ids = [st.study_id for st in base.studies if st.study_id != "p0002s1"]
    kept = [st for st in base.studies if st.study_id in keep_ids]
    per_study: dict[str, list[QARecord]] = {}
    for q in base.qa:
        per_study.setdefault(q.study_id, []).append(q)

    def pick_questions(study_id: str) -> list[QARecord]:
        qs = per_study[study_id]
        return [qs[i] for i in OVERFIT_QA_SLOTS]

    studies: list[StudyRecord] = []
    qa: list[QARecord] = []
    splits: list[SplitAssignment] = []
    scenes: dict[str, SceneSpec] = {}

    def add_clone(src: StudyRecord, tag: str, split: Split):
        new_sid = f"{tag}-{src.study_id}"
        new_pid = f"{tag}-{src.patient_id}"
        prior = f"{tag}-{src.prior_study_id}" if src.prior_study_id else None
        studies.append(StudyRecord(
            study_id=new_sid, patient_id=new_pid,
            indication=src.indication, findings=src.findings,
            impression=src.impression, tokens=src.tokens,
            prior_study_id=prior,
        ))
        scene = base.scenes[src.study_id]
        scenes[new_sid] = SceneSpec(
            study_id=new_sid, seed=scene.seed,
            current=scene.current, prior=scene.prior,
        )
        splits.append(SplitAssignment(split=split, study_id=new_sid))
        for q in pick_questions(src.study_id):
            qa.append(QARecord(
                study_id=new_sid, patient_id=new_pid,
                prior_study_id=f"{tag}-{q.prior_study_id}" if q.prior_study_id else None,
                question_type=q.question_type, answer_style=q.answer_style,
                question=q.question, answer=q.answer, choices=q.choices,
            ))

    for st in kept:
        studies.append(st)
        scenes[st.study_id] = base.scenes[st.study_id]
        splits.append(SplitAssignment(split=Split.TRAIN, study_id=st.study_id))
        qa.extend(pick_questions(st.study_id))
    for st in kept:
        add_clone(st, "val", Split.VALIDATION)
    add_clone(kept[0], "test", Split.TEST)

    return SyntheticCorpus(
        studies=studies, qa=qa, splits=splits, scenes=scenes, config=gen, seed=seed
    )


def oracle_answer(qa: QARecord, scene: SceneSpec, config: GenConfig) -> str:
    """Answer a generated question by parsing its text against the template
    grammar and reading the scene. Used to cross-check gold answers."""
    q = qa.question
    if qa.question_type == QuestionType.ABNORMALITY:
        name = _extract(q, "what abnormalities are seen in the ", "?")
        return _answer_abnormality(scene, config.regions.index(name))
    if qa.question_type == QuestionType.LOCATION:
        finding = _extract(q, "where in the image is the ", " located?")
        return _answer_location(scene, finding, config)
    if qa.question_type == QuestionType.TYPE:
        finding = _extract(q, "what type is the ", "?")
        return parse_label(_findings_in(scene.current)[finding])[1]
    if qa.question_type == QuestionType.LEVEL:
        finding = _extract(q, "what level is the ", "?")
        return parse_label(_findings_in(scene.current)[finding])[0]
    if qa.question_type == QuestionType.VIEW:
        return scene_view(scene)
    if qa.question_type == QuestionType.PRESENCE:
        finding = _extract(q, "is there any evidence of ", "?")
        return "yes" if finding in _findings_in(scene.current) else "no"
    if qa.question_type == QuestionType.DIFFERENCE:
        name = _extract(q, "what has changed in the ", " area?")
        region = config.regions.index(name)
        if scene.prior is None:
            raise ContractError(f"difference question on priorless study {qa.study_id}")
        return difference_answer(
            scene.prior.get(region, frozenset()),
            scene.current.get(region, frozenset()),
            config.levels,
        )
    raise ContractError(f"unknown question type {qa.question_type}")


def _extract(question: str, prefix: str, suffix: str) -> str:
    if not question.startswith(prefix) or not question.endswith(suffix):
        raise ContractError(f"question does not match template: {question!r}")
    return question[len(prefix): len(question) - len(suffix)]
