"""Corpus record types and the question taxonomy."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import IntegrityError
from .textproc import AnswerStyle


class QuestionType(str, Enum):
    ABNORMALITY = "abnormality"
    LOCATION = "location"
    TYPE = "type"
    LEVEL = "level"
    VIEW = "view"
    PRESENCE = "presence"
    DIFFERENCE = "difference"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


CLOSED_ANSWERS = ("yes", "no")


def classify_answer_style(answer: str) -> AnswerStyle:
    """yes/no answers (case-insensitive, trimmed) are closed; everything else open."""
    return (
        AnswerStyle.CLOSED
        if answer.strip().lower() in CLOSED_ANSWERS
        else AnswerStyle.OPEN
    )


@dataclass
class AnatomicalTokenSet:
    """Fixed-length per-region feature vectors for one scan.

    An undetected region is exactly the zero vector.
    """

    vectors: np.ndarray  # (N, d) float32

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise IntegrityError(f"token set must be (N, d), got {self.vectors.shape}")

    @property
    def N(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def detected(self) -> np.ndarray:
        """Boolean per region: any nonzero component."""
        return np.any(self.vectors != 0.0, axis=1)

    @staticmethod
    def zeros(n: int, d: int) -> "AnatomicalTokenSet":
        return AnatomicalTokenSet(np.zeros((n, d), dtype=np.float32))


@dataclass
class QARecord:
    study_id: str
    patient_id: str
    question_type: QuestionType
    answer_style: AnswerStyle
    question: str
    answer: str
    prior_study_id: str | None = None
    choices: list[str] | None = None

    def validate(self) -> None:
        if self.question_type == QuestionType.DIFFERENCE and not self.prior_study_id:
            raise IntegrityError(
                f"difference question for study {self.study_id} lacks prior_study_id"
            )
        closed = classify_answer_style(self.answer) == AnswerStyle.CLOSED
        if closed != (self.answer_style == AnswerStyle.CLOSED):
            raise IntegrityError(
                f"answer_style {self.answer_style.value!r} inconsistent with "
                f"answer {self.answer!r} for study {self.study_id}"
            )
        if self.choices is not None and self.answer not in self.choices:
            raise IntegrityError(
                f"answer {self.answer!r} not among choices {self.choices} "
                f"for study {self.study_id}"
            )


@dataclass
class StudyRecord:
    study_id: str
    patient_id: str
    indication: str
    findings: str
    impression: str
    tokens: AnatomicalTokenSet | None = None
    prior_study_id: str | None = None


@dataclass
class SplitAssignment:
    split: Split
    study_id: str


@dataclass
class SceneSpec:
    """Latent state a synthetic study is rendered from.

    Maps region index -> set of composite finding labels ("level type
    finding") for the current scan and, when the study has one, the prior
    scan. A region absent from the map was not detected (zero token row);
    present with an empty set means detected and clear. The seed drives
    every derived attribute (token vectors, view).
    """

    study_id: str
    seed: int
    current: dict[int, frozenset[str]]
    prior: dict[int, frozenset[str]] | None = None


@dataclass
class SplitReport:
    qa_counts: dict[str, int]
    ratios: dict[str, float]
    patient_disjoint: bool
    violations: list[str] = field(default_factory=list)


def ratio_of(counts: dict[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    if total == 0:
        return {k: 0.0 for k in counts}
    return {k: v / total for k, v in counts.items()}


def validate_splits(
    assignments: list[SplitAssignment],
    studies: list[StudyRecord],
    qa: list[QARecord],
) -> SplitReport:
    """Patient-disjointness check plus per-split QA-pair ratios.

    Violations are reported, never raised.
    """
    split_of: dict[str, Split] = {}
    violations: list[str] = []
    for a in assignments:
        if a.study_id in split_of and split_of[a.study_id] != a.split:
            violations.append(f"study {a.study_id} assigned to multiple splits")
        split_of[a.study_id] = a.split

    patient_splits: dict[str, set[Split]] = {}
    for s in studies:
        sp = split_of.get(s.study_id)
        if sp is None:
            violations.append(f"study {s.study_id} has no split assignment")
            continue
        patient_splits.setdefault(s.patient_id, set()).add(sp)
    for pid in sorted(patient_splits):
        if len(patient_splits[pid]) > 1:
            names = sorted(sp.value for sp in patient_splits[pid])
            violations.append(f"patient {pid} spans splits {names}")
    patient_disjoint = all(len(v) == 1 for v in patient_splits.values())

    counts = {sp.value: 0 for sp in Split}
    for record in qa:
        sp = split_of.get(record.study_id)
        if sp is None:
            violations.append(f"qa for study {record.study_id} has no split assignment")
            continue
        counts[sp.value] += 1
    return SplitReport(
        qa_counts=counts,
        ratios=ratio_of(counts),
        patient_disjoint=patient_disjoint,
        violations=violations,
    )
