"""Line-oriented corpus files plus the binary token sidecar.

Directory layout:
    studies.jsonl   one study record per line (text fields only)
    qa.jsonl        one question-answer record per line
    splits.jsonl    one split assignment per line
    scenes.jsonl    latent scene state (debugging / oracle replay)
    tokens.bin      "ATOK" header + study_id-ordered (N, d) float32 LE blocks
    tokens.idx      study_id <TAB> byte-offset lines
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError
from .records import (
    AnatomicalTokenSet,
    QARecord,
    QuestionType,
    SceneSpec,
    Split,
    SplitAssignment,
    StudyRecord,
)
from .textproc import AnswerStyle
from .synth import SyntheticCorpus

ATOK_MAGIC = b"ATOK"
ATOK_VERSION = 1


@dataclass
class Corpus:
    studies: list[StudyRecord]
    qa: list[QARecord]
    splits: list[SplitAssignment]
    scenes: dict[str, SceneSpec] | None = None

    def study_by_id(self) -> dict[str, StudyRecord]:
        return {s.study_id: s for s in self.studies}


# ---------------------------------------------------------------------------
# Writing


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_corpus(corpus: SyntheticCorpus | Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "studies.jsonl", "w", encoding="utf-8") as fh:
        for s in corpus.studies:
            fh.write(_dump_line({
                "study_id": s.study_id,
                "patient_id": s.patient_id,
                "prior_study_id": s.prior_study_id,
                "indication": s.indication,
                "findings": s.findings,
                "impression": s.impression,
            }))

    with open(out / "qa.jsonl", "w", encoding="utf-8") as fh:
        for q in corpus.qa:
            fh.write(_dump_line({
                "study_id": q.study_id,
                "patient_id": q.patient_id,
                "prior_study_id": q.prior_study_id,
                "question_type": q.question_type.value,
                "answer_style": q.answer_style.value,
                "question": q.question,
                "answer": q.answer,
                "choices": q.choices,
            }))

    with open(out / "splits.jsonl", "w", encoding="utf-8") as fh:
        for a in corpus.splits:
            fh.write(_dump_line({"split": a.split.value, "study_id": a.study_id}))

    scenes = getattr(corpus, "scenes", None)
    if scenes:
        with open(out / "scenes.jsonl", "w", encoding="utf-8") as fh:
            for study_id in sorted(scenes):
                sc = scenes[study_id]
                fh.write(_dump_line({
                    "study_id": sc.study_id,
                    "seed": sc.seed,
                    "current": {str(r): sorted(sc.current[r]) for r in sorted(sc.current)},
                    "prior": None if sc.prior is None else
                             {str(r): sorted(sc.prior[r]) for r in sorted(sc.prior)},
                }))

    write_token_sidecar(
        out,
        {s.study_id: s.tokens for s in corpus.studies if s.tokens is not None},
    )


def write_token_sidecar(out_dir, tokens: dict[str, AnatomicalTokenSet]) -> None:
    out = Path(out_dir)
    ids = sorted(tokens)
    if ids:
        n_regions, d = tokens[ids[0]].vectors.shape
    else:
        n_regions, d = 0, 0
    offsets: dict[str, int] = {}
    with open(out / "tokens.bin", "wb") as fh:
        fh.write(ATOK_MAGIC)
        fh.write(struct.pack("<IIII", ATOK_VERSION, len(ids), n_regions, d))
        for study_id in ids:
            arr = tokens[study_id].vectors
            if arr.shape != (n_regions, d):
                raise IntegrityError(
                    f"token block for {study_id} has shape {arr.shape}, expected {(n_regions, d)}"
                )
            offsets[study_id] = fh.tell()
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(out / "tokens.idx", "w", encoding="utf-8") as fh:
        for study_id in ids:
            fh.write(f"{study_id}\t{offsets[study_id]}\n")


# ---------------------------------------------------------------------------
# Reading


def _read_jsonl(path: Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: record is not an object")
            rows.append((lineno, obj))
    return rows


def _require(obj: dict, key: str, path: Path, lineno: int):
    if key not in obj:
        raise ParseError(f"{path}:{lineno}: missing field {key!r}")
    return obj[key]


def read_token_sidecar(dir_path) -> dict[str, AnatomicalTokenSet]:
    path = Path(dir_path) / "tokens.bin"
    idx_path = Path(dir_path) / "tokens.idx"
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ATOK_MAGIC:
        raise ParseError(f"{path}: bad magic (not a token sidecar)")
    version, n_studies, n_regions, d = struct.unpack_from("<IIII", blob, 4)
    if version != ATOK_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    block = n_regions * d * 4
    tokens: dict[str, AnatomicalTokenSet] = {}
    with open(idx_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                study_id, offset_text = line.split("\t")
                offset = int(offset_text)
            except ValueError:
                raise ParseError(f"{idx_path}:{lineno}: malformed index line")
            if offset + block > len(blob):
                raise ParseError(f"{idx_path}:{lineno}: offset {offset} beyond file end")
            arr = np.frombuffer(blob, dtype="<f4", count=n_regions * d, offset=offset)
            tokens[study_id] = AnatomicalTokenSet(arr.reshape(n_regions, d).copy())
    if len(tokens) != n_studies:
        raise ParseError(
            f"{idx_path}: {len(tokens)} index entries but header says {n_studies}"
        )
    return tokens


def load_scenes(dir_path) -> dict[str, SceneSpec]:
    path = Path(dir_path) / "scenes.jsonl"
    scenes: dict[str, SceneSpec] = {}
    for lineno, obj in _read_jsonl(path):
        study_id = _require(obj, "study_id", path, lineno)
        current = {
            int(r): frozenset(labels)
            for r, labels in _require(obj, "current", path, lineno).items()
        }
        prior_obj = obj.get("prior")
        prior = (
            None
            if prior_obj is None
            else {int(r): frozenset(labels) for r, labels in prior_obj.items()}
        )
        scenes[study_id] = SceneSpec(
            study_id=study_id,
            seed=int(_require(obj, "seed", path, lineno)),
            current=current,
            prior=prior,
        )
    return scenes


def load_corpus(dir_path) -> Corpus:
    """Parse all record files, attach token sets, and enforce referential
    integrity (every study/prior/qa reference resolves; record invariants hold)."""
    root = Path(dir_path)
    studies_path = root / "studies.jsonl"
    qa_path = root / "qa.jsonl"
    splits_path = root / "splits.jsonl"

    studies: list[StudyRecord] = []
    for lineno, obj in _read_jsonl(studies_path):
        studies.append(StudyRecord(
            study_id=_require(obj, "study_id", studies_path, lineno),
            patient_id=_require(obj, "patient_id", studies_path, lineno),
            indication=_require(obj, "indication", studies_path, lineno),
            findings=_require(obj, "findings", studies_path, lineno),
            impression=_require(obj, "impression", studies_path, lineno),
            prior_study_id=obj.get("prior_study_id"),
        ))

    qa: list[QARecord] = []
    for lineno, obj in _read_jsonl(qa_path):
        try:
            qtype = QuestionType(_require(obj, "question_type", qa_path, lineno))
            style = AnswerStyle(_require(obj, "answer_style", qa_path, lineno))
        except ValueError as exc:
            raise ParseError(f"{qa_path}:{lineno}: {exc}") from exc
        qa.append(QARecord(
            study_id=_require(obj, "study_id", qa_path, lineno),
            patient_id=_require(obj, "patient_id", qa_path, lineno),
            prior_study_id=obj.get("prior_study_id"),
            question_type=qtype,
            answer_style=style,
            question=_require(obj, "question", qa_path, lineno),
            answer=_require(obj, "answer", qa_path, lineno),
            choices=obj.get("choices"),
        ))

    splits: list[SplitAssignment] = []
    for lineno, obj in _read_jsonl(splits_path):
        try:
            split = Split(_require(obj, "split", splits_path, lineno))
        except ValueError as exc:
            raise ParseError(f"{splits_path}:{lineno}: {exc}") from exc
        splits.append(SplitAssignment(
            split=split,
            study_id=_require(obj, "study_id", splits_path, lineno),
        ))

    by_id = {s.study_id: s for s in studies}
    if len(by_id) != len(studies):
        seen: set[str] = set()
        for s in studies:
            if s.study_id in seen:
                raise IntegrityError(f"duplicate study id {s.study_id}")
            seen.add(s.study_id)
    for s in studies:
        if s.prior_study_id is not None and s.prior_study_id not in by_id:
            raise IntegrityError(
                f"study {s.study_id} references missing prior {s.prior_study_id}"
            )
    for record in qa:
        if record.study_id not in by_id:
            raise IntegrityError(f"qa record references missing study {record.study_id}")
        if record.prior_study_id is not None and record.prior_study_id not in by_id:
            raise IntegrityError(
                f"qa for study {record.study_id} references missing prior "
                f"{record.prior_study_id}"
            )
        record.validate()
    for a in splits:
        if a.study_id not in by_id:
            raise IntegrityError(f"split assignment references missing study {a.study_id}")

    if (root / "tokens.bin").exists():
        tokens = read_token_sidecar(root)
        for s in studies:
            if s.study_id not in tokens:
                raise IntegrityError(f"no token block for study {s.study_id}")
            s.tokens = tokens[s.study_id]

    scenes = load_scenes(root) if (root / "scenes.jsonl").exists() else None
    return Corpus(studies=studies, qa=qa, splits=splits, scenes=scenes)
