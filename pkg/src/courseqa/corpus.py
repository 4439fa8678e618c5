"""Data model and ingestion for course materials, student questions, and
expert ground-truth labels, plus a deterministic synthetic-corpus generator
for desk-scale experiments.

All three artifact files are JSONL, one record per line:

* ``corpus.jsonl``    -- ``{"id","kind","title","body","metadata":{...}}``;
  qa-kind documents carry ``{"question","answer"}`` as a JSON object in body.
* ``questions.jsonl`` -- ``{"id","text","category","week"}``
* ``labels.jsonl``    -- ``{"question_id","functions":[...],"ta_answer",
  "ta_scores":{...},"relevant_docs":[...]}``
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .judge import JudgeRangeError, Judgment


class CorpusError(Exception):
    """Raised for malformed or referentially inconsistent artifact files."""


class SourceKind(str, Enum):
    QA = "qa"
    TEXTBOOK = "textbook"
    ASSIGNMENT = "assignment"
    LOGISTICS = "logistics"


class Category(str, Enum):
    CONCEPTUAL = "conceptual"
    ASSIGNMENT = "assignment"
    LOGISTICS = "logistics"


class FunctionName(str, Enum):
    """The four source-specific retrieval tools exposed to the model."""

    QA_RETRIEVAL = "qa_retrieval"
    TEXTBOOK_RETRIEVAL = "textbook_retrieval"
    ASSIGNMENT_RETRIEVAL = "assignment_retrieval"
    LOGISTICS_RETRIEVAL = "logistics_retrieval"


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str

    def __post_init__(self) -> None:
        if not self.question or not self.answer:
            raise CorpusError("QA pair requires non-empty question and answer")

    def render(self) -> str:
        return f"Q: {self.question}\nA: {self.answer}"


@dataclass(frozen=True)
class Document:
    id: str
    kind: SourceKind
    title: str
    body: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if not self.body:
            raise CorpusError(f"document {self.id!r} has an empty body")
        if self.kind == SourceKind.QA:
            self.qa_pair()  # validate eagerly so bad qa bodies fail at construction

    def qa_pair(self) -> QAPair:
        """Parse a qa-kind body into its question/answer fields."""
        if self.kind != SourceKind.QA:
            raise CorpusError(f"document {self.id!r} has kind {self.kind.value}, not qa")
        try:
            obj = json.loads(self.body)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"document {self.id!r}: qa body is not a JSON object") from exc
        if not isinstance(obj, dict) or set(obj) != {"question", "answer"}:
            raise CorpusError(
                f"document {self.id!r}: qa body must hold exactly question and answer"
            )
        return QAPair(str(obj["question"]), str(obj["answer"]))

    def text(self) -> str:
        """Retrievable text: rendered Q/A for qa docs, raw body otherwise."""
        if self.kind == SourceKind.QA:
            return self.qa_pair().render()
        return self.body


class Corpus:
    """Immutable, id-indexed collection of documents."""

    def __init__(self, documents: Iterable[Document]) -> None:
        self._docs: tuple[Document, ...] = tuple(documents)
        self._by_id: dict[str, Document] = {}
        for doc in self._docs:
            if doc.id in self._by_id:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            self._by_id[doc.id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Corpus) and self._docs == other._docs

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id {doc_id!r}") from None

    def by_kind(self, kind: SourceKind) -> list[Document]:
        return [d for d in self._docs if d.kind == kind]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for doc in self._docs:
                f.write(json.dumps(_doc_record(doc), sort_keys=True) + "\n")


@dataclass(frozen=True)
class StudentQuestion:
    id: str
    text: str
    category: Category | None = None
    week: int | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("question id must be non-empty")
        if not self.text:
            raise CorpusError(f"question {self.id!r} has empty text")
        if self.week is not None and self.week < 1:
            raise CorpusError(f"question {self.id!r}: week must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    question_id: str
    functions: frozenset[FunctionName]
    ta_answer: str | None = None
    ta_scores: Judgment | None = None
    relevant_docs: frozenset[str] | None = None


# ---------------------------------------------------------------------------
# JSONL loading and saving
# ---------------------------------------------------------------------------


def _doc_record(doc: Document) -> dict:
    body: object = doc.body
    if doc.kind == SourceKind.QA:
        pair = doc.qa_pair()
        body = {"question": pair.question, "answer": pair.answer}
    return {
        "id": doc.id,
        "kind": doc.kind.value,
        "title": doc.title,
        "body": body,
        "metadata": doc.metadata,
    }


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a corpus file; ids are checked for uniqueness."""
    docs = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        try:
            kind = SourceKind(record["kind"])
        except KeyError:
            raise CorpusError(f"{path}:{lineno}: missing kind") from None
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: unknown kind {record['kind']!r}") from None
        body = record.get("body", "")
        if isinstance(body, dict):
            body = json.dumps(body, sort_keys=True)
        try:
            doc = Document(
                id=str(record.get("id", "")),
                kind=kind,
                title=str(record.get("title", "")),
                body=body,
                metadata={str(k): str(v) for k, v in record.get("metadata", {}).items()},
            )
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        if doc.id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
        seen.add(doc.id)
        docs.append(doc)
    return Corpus(docs)


def load_questions(path: str | Path) -> list[StudentQuestion]:
    questions = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        category = record.get("category")
        if category is not None:
            try:
                category = Category(category)
            except ValueError:
                raise CorpusError(
                    f"{path}:{lineno}: unknown category {category!r}"
                ) from None
        try:
            q = StudentQuestion(
                id=str(record.get("id", "")),
                text=str(record.get("text", "")),
                category=category,
                week=record.get("week"),
            )
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        if q.id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate question id {q.id!r}")
        seen.add(q.id)
        questions.append(q)
    return questions


def save_questions(questions: Sequence[StudentQuestion], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in questions:
            record = {
                "id": q.id,
                "text": q.text,
                "category": q.category.value if q.category else None,
                "week": q.week,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_labels(
    path: str | Path,
    questions: Sequence[StudentQuestion],
    corpus: Corpus | None = None,
) -> list[GroundTruth]:
    """Load expert labels, enforcing referential integrity against the
    question set and (when given) the corpus."""
    known_ids = {q.id for q in questions}
    labels = []
    for lineno, record in _iter_jsonl(path):
        qid = str(record.get("question_id", ""))
        if qid not in known_ids:
            raise CorpusError(f"{path}:{lineno}: label references unknown question {qid!r}")
        try:
            functions = frozenset(FunctionName(name) for name in record.get("functions", []))
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        ta_scores = None
        if record.get("ta_scores") is not None:
            try:
                ta_scores = Judgment(**record["ta_scores"])
            except (JudgeRangeError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: ta_scores for {qid!r}: {exc}") from None
        relevant = record.get("relevant_docs")
        if relevant is not None:
            relevant = frozenset(str(d) for d in relevant)
            if corpus is not None:
                missing = sorted(d for d in relevant if d not in corpus)
                if missing:
                    raise CorpusError(
                        f"{path}:{lineno}: relevant_docs reference unknown documents {missing}"
                    )
        labels.append(
            GroundTruth(
                question_id=qid,
                functions=functions,
                ta_answer=record.get("ta_answer"),
                ta_scores=ta_scores,
                relevant_docs=relevant,
            )
        )
    return labels


def save_labels(labels: Sequence[GroundTruth], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for label in labels:
            record = {
                "question_id": label.question_id,
                "functions": sorted(fn.value for fn in label.functions),
                "ta_answer": label.ta_answer,
                "ta_scores": {
                    "factuality": label.ta_scores.factuality,
                    "relevance": label.ta_scores.relevance,
                    "style": label.ta_scores.style,
                }
                if label.ta_scores
                else None,
                "relevant_docs": sorted(label.relevant_docs) if label.relevant_docs else None,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

#: Topic vocabulary reused across synthetic documents. Each entry is a topic
#: phrase followed by its keyword set; topics deliberately recur in several
#: documents so that purely lexical retrieval cannot identify the source.
SYNTHETIC_TOPICS: tuple[tuple[str, ...], ...] = (
    ("gradient descent", "learning rate", "step size", "convergence"),
    ("cross validation", "folds", "train test split", "overfitting"),
    ("pandas groupby", "aggregation", "dataframe", "pivot"),
    ("regular expressions", "pattern", "capture group", "matching"),
    ("confidence intervals", "bootstrap", "standard error", "coverage"),
    ("logistic regression", "sigmoid", "decision boundary", "log loss"),
)

_LOGISTICS_SUBJECTS = (
    ("late policy", "Assignments lose 10% per day late; slip days cover two days total."),
    ("exam schedule", "The midterm is in week 8 and the final is in week 17, both in the evening."),
    ("regrade requests", "Regrade requests open for 72 hours after scores are released."),
    ("office hours", "Office hours run daily; the queue closes 15 minutes before the end."),
    ("collaboration policy", "Discussing ideas is allowed; sharing code or answers is not."),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Counts for generated documents and questions, per source kind."""

    docs_per_kind: Mapping[SourceKind, int]
    questions_per_kind: Mapping[SourceKind, int]
    sections_per_doc: int = 4

    def __post_init__(self) -> None:
        for mapping in (self.docs_per_kind, self.questions_per_kind):
            for kind, count in mapping.items():
                if count < 0:
                    raise CorpusError(f"negative count for {kind.value}")
        if sum(self.docs_per_kind.values()) == 0:
            raise CorpusError("synthetic spec requests zero documents")
        if sum(self.questions_per_kind.values()) == 0:
            raise CorpusError("synthetic spec requests zero questions")
        for kind, count in self.questions_per_kind.items():
            if count > 0 and self.docs_per_kind.get(kind, 0) == 0:
                raise CorpusError(
                    f"questions for {kind.value} require at least one {kind.value} document"
                )

    @classmethod
    def default(cls) -> "SyntheticSpec":
        counts = {kind: 5 for kind in SourceKind}
        return cls(docs_per_kind=counts, questions_per_kind=counts)


def _topic(i: int) -> tuple[str, ...]:
    return SYNTHETIC_TOPICS[i % len(SYNTHETIC_TOPICS)]


def _assignment_doc(i: int, sections: int) -> Document:
    doc_id = f"hw{i}"
    parts = [f"Homework {i} for the course. Read every part before starting.\n"]
    for j in range(1, sections + 1):
        topic = _topic(i + j)
        parts.append(
            f"Question {j}\n"
            f"This part of {doc_id} covers {topic[0]}. "
            f"Key ideas: {', '.join(topic[1:])}. "
            f"Work through the {topic[0]} derivation and justify your answer in {doc_id}.\n"
        )
    return Document(
        id=doc_id,
        kind=SourceKind.ASSIGNMENT,
        title=f"Homework {i}",
        body="\n".join(parts),
        metadata={"assignment": str(i)},
    )


def _textbook_doc(i: int, sections: int) -> Document:
    doc_id = f"ch{i}"
    topic0 = _topic(i)
    parts = [f"Chapter {i} of the course notes, introducing {topic0[0]}.\n"]
    for j in range(1, sections + 1):
        topic = _topic(i + 2 * j)
        parts.append(
            f"Section {i}.{j}\n"
            f"In {doc_id} we study {topic[0]}. "
            f"Concepts covered: {', '.join(topic[1:])}. "
            f"Worked examples in {doc_id} show how {topic[0]} behaves in practice.\n"
        )
    return Document(
        id=doc_id,
        kind=SourceKind.TEXTBOOK,
        title=f"Chapter {i}",
        body="\n".join(parts),
        metadata={"chapter": str(i)},
    )


def _logistics_doc(i: int) -> Document:
    subject, detail = _LOGISTICS_SUBJECTS[(i - 1) % len(_LOGISTICS_SUBJECTS)]
    doc_id = f"log{i}"
    body = (
        f"Course logistics note {i}: {subject}.\n"
        f"{detail}\n"
        f"Consult {doc_id} or the staff if the {subject} is unclear."
    )
    return Document(
        id=doc_id,
        kind=SourceKind.LOGISTICS,
        title=f"Logistics: {subject}",
        body=body,
        metadata={"note": str(i)},
    )


def _qa_doc(i: int) -> Document:
    topic = _topic(i)
    doc_id = f"qa{i}"
    pair = {
        "question": f"How should I think about {topic[0]} when solving problems?",
        "answer": (
            f"Start from the definition of {topic[0]}; focus on {topic[1]} and "
            f"{topic[2]}, and check your result against a small example."
        ),
    }
    return Document(
        id=doc_id,
        kind=SourceKind.QA,
        title=f"Past Q&A {i}",
        body=json.dumps(pair, sort_keys=True),
        metadata={"semester": "prior"},
    )


_QUESTION_FUNCTIONS = {
    SourceKind.ASSIGNMENT: frozenset(
        {FunctionName.ASSIGNMENT_RETRIEVAL, FunctionName.QA_RETRIEVAL}
    ),
    SourceKind.TEXTBOOK: frozenset(
        {FunctionName.TEXTBOOK_RETRIEVAL, FunctionName.QA_RETRIEVAL}
    ),
    SourceKind.LOGISTICS: frozenset({FunctionName.LOGISTICS_RETRIEVAL}),
    SourceKind.QA: frozenset({FunctionName.QA_RETRIEVAL}),
}

_QUESTION_CATEGORY = {
    SourceKind.ASSIGNMENT: Category.ASSIGNMENT,
    SourceKind.TEXTBOOK: Category.CONCEPTUAL,
    SourceKind.LOGISTICS: Category.LOGISTICS,
    SourceKind.QA: Category.CONCEPTUAL,
}


def gen_synthetic_corpus(
    spec: SyntheticSpec, seed: int
) -> tuple[Corpus, list[StudentQuestion], list[GroundTruth]]:
    """Generate a corpus plus questions whose labels reference exactly the
    documents and functions planted for them. Pure function of (spec, seed)."""
    rng = random.Random(seed)
    docs: list[Document] = []
    by_kind: dict[SourceKind, list[Document]] = {kind: [] for kind in SourceKind}
    for kind in SourceKind:  # fixed enum order keeps output deterministic
        count = spec.docs_per_kind.get(kind, 0)
        for i in range(1, count + 1):
            if kind == SourceKind.ASSIGNMENT:
                doc = _assignment_doc(i, spec.sections_per_doc)
            elif kind == SourceKind.TEXTBOOK:
                doc = _textbook_doc(i, spec.sections_per_doc)
            elif kind == SourceKind.LOGISTICS:
                doc = _logistics_doc(i)
            else:
                doc = _qa_doc(i)
            docs.append(doc)
            by_kind[kind].append(doc)

    questions: list[StudentQuestion] = []
    labels: list[GroundTruth] = []
    qnum = 0
    for kind in SourceKind:
        for n in range(spec.questions_per_kind.get(kind, 0)):
            qnum += 1
            qid = f"q{qnum:04d}"
            target = by_kind[kind][n % len(by_kind[kind])]
            if kind == SourceKind.ASSIGNMENT:
                section = (n % spec.sections_per_doc) + 1
                topic = _topic(int(target.metadata["assignment"]) + section)
                text = (
                    f"In {target.id} Question {section}, how do I approach the "
                    f"{topic[0]} part? I am stuck on the {topic[1]}."
                )
                ta = (
                    f"For {target.id} Question {section}, revisit {topic[0]}: "
                    f"start from the {topic[1]} and check {topic[2]}."
                )
            elif kind == SourceKind.TEXTBOOK:
                section = (n % spec.sections_per_doc) + 1
                topic = _topic(int(target.metadata["chapter"]) + 2 * section)
                text = (
                    f"Can you explain {topic[0]} from {target.id} Section "
                    f"{target.metadata['chapter']}.{section}? The {topic[1]} confuses me."
                )
                ta = f"{topic[0].capitalize()} is covered in {target.id}: think of {topic[1]}."
            elif kind == SourceKind.LOGISTICS:
                subject = target.title.split(": ", 1)[1]
                text = f"What is the {subject} for this course?"
                ta = f"See {target.id}: {subject} is described in the logistics notes."
            else:
                topic = _topic(int(target.metadata.get("semester") == "prior") + n)
                pair = target.qa_pair()
                text = f"A past student asked: {pair.question} What was the advice?"
                ta = pair.answer
            questions.append(
                StudentQuestion(id=qid, text=text, category=_QUESTION_CATEGORY[kind], week=(n % 17) + 1)
            )
            labels.append(
                GroundTruth(
                    question_id=qid,
                    functions=_QUESTION_FUNCTIONS[kind],
                    ta_answer=ta,
                    ta_scores=Judgment(
                        factuality=rng.randint(4, 5),
                        relevance=rng.randint(4, 5),
                        style=rng.randint(2, 3),
                    ),
                    relevant_docs=frozenset({target.id}),
                )
            )
    return Corpus(docs), questions, labels
