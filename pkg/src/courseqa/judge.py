"""Rubric-based scoring of answers by a judging model, plus alignment of
judge scores against expert TA scores (exact match and MAE)."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .provider import Provider, assistant, chat_complete, system, user

logger = logging.getLogger(__name__)

DIMENSIONS = ("factuality", "relevance", "style")
SCORE_RANGES = {"factuality": (1, 5), "relevance": (1, 5), "style": (1, 3)}

#: Fills the rubric's ground-truth slot when an answer is reviewed before any
#: staff answer exists (the revision loop in the feedback pipeline).
NO_TA_ANSWER = "N/A (pre-deployment review)"

RUBRIC = """You are an expert at grading responses to student questions. You are given:
- a student question
- an LLM-written answer
- a TA-written ground-truth answer.
Assign a score from 1 to 5 for factuality and relevance:
1. Factuality: Evaluates the correctness of the information provided in the LLM-written response.
2. Relevance:  Evaluates the degree to which the LLM-written response is pertinent or related to the given student question and course.
And assign a score from 1 to 3 for style:
1. Style: Evaluates the degree to which the coherence, length, and the use of solutions, hints, and examples in the LLM-written response are appropriate for the given student question.
Please refer to the Ground Truth answer as the gold standard for all of the metrics.
Respond ONLY in dictionary format like this:
{"factuality": <1-5>, "relevance": <1-5>, "style": <1-3>}
Do NOT use the tag "json" in the response, or any backticks.
You are a kind grader. If you are ever deciding between 2 scores, choose the higher one."""

REASK = (
    'Your previous reply could not be parsed. Respond ONLY in dictionary format like this: '
    '{"factuality": <1-5>, "relevance": <1-5>, "style": <1-3>}'
)


class JudgeError(Exception):
    """Base class for judge response problems."""


class JudgeParseError(JudgeError):
    """Response was not a JSON dictionary, even after the re-ask."""


class JudgeFormatError(JudgeError):
    """Dictionary parsed but keys or value types are wrong."""


class JudgeRangeError(JudgeError):
    """A score fell outside its rubric range."""


@dataclass(frozen=True)
class Judgment:
    factuality: int
    relevance: int
    style: int

    def __post_init__(self) -> None:
        for dim in DIMENSIONS:
            value = getattr(self, dim)
            lo, hi = SCORE_RANGES[dim]
            if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
                raise JudgeRangeError(f"{dim}={value!r} outside {lo}-{hi}")


@dataclass(frozen=True)
class AlignmentReport:
    """Per-dimension agreement between judge and TA scores."""

    exact_match: dict[str, float]
    mae: dict[str, float]
    n: int


@dataclass(frozen=True)
class FewShotExample:
    question: str
    llm_answer: str
    ta_answer: str
    scores: Judgment


def load_few_shots(path: str | Path) -> list[FewShotExample]:
    """Load few-shot examples from a JSONL file of
    {question, llm_answer, ta_answer, scores} records."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                scores = Judgment(**record["scores"])
                examples.append(
                    FewShotExample(
                        record["question"], record["llm_answer"], record["ta_answer"], scores
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise JudgeError(f"{path}:{lineno}: bad few-shot record: {exc}") from exc
    return examples


def format_case(question: str, llm_answer: str, ta_answer: str) -> str:
    return (
        f"Student question:\n{question}\n\n"
        f"LLM-written answer:\n{llm_answer}\n\n"
        f"TA-written ground-truth answer:\n{ta_answer}"
    )


_FENCE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def _strip_fences(text: str) -> str:
    m = _FENCE.match(text.strip())
    return m.group(1).strip() if m else text.strip()


def _parse_judgment(text: str) -> Judgment:
    cleaned = _strip_fences(text)
    try:
        obj = json.loads(cleaned)
    except json.JSONDecodeError as exc:
        raise JudgeParseError(f"not a JSON dictionary: {cleaned[:80]!r}") from exc
    if not isinstance(obj, dict):
        raise JudgeParseError(f"expected a dictionary, got {type(obj).__name__}")
    if set(obj) != set(DIMENSIONS):
        raise JudgeFormatError(f"keys {sorted(obj)} != {sorted(DIMENSIONS)}")
    for dim in DIMENSIONS:
        if not isinstance(obj[dim], int) or isinstance(obj[dim], bool):
            raise JudgeFormatError(f"{dim} must be an integer, got {obj[dim]!r}")
    return Judgment(**{dim: obj[dim] for dim in DIMENSIONS})


def judge_answer(
    provider: Provider,
    question: str,
    llm_answer: str,
    ta_answer: str,
    *,
    few_shots: Sequence[FewShotExample] = (),
    seed: int = 0,
) -> Judgment:
    """Score one answer against the rubric.

    The prompt is the rubric verbatim, followed by few-shot exchanges and the
    case under review. A single code fence is stripped before parsing (the
    rubric forbids fences, but robustness is retained), and one re-ask retry
    is made when the reply is not a JSON dictionary at all.
    """
    for name, value in (("question", question), ("llm_answer", llm_answer), ("ta_answer", ta_answer)):
        if not value:
            raise ValueError(f"{name} must be non-empty")
    messages = [system(RUBRIC)]
    for shot in few_shots:
        messages.append(user(format_case(shot.question, shot.llm_answer, shot.ta_answer)))
        messages.append(
            assistant(
                json.dumps(
                    {dim: getattr(shot.scores, dim) for dim in DIMENSIONS}, sort_keys=False
                )
            )
        )
    messages.append(user(format_case(question, llm_answer, ta_answer)))
    response = chat_complete(provider, messages, seed=seed)
    try:
        return _parse_judgment(response.text or "")
    except JudgeParseError as exc:
        logger.warning("judge reply unparseable (%s); re-asking once", exc)
    retry_messages = messages + [assistant(response.text or ""), user(REASK)]
    retry = chat_complete(provider, retry_messages, seed=seed)
    return _parse_judgment(retry.text or "")


def align(judgments: Sequence[Judgment], ta_scores: Sequence[Judgment]) -> AlignmentReport:
    """Exact-match fraction and mean absolute error per dimension, paired."""
    if len(judgments) != len(ta_scores):
        raise ValueError(f"length mismatch: {len(judgments)} judgments vs {len(ta_scores)} TA scores")
    if not judgments:
        raise ValueError("cannot align empty score lists")
    em = {}
    mae = {}
    for dim in DIMENSIONS:
        pairs = [(getattr(j, dim), getattr(t, dim)) for j, t in zip(judgments, ta_scores)]
        em[dim] = sum(1 for a, b in pairs if a == b) / len(pairs)
        mae[dim] = sum(abs(a - b) for a, b in pairs) / len(pairs)
    return AlignmentReport(exact_match=em, mae=mae, n=len(judgments))


JudgeFn = Callable[[str, str, str], Judgment]


def judge_fn(provider: Provider, *, few_shots: Sequence[FewShotExample] = (), seed: int = 0) -> JudgeFn:
    """Bind a provider and few-shots into a (question, answer, ta_answer) -> Judgment callable."""

    def _judge(question: str, llm_answer: str, ta_answer: str) -> Judgment:
        return judge_answer(
            provider, question, llm_answer, ta_answer, few_shots=few_shots, seed=seed
        )

    return _judge
