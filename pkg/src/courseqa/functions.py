"""The four course-retrieval tools exposed to the model: their schemas in the
OpenAI tool shape, and dispatch onto kind-filtered retrieval backends."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Mapping

from .corpus import FunctionName, SourceKind
from .provider import ToolParam, ToolSchema
from .retrieval import CourseRetriever, RetrievalResult

logger = logging.getLogger(__name__)

#: Which source each function searches. Dispatch never crosses this mapping,
#: so a logistics call cannot surface assignment content however similar.
FUNCTION_SOURCE: dict[FunctionName, SourceKind] = {
    FunctionName.QA_RETRIEVAL: SourceKind.QA,
    FunctionName.TEXTBOOK_RETRIEVAL: SourceKind.TEXTBOOK,
    FunctionName.ASSIGNMENT_RETRIEVAL: SourceKind.ASSIGNMENT,
    FunctionName.LOGISTICS_RETRIEVAL: SourceKind.LOGISTICS,
}

DEFAULT_QA_TOP_K = 3


class FunctionCallError(Exception):
    """Raised for calls outside the closed function set or missing arguments."""


@dataclass(frozen=True)
class FunctionCallRecord:
    """One dispatched call: validated arguments echoed back plus its results."""

    name: FunctionName
    arguments: dict[str, Any]
    results: tuple[RetrievalResult, ...]
    round: int = 1


def schemas() -> list[ToolSchema]:
    """Tool declarations for the four retrieval functions.

    Only qa_retrieval takes top_k (optional, default 3); the other three take
    just the query, with their result count fixed by pipeline configuration.
    """
    query = ToolParam("query", "string", required=True, description="Search query text.")
    return [
        ToolSchema(
            name=FunctionName.QA_RETRIEVAL.value,
            description=(
                "Retrieve the top_k most similar past student Q&A pairs from prior "
                "semesters (source kind: qa)."
            ),
            parameters=(
                query,
                ToolParam(
                    "top_k",
                    "integer",
                    required=False,
                    description="How many Q&A pairs to return (default 3).",
                ),
            ),
        ),
        ToolSchema(
            name=FunctionName.TEXTBOOK_RETRIEVAL.value,
            description=(
                "Retrieve relevant chunks from the textbook and course notes "
                "(source kind: textbook)."
            ),
            parameters=(query,),
        ),
        ToolSchema(
            name=FunctionName.ASSIGNMENT_RETRIEVAL.value,
            description=(
                "Retrieve relevant portions of homework, labs, and projects, "
                "including any relevant solutions (source kind: assignment)."
            ),
            parameters=(query,),
        ),
        ToolSchema(
            name=FunctionName.LOGISTICS_RETRIEVAL.value,
            description=(
                "Retrieve matching content from course logistics such as the "
                "syllabus and policies (source kind: logistics)."
            ),
            parameters=(query,),
        ),
    ]


def schema_for(name: FunctionName) -> ToolSchema:
    for schema in schemas():
        if schema.name == name.value:
            return schema
    raise FunctionCallError(f"no schema for {name!r}")


def dispatch(
    name: str,
    arguments: Mapping[str, Any],
    retriever: CourseRetriever,
    *,
    default_top_k: int = DEFAULT_QA_TOP_K,
    round: int = 1,
) -> FunctionCallRecord:
    """Route one tool call to the backend filtered to its source kind.

    qa_retrieval honors its top_k argument (non-positive values clamp to 1
    with a warning); the other functions return ``default_top_k`` chunks.
    """
    try:
        fn = FunctionName(name)
    except ValueError:
        raise FunctionCallError(f"unknown function {name!r}") from None
    query = arguments.get("query")
    if not query or not isinstance(query, str):
        raise FunctionCallError(f"{name}: missing or non-string query argument")
    echoed = dict(arguments)
    if fn == FunctionName.QA_RETRIEVAL:
        top_k = arguments.get("top_k", default_top_k)
        if not isinstance(top_k, int) or isinstance(top_k, bool):
            raise FunctionCallError(f"{name}: top_k must be an integer, got {top_k!r}")
        if top_k < 1:
            logger.warning("%s: top_k=%d clamped to 1", name, top_k)
            top_k = 1
    else:
        top_k = default_top_k
    results = retriever.retrieve(FUNCTION_SOURCE[fn], query, top_k)
    return FunctionCallRecord(name=fn, arguments=echoed, results=tuple(results), round=round)
