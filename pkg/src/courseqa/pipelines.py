"""Seven answer-generation strategies over (provider, functions, judge), each
emitting a full trace of prompts, tool calls, retrieved material, and the
final answer.

All strategies share one system prompt and one fallback sentence, and differ
only in how function selection is driven: optional (fc), category-guided
(fc_categorize), forced (fc_forced), iterated (fc_iterative), judge-reviewed
(fc_feedback), split into selection and argument hops (fc_multihop), or fixed
by hand-written category rules with no model involvement at all (edison).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

from .corpus import Category, FunctionName, StudentQuestion
from .functions import FunctionCallRecord, dispatch, schema_for, schemas
from .judge import (
    DIMENSIONS,
    JudgeError,
    Judgment,
    NO_TA_ANSWER,
    judge_answer,
)
from .provider import (
    AUTO,
    ChatMessage,
    CompletionResponse,
    NONE,
    Provider,
    REQUIRED,
    ToolCall,
    ToolChoice,
    assistant,
    chat_complete,
    system,
    tool_result,
    user,
)
from .retrieval import CourseRetriever

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = """You will simulate the role of a teaching assistant for an undergraduate data science course, answering student questions on a course discussion forum.
1. Your responses should be clear, helpful, and maintain a positive tone.
2. Aim for conciseness and clarity.
3. Use the excerpts from any solutions, course notes, and historical question-answer pairs provided to you as your primary source of information.
4. If the question is difficult to answer based on the provided context, reply, 'Sorry, I do not know. Please wait for a staff member's response."""

FALLBACK_ANSWER = "Sorry, I do not know. Please wait for a staff member's response."

SELECTION_PROMPT = (
    "Decide which of the following functions are needed to gather material for "
    "answering the student question. Respond with a JSON array of function "
    "names; name at least one.\n\nFunctions:\n{functions}\n\nStudent question: {question}"
)

ARGUMENTS_PROMPT = "Call {name} with arguments that retrieve the material needed to answer the question above."

FEEDBACK_PROMPT = (
    "You scored a draft answer to a student question as factuality={factuality}/5, "
    "relevance={relevance}/5, style={style}/3. In one or two sentences, state the "
    "most important improvement the answer needs.\n\n"
    "Student question: {question}\n\nDraft answer: {answer}"
)

DEFAULT_EDISON_RULES: dict[Category, frozenset[FunctionName]] = {
    Category.ASSIGNMENT: frozenset(
        {FunctionName.ASSIGNMENT_RETRIEVAL, FunctionName.QA_RETRIEVAL}
    ),
    Category.CONCEPTUAL: frozenset(
        {FunctionName.TEXTBOOK_RETRIEVAL, FunctionName.QA_RETRIEVAL}
    ),
    Category.LOGISTICS: frozenset({FunctionName.LOGISTICS_RETRIEVAL}),
}


class PipelineError(Exception):
    """Raised for configuration problems, e.g. a missing question category."""


class PipelineKind(str, Enum):
    EDISON = "edison"
    FC = "fc"
    FC_CATEGORIZE = "fc_categorize"
    FC_FORCED = "fc_forced"
    FC_ITERATIVE = "fc_iterative"
    FC_FEEDBACK = "fc_feedback"
    FC_MULTIHOP = "fc_multihop"


@dataclass(frozen=True)
class PipelineConfig:
    kind: PipelineKind
    max_rounds: int = 3
    max_feedback_rounds: int = 1
    feedback_threshold: Judgment = Judgment(5, 5, 3)
    edison_rules: Mapping[Category, frozenset[FunctionName]] = dc_field(
        default_factory=lambda: dict(DEFAULT_EDISON_RULES)
    )
    fc_model: str = ""
    answer_model: str = ""
    default_top_k: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise PipelineError("max_rounds must be >= 1")
        if self.max_feedback_rounds < 0:
            raise PipelineError("max_feedback_rounds must be >= 0")
        if self.kind == PipelineKind.EDISON:
            for category in Category:
                if not self.edison_rules.get(category):
                    raise PipelineError(
                        f"edison rules must cover category {category.value!r}"
                    )


@dataclass(frozen=True)
class PipelineDeps:
    provider: Provider
    retriever: CourseRetriever
    judge_provider: Provider | None = None
    judge_few_shots: Sequence[Any] = ()


@dataclass(frozen=True)
class TraceRound:
    """One pipeline event: the messages sent, the model's response (absent for
    edison's rule-driven dispatch), and any function calls executed."""

    messages: tuple[ChatMessage, ...]
    response: CompletionResponse | None
    calls: tuple[FunctionCallRecord, ...] = ()


@dataclass
class PipelineTrace:
    question_id: str
    kind: PipelineKind
    rounds: list[TraceRound]
    selected_functions: frozenset[FunctionName]
    answer: str
    seed: int
    fc_model: str = ""
    answer_model: str = ""
    judge_feedback: list[tuple[Judgment, str]] = dc_field(default_factory=list)
    flags: list[str] = dc_field(default_factory=list)


class _Run:
    """Mutable state while a single pipeline run unfolds."""

    def __init__(self, question: StudentQuestion, config: PipelineConfig, deps: PipelineDeps):
        self.question = question
        self.config = config
        self.deps = deps
        self.messages: list[ChatMessage] = []
        self.rounds: list[TraceRound] = []
        self.selected: set[FunctionName] = set()
        self.judge_feedback: list[tuple[Judgment, str]] = []
        self.flags: list[str] = []
        self._round_no = 0

    def start(self, user_text: str) -> None:
        self.messages = [system(SYSTEM_PROMPT), user(user_text)]

    def tool_turn(self, tool_choice: ToolChoice) -> tuple[CompletionResponse, list[FunctionCallRecord]]:
        """One model turn with the four tools offered, dispatching any calls
        and feeding the results back as tool messages."""
        self._round_no += 1
        sent = tuple(self.messages)
        response = chat_complete(
            self.deps.provider,
            sent,
            tools=schemas(),
            tool_choice=tool_choice,
            seed=self.config.seed,
        )
        records = self.execute_calls(response.tool_calls, response_text=response.text)
        self.rounds.append(TraceRound(messages=sent, response=response, calls=tuple(records)))
        return response, records

    def execute_calls(
        self, calls: Sequence[ToolCall], *, response_text: str | None = None
    ) -> list[FunctionCallRecord]:
        """Dispatch tool calls and append the assistant/tool message exchange."""
        if not calls:
            return []
        with_ids = [
            ToolCall(c.name, c.arguments, c.id or f"call_r{self._round_no}_{i}")
            for i, c in enumerate(calls)
        ]
        records = []
        self.messages.append(assistant(response_text or "", tool_calls=with_ids))
        for call in with_ids:
            record = dispatch(
                call.name,
                call.arguments,
                self.deps.retriever,
                default_top_k=self.config.default_top_k,
                round=self._round_no,
            )
            records.append(record)
            self.selected.add(record.name)
            self.messages.append(tool_result(render_results(record), call.id))
        return records

    def answer_turn(self) -> str:
        self._round_no += 1
        sent = tuple(self.messages)
        response = chat_complete(self.deps.provider, sent, seed=self.config.seed)
        self.rounds.append(TraceRound(messages=sent, response=response))
        text = (response.text or "").strip()
        self.messages.append(assistant(text))
        return text

    def finish(self, answer: str | None) -> PipelineTrace:
        final = (answer or "").strip() or FALLBACK_ANSWER
        return PipelineTrace(
            question_id=self.question.id,
            kind=self.config.kind,
            rounds=self.rounds,
            selected_functions=frozenset(self.selected),
            answer=final,
            seed=self.config.seed,
            fc_model=self.config.fc_model,
            answer_model=self.config.answer_model,
            judge_feedback=self.judge_feedback,
            flags=self.flags,
        )


def render_results(record: FunctionCallRecord) -> str:
    """Plain-text rendering of one call's retrieved material for the model."""
    lines = [f"{record.name.value} results for query {record.arguments.get('query', '')!r}:"]
    for r in record.results:
        place = f", {r.chunk.header}" if r.chunk.header else ""
        lines.append(f"- ({r.chunk.doc_id}{place}) {r.chunk.text}")
    if not record.results:
        lines.append("- no results")
    return "\n".join(lines)


def _user_text(question: StudentQuestion, config: PipelineConfig) -> str:
    if config.kind == PipelineKind.FC_CATEGORIZE:
        if question.category is None:
            raise PipelineError(f"question {question.id!r} has no category for fc_categorize")
        return f"Category: {question.category.value}\n{question.text}"
    return question.text


def run(question: StudentQuestion, config: PipelineConfig, deps: PipelineDeps) -> PipelineTrace:
    """Run one question through the configured pipeline kind."""
    runner = {
        PipelineKind.FC: run_fc,
        PipelineKind.FC_CATEGORIZE: run_fc_categorize,
        PipelineKind.FC_FORCED: run_fc_forced,
        PipelineKind.FC_ITERATIVE: run_fc_iterative,
        PipelineKind.FC_FEEDBACK: run_fc_feedback,
        PipelineKind.FC_MULTIHOP: run_fc_multihop,
        PipelineKind.EDISON: run_edison,
    }[config.kind]
    return runner(question, config, deps)


def _run_one_shot(
    question: StudentQuestion,
    config: PipelineConfig,
    deps: PipelineDeps,
    tool_choice: ToolChoice,
) -> PipelineTrace:
    state = _Run(question, config, deps)
    state.start(_user_text(question, config))
    response, records = state.tool_turn(tool_choice)
    answer = state.answer_turn() if records else response.text
    return state.finish(answer)


def run_fc(question, config, deps) -> PipelineTrace:
    """Default pipeline: the model may call zero or more functions, then answers."""
    return _run_one_shot(question, config, deps, AUTO)


def run_fc_categorize(question, config, deps) -> PipelineTrace:
    """Like fc, with the student-selected category prepended to the question."""
    return _run_one_shot(question, config, deps, AUTO)


def run_fc_forced(question, config, deps) -> PipelineTrace:
    """Like fc, but the first turn must select at least one function."""
    return _run_one_shot(question, config, deps, REQUIRED)


def run_fc_iterative(question, config, deps) -> PipelineTrace:
    """Forced first call, then further optional calls informed by retrieved
    content, up to ``max_rounds`` tool rounds in total."""
    state = _Run(question, config, deps)
    state.start(_user_text(question, config))
    response, _ = state.tool_turn(REQUIRED)
    answer = None
    for _ in range(config.max_rounds - 1):
        response, records = state.tool_turn(AUTO)
        if not records:
            answer = response.text
            break
    else:
        if response.tool_calls:
            state.flags.append("round_bound_exhausted")
    if answer is None:
        answer = state.answer_turn()
    return state.finish(answer)


def _meets(judgment: Judgment, threshold: Judgment) -> bool:
    return all(getattr(judgment, dim) >= getattr(threshold, dim) for dim in DIMENSIONS)


def _ask_feedback(state: _Run, judgment: Judgment, answer: str) -> str:
    prompt = FEEDBACK_PROMPT.format(
        factuality=judgment.factuality,
        relevance=judgment.relevance,
        style=judgment.style,
        question=state.question.text,
        answer=answer,
    )
    assert state.deps.judge_provider is not None
    response = chat_complete(state.deps.judge_provider, [user(prompt)], seed=state.config.seed)
    return (response.text or "").strip()


def run_fc_feedback(question, config, deps) -> PipelineTrace:
    """Forced call and answer, reviewed by the judging model; a below-threshold
    review feeds textual feedback back for one more tool+answer cycle.

    The rubric's ground-truth slot is filled with the pre-deployment sentinel
    since no staff answer exists at run time. Only reviews that drive a
    revision are recorded in ``judge_feedback``; a final review that still
    falls below the threshold sets the ``feedback_threshold_unmet`` flag.
    """
    if deps.judge_provider is None:
        raise PipelineError("fc_feedback requires a judge provider")
    state = _Run(question, config, deps)
    state.start(_user_text(question, config))
    state.tool_turn(REQUIRED)
    answer = state.answer_turn()

    def review(text: str) -> Judgment | None:
        try:
            return judge_answer(
                deps.judge_provider,
                question.text,
                text or FALLBACK_ANSWER,
                NO_TA_ANSWER,
                few_shots=deps.judge_few_shots,
                seed=config.seed,
            )
        except JudgeError as exc:
            logger.warning("judge review failed (%s); skipping revision", exc)
            state.flags.append("judge_parse_failure")
            return None

    for _ in range(config.max_feedback_rounds):
        judgment = review(answer)
        if judgment is None or _meets(judgment, config.feedback_threshold):
            return state.finish(answer)
        feedback = _ask_feedback(state, judgment, answer)
        state.judge_feedback.append((judgment, feedback))
        state.messages.append(
            user(
                "A course staff reviewer scored your draft "
                f"(factuality={judgment.factuality}/5, relevance={judgment.relevance}/5, "
                f"style={judgment.style}/3) and left this feedback: {feedback}\n"
                "Please revise your answer. You may call functions again if needed."
            )
        )
        response, records = state.tool_turn(AUTO)
        answer = state.answer_turn() if records else response.text
    final_judgment = review(answer or FALLBACK_ANSWER)
    if final_judgment is not None and not _meets(final_judgment, config.feedback_threshold):
        state.flags.append("feedback_threshold_unmet")
    return state.finish(answer)


_NAME_PATTERN = re.compile("|".join(fn.value for fn in FunctionName))


def parse_function_names(text: str) -> list[FunctionName]:
    """Function names from a selection reply: a JSON array when possible,
    otherwise every valid name mentioned, in order, deduplicated."""
    names: list[str] = []
    try:
        listed = json.loads(text.strip())
        if isinstance(listed, list):
            names = [str(x) for x in listed]
    except json.JSONDecodeError:
        pass
    if not names:
        names = _NAME_PATTERN.findall(text)
    out: list[FunctionName] = []
    for name in names:
        try:
            fn = FunctionName(name)
        except ValueError:
            logger.warning("selection named unknown function %r; dropped", name)
            continue
        if fn not in out:
            out.append(fn)
    return out


def run_fc_multihop(question, config, deps) -> PipelineTrace:
    """Two-hop selection: one call names the needed functions, then one call
    per selected function generates its arguments; falls back to fc_forced
    when the first hop names nothing valid."""
    state = _Run(question, config, deps)
    state.start(_user_text(question, config))
    listing = "\n".join(f"- {s.name}: {s.description}" for s in schemas())
    hop1_messages = (
        system(SYSTEM_PROMPT),
        user(SELECTION_PROMPT.format(functions=listing, question=question.text)),
    )
    hop1 = chat_complete(deps.provider, hop1_messages, seed=config.seed)
    state.rounds.append(TraceRound(messages=hop1_messages, response=hop1))
    selected = parse_function_names(hop1.text or "")
    if not selected:
        logger.warning("multihop selection produced no valid names; forcing one call")
        trace = _run_one_shot(question, config, deps, REQUIRED)
        trace.rounds = state.rounds + trace.rounds
        trace.flags.append("multihop_fallback")
        return trace
    for fn in selected:
        state._round_no += 1
        # The arguments instruction is transient: it steers this hop only and
        # stays out of the conversation the final answer turn sees.
        sent = tuple(state.messages) + (user(ARGUMENTS_PROMPT.format(name=fn.value)),)
        response = chat_complete(
            deps.provider,
            sent,
            tools=[schema_for(fn)],
            tool_choice=ToolChoice.specific(fn.value),
            seed=config.seed,
        )
        records = state.execute_calls(response.tool_calls, response_text=response.text)
        state.rounds.append(TraceRound(messages=sent, response=response, calls=tuple(records)))
    answer = state.answer_turn()
    return state.finish(answer)


def run_edison(question, config, deps) -> PipelineTrace:
    """Rule-based baseline: functions come from the category rule table, the
    query is the question text verbatim, and no model is involved in selection."""
    if question.category is None:
        raise PipelineError(f"question {question.id!r} has no category for edison")
    state = _Run(question, config, deps)
    state.start(question.text)
    state._round_no += 1
    functions = sorted(config.edison_rules[question.category], key=lambda fn: fn.value)
    calls = [ToolCall(fn.value, {"query": question.text}) for fn in functions]
    records = state.execute_calls(calls)
    state.rounds.append(TraceRound(messages=(), response=None, calls=tuple(records)))
    answer = state.answer_turn()
    return state.finish(answer)


# ---------------------------------------------------------------------------
# Trace persistence
# ---------------------------------------------------------------------------


def _message_to_dict(m: ChatMessage) -> dict[str, Any]:
    return {
        "role": m.role,
        "content": m.content,
        "tool_call_id": m.tool_call_id,
        "tool_calls": [
            {"id": c.id, "name": c.name, "arguments": c.arguments} for c in m.tool_calls
        ],
    }


def _message_from_dict(d: dict[str, Any]) -> ChatMessage:
    return ChatMessage(
        role=d["role"],
        content=d["content"],
        tool_call_id=d.get("tool_call_id"),
        tool_calls=tuple(
            ToolCall(c["name"], c["arguments"], c["id"]) for c in d.get("tool_calls", [])
        ),
    )


def trace_to_dict(trace: PipelineTrace) -> dict[str, Any]:
    from .provider import response_to_dict
    from .retrieval import Chunk, RetrievalResult  # noqa: F401  (documenting shape)

    def result_dict(r):
        return {
            "chunk": {
                "id": r.chunk.id,
                "doc_id": r.chunk.doc_id,
                "text": r.chunk.text,
                "span": list(r.chunk.span),
                "header": r.chunk.header,
            },
            "score": r.score,
            "path": list(r.path),
        }

    return {
        "question_id": trace.question_id,
        "kind": trace.kind.value,
        "seed": trace.seed,
        "fc_model": trace.fc_model,
        "answer_model": trace.answer_model,
        "answer": trace.answer,
        "selected_functions": sorted(fn.value for fn in trace.selected_functions),
        "judge_feedback": [
            {
                "scores": {dim: getattr(j, dim) for dim in DIMENSIONS},
                "feedback": text,
            }
            for j, text in trace.judge_feedback
        ],
        "flags": list(trace.flags),
        "rounds": [
            {
                "messages": [_message_to_dict(m) for m in r.messages],
                "response": response_to_dict(r.response) if r.response else None,
                "calls": [
                    {
                        "name": rec.name.value,
                        "arguments": rec.arguments,
                        "round": rec.round,
                        "results": [result_dict(res) for res in rec.results],
                    }
                    for rec in r.calls
                ],
            }
            for r in trace.rounds
        ],
    }


def trace_from_dict(d: dict[str, Any]) -> PipelineTrace:
    from .provider import response_from_dict
    from .retrieval import Chunk, RetrievalResult

    def result_from(rd):
        c = rd["chunk"]
        return RetrievalResult(
            chunk=Chunk(
                id=c["id"],
                doc_id=c["doc_id"],
                text=c["text"],
                span=(c["span"][0], c["span"][1]),
                header=c["header"],
            ),
            score=rd["score"],
            path=tuple(rd["path"]),
        )

    rounds = [
        TraceRound(
            messages=tuple(_message_from_dict(m) for m in r["messages"]),
            response=response_from_dict(r["response"]) if r["response"] else None,
            calls=tuple(
                FunctionCallRecord(
                    name=FunctionName(rec["name"]),
                    arguments=rec["arguments"],
                    results=tuple(result_from(res) for res in rec["results"]),
                    round=rec["round"],
                )
                for rec in r["calls"]
            ),
        )
        for r in d["rounds"]
    ]
    return PipelineTrace(
        question_id=d["question_id"],
        kind=PipelineKind(d["kind"]),
        rounds=rounds,
        selected_functions=frozenset(FunctionName(n) for n in d["selected_functions"]),
        answer=d["answer"],
        seed=d["seed"],
        fc_model=d.get("fc_model", ""),
        answer_model=d.get("answer_model", ""),
        judge_feedback=[
            (Judgment(**e["scores"]), e["feedback"]) for e in d.get("judge_feedback", [])
        ],
        flags=list(d.get("flags", [])),
    )


def trace_filename(trace: PipelineTrace) -> str:
    return f"{trace.question_id}.{trace.kind.value}.{trace.seed}.json"


def save_trace(trace: PipelineTrace, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / trace_filename(trace)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(trace_to_dict(trace), f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def load_trace(path: str | Path) -> PipelineTrace:
    with open(path, encoding="utf-8") as f:
        return trace_from_dict(json.load(f))


def load_traces(run_dir: str | Path) -> list[PipelineTrace]:
    return [load_trace(p) for p in sorted(Path(run_dir).glob("*.json"))]
