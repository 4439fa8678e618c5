"""Structure-aware hierarchical retrieval and its baselines.

The hierarchical method (``hier_gen``) chunks each document along detected
headers, recursively summarizes chunks into a k-ary tree per document, picks
entry trees from a table of contents, and descends with a beam search scored
by the model's yes-probability. Baselines are plain cosine retrieval
(``vector``) and cosine retrieval reranked by yes-probability
(``vector_gen``).

Beam search here is *widening*: the result at width ``b`` merges the
level-pruned descents at every width up to ``b``. Wider beams therefore
explore a superset of narrower ones, which makes the top-1 score monotone in
the width and makes ``beam >= #leaves`` coincide exactly with exhaustive leaf
scoring. A single level-pruned descent lacks both guarantees on trees deeper
than two levels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, Document, GroundTruth, SourceKind
from .provider import (
    Provider,
    YES_FLOOR,
    chat_complete,
    embed,
    user,
    yes_probability,
)

logger = logging.getLogger(__name__)

Scorer = Callable[[str, str], float]


class RetrievalError(Exception):
    """Raised for index inconsistencies and unusable provider output."""


@dataclass(frozen=True)
class Chunk:
    """One retrievable unit of a document.

    ``span`` indexes the document's retrievable text (``Document.text()``),
    which is the raw body for all kinds except qa, where it is the rendered
    question/answer pair.
    """

    id: str
    doc_id: str
    text: str
    span: tuple[int, int]
    header: str | None = None


@dataclass(frozen=True)
class SummaryNode:
    id: str
    summary: str
    children: tuple[str, ...] = ()
    leaf_chunk: str | None = None

    def __post_init__(self) -> None:
        if bool(self.children) == bool(self.leaf_chunk):
            raise RetrievalError(f"node {self.id!r} must be a leaf XOR have children")

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class SummaryTree:
    root: str
    nodes: dict[str, SummaryNode]
    branching: int
    kind: SourceKind

    def validate(self) -> None:
        if self.root not in self.nodes:
            raise RetrievalError(f"root {self.root!r} missing from node map")
        seen: set[str] = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise RetrievalError(f"node {nid!r} reachable more than once")
            seen.add(nid)
            node = self.nodes[nid]
            if len(node.children) > self.branching:
                raise RetrievalError(f"node {nid!r} exceeds branching {self.branching}")
            stack.extend(node.children)
        if seen != set(self.nodes):
            raise RetrievalError("unreachable nodes in tree")

    def leaves(self) -> list[SummaryNode]:
        """Leaves in chunk order (depth-first, children in stored order)."""
        out = []
        stack = [self.root]
        while stack:
            node = self.nodes[stack.pop()]
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def depth(self) -> int:
        depth = 0
        node = self.nodes[self.root]
        while not node.is_leaf:
            depth += 1
            node = self.nodes[node.children[0]]
        return depth


@dataclass(frozen=True)
class RetrievalResult:
    chunk: Chunk
    score: float
    path: tuple[str, ...]


def _order_results(results: Iterable[RetrievalResult]) -> list[RetrievalResult]:
    # Total order everywhere: score descending, then (doc_id, span.start).
    return sorted(results, key=lambda r: (-r.score, r.chunk.doc_id, r.chunk.span[0]))


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------


def split_fixed(doc: Document, chunk_chars: int = 1000, overlap: int = 0) -> list[Chunk]:
    """Fixed-length chunks covering the text exactly; all but the last have
    length ``chunk_chars``. Generation stops at the window that reaches the
    end of the text, so overlapping tails are not duplicated."""
    if not chunk_chars > overlap >= 0:
        raise ValueError("require chunk_chars > overlap >= 0")
    text = doc.text()
    if not text:
        raise RetrievalError(f"document {doc.id!r} has no text to chunk")
    stride = chunk_chars - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + chunk_chars, len(text))
        chunks.append(
            Chunk(
                id=f"{doc.id}:c{len(chunks):04d}",
                doc_id=doc.id,
                text=text[start:end],
                span=(start, end),
            )
        )
        if end >= len(text):
            break
        start += stride
    return chunks


HEADER_PROMPT = (
    "List the question or section headers that segment the following course "
    "document, in order of appearance. Respond with a JSON array of the exact "
    "header strings and nothing else.\n\nDocument:\n{body}"
)


def detect_headers(doc: Document, provider: Provider, *, seed: int = 0) -> list[tuple[str, int]]:
    """Ask the model for the document's headers and verify each against the
    text. Headers the model invents are dropped with a warning; an empty
    return signals the caller to fall back to fixed-length chunks."""
    if doc.kind not in (SourceKind.ASSIGNMENT, SourceKind.TEXTBOOK):
        raise ValueError(f"header detection applies to assignment/textbook docs, not {doc.kind.value}")
    text = doc.text()
    response = chat_complete(
        provider, [user(HEADER_PROMPT.format(body=text))], seed=seed
    )
    raw = response.text or ""
    try:
        listed = json.loads(raw.strip())
        if not isinstance(listed, list):
            raise ValueError
        headers = [str(h) for h in listed]
    except (json.JSONDecodeError, ValueError):
        headers = [line.strip() for line in raw.splitlines() if line.strip()]
    boundaries: list[tuple[str, int]] = []
    last = -1
    for header in headers:
        offset = text.find(header)
        if offset < 0:
            logger.warning("document %s: dropping header %r absent from body", doc.id, header)
            continue
        if offset <= last:
            logger.warning("document %s: dropping non-increasing header %r", doc.id, header)
            continue
        boundaries.append((header, offset))
        last = offset
    return boundaries


def segment_by_headers(doc: Document, boundaries: Sequence[tuple[str, int]]) -> list[Chunk]:
    """Cut the text at each boundary; text before the first boundary becomes a
    preamble chunk."""
    text = doc.text()
    offsets = [off for _, off in boundaries]
    if offsets != sorted(set(offsets)) or (offsets and not 0 <= offsets[0] <= offsets[-1] < len(text)):
        raise ValueError("boundaries must be strictly increasing and in range")
    if not boundaries:
        raise ValueError("no boundaries; use split_fixed instead")
    chunks = []

    def add(span_start: int, span_end: int, header: str) -> None:
        chunks.append(
            Chunk(
                id=f"{doc.id}:c{len(chunks):04d}",
                doc_id=doc.id,
                text=text[span_start:span_end],
                span=(span_start, span_end),
                header=header,
            )
        )

    if offsets[0] > 0:
        add(0, offsets[0], "preamble")
    for i, (header, offset) in enumerate(boundaries):
        end = offsets[i + 1] if i + 1 < len(offsets) else len(text)
        add(offset, end, header)
    return chunks


def chunk_document(
    doc: Document,
    provider: Provider | None = None,
    *,
    chunk_chars: int = 1000,
    overlap: int = 0,
    seed: int = 0,
) -> list[Chunk]:
    """Header-aware chunking for assignment/textbook docs when a provider is
    given, fixed-length chunking otherwise (and always for qa/logistics)."""
    if provider is not None and doc.kind in (SourceKind.ASSIGNMENT, SourceKind.TEXTBOOK):
        boundaries = detect_headers(doc, provider, seed=seed)
        if boundaries:
            return segment_by_headers(doc, boundaries)
        logger.warning("document %s: no verifiable headers; using fixed chunks", doc.id)
    return split_fixed(doc, chunk_chars, overlap)


# ---------------------------------------------------------------------------
# Summary tree construction
# ---------------------------------------------------------------------------

SUMMARY_PROMPT = (
    "Summarize the following course material in at most 120 words. Preserve "
    "document names, question numbers, and section titles exactly as written, "
    "and mention every one that appears.\n\n{content}"
)


def _summarize(provider: Provider, content: str, seed: int) -> str:
    response = chat_complete(provider, [user(SUMMARY_PROMPT.format(content=content))], seed=seed)
    summary = (response.text or "").strip()
    if not summary:
        raise RetrievalError("summarizer returned empty text")
    return summary


def build_tree(
    chunks: Sequence[Chunk],
    k: int,
    provider: Provider,
    kind: SourceKind,
    *,
    seed: int = 0,
) -> SummaryTree:
    """Recursively summarize chunks into a k-ary tree.

    Leaves keep chunk order and are summarized from chunk text; each internal
    node is summarized from its children's summaries. Grouping is contiguous
    blocks of k, so level sizes follow the ceil-division chain.
    """
    if not chunks:
        raise ValueError("chunks must be non-empty")
    if k < 2:
        raise ValueError("branching factor must be >= 2")
    prefix = chunks[0].doc_id
    nodes: dict[str, SummaryNode] = {}
    level = []
    for i, chunk in enumerate(chunks):
        content = f"Document {chunk.doc_id}, section {chunk.header or 'body'}:\n{chunk.text}"
        node = SummaryNode(
            id=f"{prefix}/L0N{i:03d}",
            summary=_summarize(provider, content, seed),
            leaf_chunk=chunk.id,
        )
        nodes[node.id] = node
        level.append(node)
    depth = 0
    while len(level) > 1:
        depth += 1
        next_level = []
        for gi in range(0, len(level), k):
            group = level[gi : gi + k]
            content = "\n\n".join(child.summary for child in group)
            node = SummaryNode(
                id=f"{prefix}/L{depth}N{gi // k:03d}",
                summary=_summarize(provider, content, seed),
                children=tuple(child.id for child in group),
            )
            nodes[node.id] = node
            next_level.append(node)
        level = next_level
    tree = SummaryTree(root=level[0].id, nodes=nodes, branching=k, kind=kind)
    tree.validate()
    return tree


@dataclass(frozen=True)
class KindIndex:
    """All per-document summary trees for one source kind, plus the chunks
    their leaves point at."""

    kind: SourceKind
    trees: tuple[SummaryTree, ...]
    chunks: dict[str, Chunk]
    provider_model: str = ""

    def validate(self) -> None:
        leaf_chunks: list[str] = []
        for tree in self.trees:
            tree.validate()
            leaf_chunks.extend(n.leaf_chunk for n in tree.leaves() if n.leaf_chunk)
        if sorted(leaf_chunks) != sorted(self.chunks):
            raise RetrievalError("chunks and tree leaves disagree")
        if len(set(leaf_chunks)) != len(leaf_chunks):
            raise RetrievalError("a chunk appears in more than one leaf")


def build_kind_index(
    corpus: Corpus,
    kind: SourceKind,
    provider: Provider,
    *,
    branching: int = 4,
    chunk_chars: int = 1000,
    overlap: int = 0,
    use_headers: bool = True,
    provider_model: str = "",
    seed: int = 0,
) -> KindIndex:
    """Chunk and index every document of one kind."""
    trees = []
    chunk_store: dict[str, Chunk] = {}
    for doc in corpus.by_kind(kind):
        chunks = chunk_document(
            doc,
            provider if use_headers else None,
            chunk_chars=chunk_chars,
            overlap=overlap,
            seed=seed,
        )
        for chunk in chunks:
            chunk_store[chunk.id] = chunk
        trees.append(build_tree(chunks, branching, provider, kind, seed=seed))
    index = KindIndex(kind=kind, trees=tuple(trees), chunks=chunk_store, provider_model=provider_model)
    index.validate()
    return index


# ---------------------------------------------------------------------------
# Table-of-contents selection and beam search
# ---------------------------------------------------------------------------

TOC_PROMPT = (
    "You are given a table of contents for course material. Each entry is "
    "'id: summary'. Select the entries most likely to contain material "
    "relevant to the student question, at most {max_select} of them. Respond "
    "with a JSON array of entry ids and nothing else.\n\n"
    "Student question: {question}\n\nTable of contents:\n{toc}"
)


def toc_select(
    trees: Sequence[SummaryTree],
    question: str,
    provider: Provider,
    max_select: int = 3,
    *,
    seed: int = 0,
) -> list[str]:
    """Pick entry trees by showing the model their root summaries.

    Returned ids are validated against the forest; invented ids are dropped
    with a warning, and a reply with no valid id at all is an error. A single
    tree is selected without any provider call.
    """
    if max_select < 1:
        raise ValueError("max_select must be >= 1")
    if not trees:
        raise ValueError("no trees to select from")
    if len(trees) == 1:
        return [trees[0].root]
    roots = {t.root: t for t in trees}
    toc = "\n".join(f"{t.root}: {t.nodes[t.root].summary}" for t in trees)
    response = chat_complete(
        provider,
        [user(TOC_PROMPT.format(max_select=max_select, question=question, toc=toc))],
        seed=seed,
    )
    raw = (response.text or "").strip()
    try:
        listed = json.loads(raw)
        candidates = [str(x) for x in listed] if isinstance(listed, list) else []
    except json.JSONDecodeError:
        candidates = [tok.strip() for tok in raw.replace(",", "\n").splitlines() if tok.strip()]
    selected = []
    for cand in candidates:
        if cand in roots and cand not in selected:
            selected.append(cand)
        elif cand not in roots:
            logger.warning("table-of-contents selection returned unknown id %r", cand)
    if not selected:
        raise RetrievalError(f"no valid entry ids in selection reply {raw[:80]!r}")
    return selected[:max_select]


def _forest_maps(
    forest: Sequence[SummaryTree],
) -> tuple[dict[str, SummaryNode], dict[str, str]]:
    nodes: dict[str, SummaryNode] = {}
    parent: dict[str, str] = {}
    for tree in forest:
        for nid, node in tree.nodes.items():
            if nid in nodes:
                raise RetrievalError(f"duplicate node id {nid!r} across forest")
            nodes[nid] = node
            for child in node.children:
                parent[child] = nid
    return nodes, parent


def beam_search(
    forest: Sequence[SummaryTree],
    entry_ids: Sequence[str],
    question: str,
    scorer: Scorer,
    beam: int,
    chunks: Mapping[str, Chunk],
) -> list[RetrievalResult]:
    """Widening beam search from the entry nodes down to leaf chunks.

    Each width performs a level-synchronous descent: score all children of
    the current beam set (leaves carry forward), keep the top ``width`` by
    score with ties broken by node id, and stop once only leaves remain. The
    final result merges the descents at widths 1..beam, so the reachable leaf
    set only ever grows with the width. Scores are memoized per node; a
    scorer failure marks the node at the floor score instead of aborting.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    nodes, parent = _forest_maps(forest)
    for entry in entry_ids:
        if entry not in nodes:
            raise RetrievalError(f"unknown entry node {entry!r}")

    cache: dict[str, float] = {}

    def score_of(nid: str) -> float:
        if nid not in cache:
            try:
                value = float(scorer(question, nodes[nid].summary))
            except Exception as exc:
                logger.warning("scorer failed on node %s (%s); flooring", nid, exc)
                value = YES_FLOOR
            cache[nid] = value
        return cache[nid]

    def descend(width: int) -> list[str]:
        current = list(entry_ids)
        while not all(nodes[nid].is_leaf for nid in current):
            candidates: list[str] = []
            for nid in current:
                node = nodes[nid]
                if node.is_leaf:
                    candidates.append(nid)
                else:
                    candidates.extend(node.children)
            candidates.sort(key=lambda nid: (-score_of(nid), nid))
            current = candidates[:width]
        return current

    reached: dict[str, float] = {}
    for width in range(1, beam + 1):
        for nid in descend(width):
            reached[nid] = score_of(nid)

    results = []
    for nid, score in reached.items():
        node = nodes[nid]
        assert node.leaf_chunk is not None
        path = [nid]
        while path[-1] in parent:
            path.append(parent[path[-1]])
        results.append(
            RetrievalResult(chunk=chunks[node.leaf_chunk], score=score, path=tuple(reversed(path)))
        )
    return _order_results(results)


def hier_gen_retrieve(
    question: str,
    indexes: Sequence[KindIndex],
    provider: Provider,
    *,
    scorer: Scorer | None = None,
    beam: int = 3,
    max_select: int = 3,
    top_k: int = 3,
    seed: int = 0,
) -> list[RetrievalResult]:
    """Full hierarchical retrieval: ToC selection, then beam descent."""
    forest: list[SummaryTree] = []
    chunks: dict[str, Chunk] = {}
    for index in indexes:
        forest.extend(index.trees)
        chunks.update(index.chunks)
    if not forest:
        raise RetrievalError("no indexed documents")
    if scorer is None:
        scorer = lambda q, summary: yes_probability(provider, q, summary, seed=seed)
    entries = toc_select(forest, question, provider, max_select, seed=seed)
    results = beam_search(forest, entries, question, scorer, beam, chunks)
    return results[:top_k]


# ---------------------------------------------------------------------------
# Vector baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorIndex:
    """Chunks with their pre-computed embedding matrix (one row per chunk)."""

    chunks: tuple[Chunk, ...]
    matrix: np.ndarray

    @classmethod
    def build(cls, chunks: Sequence[Chunk], provider: Provider) -> "VectorIndex":
        if not chunks:
            raise ValueError("chunks must be non-empty")
        vectors = embed(provider, [c.text for c in chunks])
        return cls(chunks=tuple(chunks), matrix=np.stack(vectors))


def _cosine(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    if query.shape[0] != matrix.shape[1]:
        raise RetrievalError(
            f"query dimension {query.shape[0]} != index dimension {matrix.shape[1]}"
        )
    qn = np.linalg.norm(query)
    norms = np.linalg.norm(matrix, axis=1)
    denom = np.where(norms * qn == 0.0, 1.0, norms * qn)
    return (matrix @ query) / denom


def vector_retrieve(
    question: str,
    index: VectorIndex,
    provider: Provider,
    top_k: int = 3,
) -> list[RetrievalResult]:
    """Cosine-similarity retrieval over pre-embedded chunks."""
    query = embed(provider, [question])[0]
    sims = _cosine(query, index.matrix)
    ranked = _order_results(
        RetrievalResult(chunk=c, score=float(s), path=()) for c, s in zip(index.chunks, sims)
    )
    return [
        RetrievalResult(chunk=r.chunk, score=r.score, path=(f"cosine_rank_{i + 1}",))
        for i, r in enumerate(ranked[: min(top_k, len(ranked))])
    ]


def vector_gen_retrieve(
    question: str,
    index: VectorIndex,
    provider: Provider,
    *,
    candidate_k: int = 15,
    top_k: int = 3,
    seed: int = 0,
) -> list[RetrievalResult]:
    """Cosine top-``candidate_k`` candidates reranked by yes-probability."""
    candidates = vector_retrieve(question, index, provider, top_k=candidate_k)
    rescored = [
        RetrievalResult(
            chunk=r.chunk,
            score=yes_probability(provider, question, r.chunk.text, seed=seed),
            path=r.path + ("yes_rerank",),
        )
        for r in candidates
    ]
    return _order_results(rescored)[: min(top_k, len(rescored))]


# ---------------------------------------------------------------------------
# Recall
# ---------------------------------------------------------------------------


def recall_at_k(
    results_by_question: Mapping[str, Sequence[RetrievalResult]],
    labels: Iterable[GroundTruth],
    k: int,
) -> float:
    """Mean over questions of |relevant ∩ top-k docs| / |relevant|.

    Ranked chunks are mapped to their documents and deduplicated (first
    occurrence keeps the rank) before taking the top k. Questions without
    relevance labels are excluded with a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant_by_q = {
        label.question_id: label.relevant_docs
        for label in labels
        if label.relevant_docs
    }
    recalls = []
    for qid, results in results_by_question.items():
        relevant = relevant_by_q.get(qid)
        if not relevant:
            logger.warning("question %s has no relevance labels; excluded from recall", qid)
            continue
        ranked_docs: list[str] = []
        for r in results:
            if r.chunk.doc_id not in ranked_docs:
                ranked_docs.append(r.chunk.doc_id)
        hits = relevant & set(ranked_docs[:k])
        recalls.append(len(hits) / len(relevant))
    if not recalls:
        raise ValueError("no questions with relevance labels")
    return sum(recalls) / len(recalls)


# ---------------------------------------------------------------------------
# Retriever facade and persistence
# ---------------------------------------------------------------------------


@dataclass
class CourseRetriever:
    """Per-kind retrieval backends used by the course functions.

    ``methods`` maps each source kind to one of ``hier_gen``, ``vector``, or
    ``vector_gen``; kinds default to ``hier_gen``.
    """

    provider: Provider
    hier: Mapping[SourceKind, KindIndex] = field(default_factory=dict)
    vector: Mapping[SourceKind, VectorIndex] = field(default_factory=dict)
    methods: Mapping[SourceKind, str] = field(default_factory=dict)
    scorer: Scorer | None = None
    beam: int = 3
    max_select: int = 3
    candidate_k: int = 15
    seed: int = 0

    def method_for(self, kind: SourceKind) -> str:
        return self.methods.get(kind, "hier_gen")

    def retrieve(self, kind: SourceKind, query: str, top_k: int) -> list[RetrievalResult]:
        method = self.method_for(kind)
        if method == "hier_gen":
            if kind not in self.hier:
                raise RetrievalError(f"no hierarchical index for kind {kind.value}")
            return hier_gen_retrieve(
                query,
                [self.hier[kind]],
                self.provider,
                scorer=self.scorer,
                beam=self.beam,
                max_select=self.max_select,
                top_k=top_k,
                seed=self.seed,
            )
        if method in ("vector", "vector_gen"):
            if kind not in self.vector:
                raise RetrievalError(f"no vector index for kind {kind.value}")
            if method == "vector":
                return vector_retrieve(query, self.vector[kind], self.provider, top_k=top_k)
            return vector_gen_retrieve(
                query,
                self.vector[kind],
                self.provider,
                candidate_k=self.candidate_k,
                top_k=top_k,
                seed=self.seed,
            )
        raise RetrievalError(f"unknown retrieval method {method!r}")


def save_index(index: KindIndex, directory: str | Path) -> None:
    """Persist one kind's index as nodes + manifest + chunk store JSONL."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind = index.kind.value
    with open(directory / f"{kind}.manifest.jsonl", "w", encoding="utf-8") as f:
        for tree in index.trees:
            f.write(
                json.dumps(
                    {
                        "root": tree.root,
                        "branching": tree.branching,
                        "kind": tree.kind.value,
                        "chunk_count": sum(1 for n in tree.nodes.values() if n.is_leaf),
                        "provider_model": index.provider_model,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(directory / f"{kind}.nodes.jsonl", "w", encoding="utf-8") as f:
        for tree in index.trees:
            for nid in sorted(tree.nodes):
                node = tree.nodes[nid]
                f.write(
                    json.dumps(
                        {
                            "id": node.id,
                            "summary": node.summary,
                            "children": list(node.children),
                            "leaf_chunk": node.leaf_chunk,
                            "tree_root": tree.root,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    with open(directory / f"{kind}.chunks.jsonl", "w", encoding="utf-8") as f:
        for cid in sorted(index.chunks):
            chunk = index.chunks[cid]
            f.write(
                json.dumps(
                    {
                        "id": chunk.id,
                        "doc_id": chunk.doc_id,
                        "text": chunk.text,
                        "span": list(chunk.span),
                        "header": chunk.header,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_index(directory: str | Path, kind: SourceKind) -> KindIndex:
    directory = Path(directory)
    manifests = []
    with open(directory / f"{kind.value}.manifest.jsonl", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                manifests.append(json.loads(line))
    nodes_by_tree: dict[str, dict[str, SummaryNode]] = {}
    with open(directory / f"{kind.value}.nodes.jsonl", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            node = SummaryNode(
                id=rec["id"],
                summary=rec["summary"],
                children=tuple(rec["children"]),
                leaf_chunk=rec["leaf_chunk"],
            )
            nodes_by_tree.setdefault(rec["tree_root"], {})[node.id] = node
    chunks: dict[str, Chunk] = {}
    with open(directory / f"{kind.value}.chunks.jsonl", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            chunks[rec["id"]] = Chunk(
                id=rec["id"],
                doc_id=rec["doc_id"],
                text=rec["text"],
                span=(rec["span"][0], rec["span"][1]),
                header=rec["header"],
            )
    trees = tuple(
        SummaryTree(
            root=m["root"],
            nodes=nodes_by_tree[m["root"]],
            branching=m["branching"],
            kind=SourceKind(m["kind"]),
        )
        for m in manifests
    )
    provider_model = manifests[0]["provider_model"] if manifests else ""
    index = KindIndex(kind=kind, trees=trees, chunks=chunks, provider_model=provider_model)
    index.validate()
    return index
