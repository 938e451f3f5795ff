"""Rule-observation data model, ingestion, chunking, and synthetic corpora.

A corpus is a list of rule observations. Each observation groups one rule's
regulator responses with the public comment documents linked to that rule;
comment documents are split into 500-1000 character chunks which are the
unit matched against responses. Corpus files are UTF-8 JSON lines, one rule
observation per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusFormatError, DuplicateIdError, IntegrityError

DEFAULT_MIN_CHUNK_CHARS = 500
DEFAULT_MAX_CHUNK_CHARS = 1000

MAX_COMMENTS_PER_RULE = 10
MAX_RESPONSES_PER_RULE = 10
MAX_UNIQUE_PARAGRAPHS = 1000

# Shared across every synthetic rule; the only cross-rule vocabulary.
SYNTH_STOPWORDS = (
    "the", "of", "and", "to", "in", "that", "for", "is", "on", "with",
    "as", "by", "this", "be", "are", "or",
)


@dataclass
class Response:
    response_id: str
    rule_id: str
    text: str


@dataclass
class CommentDocument:
    comment_id: str
    rule_id: str
    paragraphs: list[str]


@dataclass
class CommentChunk:
    chunk_id: str
    comment_id: str
    rule_id: str
    text: str
    char_len: int


@dataclass
class RuleObservation:
    rule_id: str
    responses: list[Response]
    comments: list[CommentDocument]
    chunks: list[CommentChunk] = field(default_factory=list)


@dataclass
class CorpusStats:
    n_rules: int
    n_responses: int
    n_comments: int
    n_chunks: int


def chunk_document(
    doc: CommentDocument,
    min_len: int = DEFAULT_MIN_CHUNK_CHARS,
    max_len: int = DEFAULT_MAX_CHUNK_CHARS,
) -> list[CommentChunk]:
    """Greedily group a document's paragraphs into chunks.

    Paragraphs are accumulated (joined with a single newline) until the
    accumulation reaches ``min_len`` characters or appending the next
    paragraph would push it past ``max_len``; either event emits a chunk.
    A paragraph longer than ``max_len`` on its own is emitted as a single
    chunk. The trailing accumulation is emitted even when short, so every
    paragraph lands in exactly one chunk.
    """
    if min_len >= max_len:
        raise ValueError(f"min_len must be < max_len, got {min_len} >= {max_len}")

    chunks: list[CommentChunk] = []
    acc: list[str] = []
    acc_len = 0

    def flush() -> None:
        nonlocal acc, acc_len
        if not acc:
            return
        text = "\n".join(acc)
        chunks.append(
            CommentChunk(
                chunk_id=f"{doc.comment_id}/ch{len(chunks):03d}",
                comment_id=doc.comment_id,
                rule_id=doc.rule_id,
                text=text,
                char_len=len(text),
            )
        )
        acc = []
        acc_len = 0

    for para in doc.paragraphs:
        plen = len(para)
        if plen > max_len:
            flush()
            acc, acc_len = [para], plen
            flush()
            continue
        if acc and acc_len + 1 + plen > max_len:
            flush()
        acc.append(para)
        acc_len = acc_len + 1 + plen if acc_len else plen
        if acc_len >= min_len:
            flush()
    flush()
    return chunks


def chunk_corpus(
    corpus: list[RuleObservation],
    min_len: int = DEFAULT_MIN_CHUNK_CHARS,
    max_len: int = DEFAULT_MAX_CHUNK_CHARS,
) -> list[RuleObservation]:
    """Populate each rule's chunk list from its comment documents."""
    for rule in corpus:
        rule.chunks = [
            chunk
            for doc in rule.comments
            for chunk in chunk_document(doc, min_len, max_len)
        ]
    return corpus


def filter_rules(
    corpus: list[RuleObservation],
) -> tuple[list[RuleObservation], CorpusStats]:
    """Apply the training-sample constraints.

    Keeps rules with 1-10 comments and fewer than 1000 unique comment
    paragraphs; each kept rule retains at most its first 10 responses.
    Returns the surviving corpus and its stats.
    """
    kept: list[RuleObservation] = []
    for rule in corpus:
        if not 1 <= len(rule.comments) <= MAX_COMMENTS_PER_RULE:
            continue
        unique_paragraphs = {p for doc in rule.comments for p in doc.paragraphs}
        if len(unique_paragraphs) >= MAX_UNIQUE_PARAGRAPHS:
            continue
        rule.responses = rule.responses[:MAX_RESPONSES_PER_RULE]
        kept.append(rule)
    return kept, corpus_stats(kept)


def corpus_stats(corpus: list[RuleObservation]) -> CorpusStats:
    return CorpusStats(
        n_rules=len(corpus),
        n_responses=sum(len(r.responses) for r in corpus),
        n_comments=sum(len(r.comments) for r in corpus),
        n_chunks=sum(len(r.chunks) for r in corpus),
    )


def _require(cond: bool, line_no: int, msg: str) -> None:
    if not cond:
        raise CorpusFormatError(f"line {line_no}: {msg}")


def _parse_rule(record: dict, line_no: int) -> RuleObservation:
    _require(isinstance(record, dict), line_no, "rule record must be an object")
    rule_id = record.get("rule_id")
    _require(isinstance(rule_id, str) and rule_id != "", line_no, "missing rule_id")

    responses = []
    seen_resp: set[str] = set()
    for raw in record.get("responses", []):
        rid = raw.get("response_id")
        text = raw.get("text")
        _require(isinstance(rid, str) and rid != "", line_no, "response missing response_id")
        _require(isinstance(text, str) and text.strip() != "", line_no,
                 f"response {rid!r} has empty text")
        if rid in seen_resp:
            raise DuplicateIdError(f"line {line_no}: duplicate response_id {rid!r}")
        seen_resp.add(rid)
        responses.append(Response(response_id=rid, rule_id=rule_id, text=text))

    comments = []
    seen_com: set[str] = set()
    for raw in record.get("comments", []):
        cid = raw.get("comment_id")
        paragraphs = raw.get("paragraphs")
        _require(isinstance(cid, str) and cid != "", line_no, "comment missing comment_id")
        _require(isinstance(paragraphs, list), line_no, f"comment {cid!r} missing paragraphs")
        for p in paragraphs:
            _require(isinstance(p, str) and p != "", line_no,
                     f"comment {cid!r} has an empty paragraph")
        if cid in seen_com:
            raise DuplicateIdError(f"line {line_no}: duplicate comment_id {cid!r}")
        seen_com.add(cid)
        comments.append(CommentDocument(comment_id=cid, rule_id=rule_id, paragraphs=paragraphs))

    chunks = []
    seen_chunk: set[str] = set()
    for raw in record.get("chunks", []):
        kid = raw.get("chunk_id")
        cid = raw.get("comment_id")
        text = raw.get("text")
        _require(isinstance(kid, str) and kid != "", line_no, "chunk missing chunk_id")
        _require(isinstance(text, str) and text != "", line_no, f"chunk {kid!r} has empty text")
        if cid not in seen_com:
            raise IntegrityError(
                f"line {line_no}: chunk {kid!r} references unknown comment_id {cid!r}"
            )
        if kid in seen_chunk:
            raise DuplicateIdError(f"line {line_no}: duplicate chunk_id {kid!r}")
        seen_chunk.add(kid)
        chunks.append(
            CommentChunk(chunk_id=kid, comment_id=cid, rule_id=rule_id,
                         text=text, char_len=len(text))
        )

    return RuleObservation(rule_id=rule_id, responses=responses,
                           comments=comments, chunks=chunks)


def load_corpus(path: str | Path) -> list[RuleObservation]:
    """Load and validate a JSONL corpus file.

    Rejects duplicate ids (rules globally; responses/comments/chunks across
    the whole file, since they key embedding caches) and chunks that
    reference a comment_id absent from their rule.
    """
    corpus: list[RuleObservation] = []
    seen_rules: set[str] = set()
    seen_global: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: invalid JSON: {exc}") from exc
            rule = _parse_rule(record, line_no)
            if rule.rule_id in seen_rules:
                raise DuplicateIdError(f"line {line_no}: duplicate rule_id {rule.rule_id!r}")
            seen_rules.add(rule.rule_id)
            for sid in ([r.response_id for r in rule.responses]
                        + [c.chunk_id for c in rule.chunks]):
                if sid in seen_global:
                    raise DuplicateIdError(f"line {line_no}: id {sid!r} reused across rules")
                seen_global.add(sid)
            corpus.append(rule)
    return corpus


def save_corpus(corpus: list[RuleObservation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rule in corpus:
            record = {
                "rule_id": rule.rule_id,
                "responses": [
                    {"response_id": r.response_id, "text": r.text} for r in rule.responses
                ],
                "comments": [
                    {"comment_id": c.comment_id, "paragraphs": c.paragraphs}
                    for c in rule.comments
                ],
            }
            if rule.chunks:
                record["chunks"] = [
                    {"chunk_id": k.chunk_id, "comment_id": k.comment_id, "text": k.text}
                    for k in rule.chunks
                ]
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _synth_text(rng: np.random.Generator, content_pool: list[str],
                n_content: int, n_stop: int) -> str:
    tokens = [content_pool[i] for i in rng.integers(0, len(content_pool), n_content)]
    tokens += [SYNTH_STOPWORDS[i] for i in rng.integers(0, len(SYNTH_STOPWORDS), n_stop)]
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def _planted_paragraph(rng: np.random.Generator, response_tokens: list[str],
                       filler_pool: list[str]) -> str:
    # 70% of content tokens drawn from the response itself, rest filler;
    # comfortably above the 60% overlap the planted pair promises.
    n_from_resp, n_fill, n_stop = 49, 21, 8
    tokens = [response_tokens[i] for i in rng.integers(0, len(response_tokens), n_from_resp)]
    tokens += [filler_pool[i] for i in rng.integers(0, len(filler_pool), n_fill)]
    tokens += [SYNTH_STOPWORDS[i] for i in rng.integers(0, len(SYNTH_STOPWORDS), n_stop)]
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def generate_synthetic_corpus(
    n_rules: int,
    chunks_per_rule: int,
    responses_per_rule: int,
    vocab_topics: int,
    seed: int,
) -> tuple[list[RuleObservation], dict[tuple[str, str], float]]:
    """Build a seeded corpus with planted ground-truth relevance.

    Each response gets one topic drawn from a rule-local vocabulary, and
    exactly one chunk built mostly from that response's own tokens (planted
    relevance 1.0). Remaining chunks are rule-local filler; every other
    (response, same-rule chunk) pair gets a relevance drawn from [0, 0.4].
    Content vocabularies are disjoint across rules, so cross-rule overlap
    is limited to the shared stop words.

    Returns the chunked corpus and the planted relevance map keyed by
    (response_id, chunk_id).
    """
    if min(n_rules, chunks_per_rule, responses_per_rule, vocab_topics) <= 0:
        raise ValueError("all synthetic corpus counts must be positive")
    if chunks_per_rule < responses_per_rule:
        raise ValueError("need chunks_per_rule >= responses_per_rule to plant one chunk per response")

    rng = np.random.default_rng([seed, 0x5E_ED])
    words_per_topic = 24
    paragraphs_per_comment = 5

    corpus: list[RuleObservation] = []
    planted: dict[tuple[str, str], float] = {}

    for g in range(n_rules):
        rule_id = f"rule{g:04d}"
        topic_words = [
            [f"r{g:04d}t{t:02d}w{i:02d}" for i in range(words_per_topic)]
            for t in range(vocab_topics)
        ]
        filler_pool = [f"r{g:04d}fw{i:02d}" for i in range(40)]

        # Distinct topics per response when the vocabulary allows it.
        perm = rng.permutation(vocab_topics)
        topics = [int(perm[j % vocab_topics]) for j in range(responses_per_rule)]

        responses = []
        for j in range(responses_per_rule):
            text = _synth_text(rng, topic_words[topics[j]], n_content=55, n_stop=10)
            responses.append(
                Response(response_id=f"{rule_id}/resp{j:02d}", rule_id=rule_id, text=text)
            )

        # One paragraph per chunk; every paragraph is >= 500 chars so the
        # greedy chunker maps paragraphs to chunks one-to-one.
        paragraphs = []
        for j, resp in enumerate(responses):
            content = [t for t in resp.text.split(" ") if t not in SYNTH_STOPWORDS]
            paragraphs.append(_planted_paragraph(rng, content, filler_pool))
        for _ in range(chunks_per_rule - responses_per_rule):
            paragraphs.append(_synth_text(rng, filler_pool, n_content=62, n_stop=8))
        # paragraphs[j] is planted for responses[j]; scatter them through the rule
        position = rng.permutation(chunks_per_rule)

        ordered = [""] * chunks_per_rule
        for src, dst in enumerate(position):
            ordered[dst] = paragraphs[src]

        comments = []
        for k in range(0, chunks_per_rule, paragraphs_per_comment):
            comment_id = f"{rule_id}/com{k // paragraphs_per_comment:02d}"
            comments.append(
                CommentDocument(comment_id=comment_id, rule_id=rule_id,
                                paragraphs=ordered[k:k + paragraphs_per_comment])
            )

        rule = RuleObservation(rule_id=rule_id, responses=responses, comments=comments)
        rule.chunks = [
            chunk for doc in rule.comments for chunk in chunk_document(doc)
        ]
        assert len(rule.chunks) == chunks_per_rule

        # position[j] is the rule-wide index of response j's planted chunk.
        for j, resp in enumerate(responses):
            planted_idx = int(position[j])
            for idx, chunk in enumerate(rule.chunks):
                if idx == planted_idx:
                    planted[(resp.response_id, chunk.chunk_id)] = 1.0
                else:
                    planted[(resp.response_id, chunk.chunk_id)] = float(
                        rng.uniform(0.0, 0.4)
                    )
        corpus.append(rule)

    return corpus, planted
