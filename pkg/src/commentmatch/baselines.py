"""Comparison systems: per-rule normalized BM25 and an LLM judge client.

BM25 indexes are built per rule over that rule's chunks only, scored with
responses as queries, and min-max normalized within the rule. The judge
client is transport-agnostic: tests and offline runs use a replay transport,
live runs a chat-completion HTTP transport configured from the environment.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import requests

from .corpus import RuleObservation
from .errors import JudgeReplyError, TransportError, ValidationError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

ENV_JUDGE_ENDPOINT = "COMMENTMATCH_JUDGE_ENDPOINT"
ENV_JUDGE_API_KEY = "COMMENTMATCH_JUDGE_API_KEY"
ENV_JUDGE_MODEL = "COMMENTMATCH_JUDGE_MODEL"

# Scoring-rubric prompt sent to the judge; the two fields are filled with
# the pair under evaluation.
JUDGE_PROMPT_TEMPLATE = """I will give you a pair of comment-response texts in each turn, you should give a number between 1 and 5. The number should indicate degree of overlap between the topics discussed in the two texts and how likely it is that the agency’s response text is intended as a response to the selected comment text:

1 = Incorrect match. Comment and response text are clearly discussing very different issues. The agency is definitely not responding to this comment text in the response text.

2 = Poor match. Comment and response text are somewhat related, but appear to be discussing different specific issues. It is unlikely that the agency is responding to this comment text in the response text.

3 = Partial Match. Comment and response text are discussing related issues but the degree of overlap is either imperfect or somewhat ambiguous.

4 = Good match. Comment text appears closely related to the agency’s response. It is likely that the agency is responding to this comment text.

5 = Perfect match. Comment text contains the exact argument or information that the agency is responding to in the response text. The agency is definitely responding to this specific comment text.

Note:

1. The response text could also be addressing other comments as well. This should not detract from the score. For example, if the regulator is clearly responding to two different comments A and B, and the selected comment text appears to exactly match the summary of comment A, then enter a '5'.

2. Sometimes there is a tension between recognizing that the comment is likely the one being discussed, and whether there is a good topic match. For example, both the comment and response might identify the commenter by name making it clear that this is the correct comment. However, if the topics do not match, the score should still be low (keep in mind this is only a sample of the comment text - it is likely that there is another omitted sample of the comment text that would be a better match).

Please give me the answer of the following comment-response pair in such format: number - explanation.
###
Comment Text: {comment_text}

Response Text: {response_text}"""

_REPLY_RE = re.compile(r"\s*(\d+)\s*-\s*(.*)\Z", re.DOTALL)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; no stemming."""
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


@dataclass
class Bm25Index:
    rule_id: str
    doc_ids: list[str]
    term_freqs: dict[str, Counter]
    doc_lens: dict[str, int]
    avgdl: float
    idf: dict[str, float]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B


def build_bm25_index(
    rule: RuleObservation, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> Bm25Index:
    """Inverted index over exactly one rule's chunks."""
    if not rule.chunks:
        raise ValidationError(f"rule {rule.rule_id!r} has no chunks to index")
    term_freqs: dict[str, Counter] = {}
    doc_lens: dict[str, int] = {}
    for chunk in rule.chunks:
        tokens = tokenize(chunk.text)
        term_freqs[chunk.chunk_id] = Counter(tokens)
        doc_lens[chunk.chunk_id] = len(tokens)
    n_docs = len(term_freqs)
    avgdl = sum(doc_lens.values()) / n_docs
    if avgdl <= 0:
        raise ValidationError(f"rule {rule.rule_id!r} chunks hold no tokens")

    doc_freq: Counter = Counter()
    for tf in term_freqs.values():
        doc_freq.update(tf.keys())
    idf = {
        t: math.log((n_docs - n + 0.5) / (n + 0.5) + 1.0) for t, n in doc_freq.items()
    }
    return Bm25Index(
        rule_id=rule.rule_id,
        doc_ids=[c.chunk_id for c in rule.chunks],
        term_freqs=term_freqs,
        doc_lens=doc_lens,
        avgdl=avgdl,
        idf=idf,
        k1=k1,
        b=b,
    )


def bm25_score(query_text: str, chunk_id: str, index: Bm25Index) -> float:
    """Okapi score of one indexed chunk for a response-text query.

    Sums over unique query terms; the non-negative idf variant keeps all
    scores >= 0, and a query sharing no term with the chunk scores 0.
    """
    if chunk_id not in index.term_freqs:
        raise ValidationError(f"chunk {chunk_id!r} not in rule {index.rule_id!r} index")
    tf = index.term_freqs[chunk_id]
    dl = index.doc_lens[chunk_id]
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
    score = 0.0
    for term in sorted(set(tokenize(query_text))):
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += index.idf[term] * f * (index.k1 + 1.0) / (f + norm)
    return score


def bm25_rule_scores(
    rule: RuleObservation, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> dict[tuple[str, str], float]:
    """Raw BM25 for every (response, chunk) pair of one rule."""
    index = build_bm25_index(rule, k1=k1, b=b)
    return {
        (resp.response_id, chunk.chunk_id): bm25_score(resp.text, chunk.chunk_id, index)
        for resp in rule.responses
        for chunk in rule.chunks
    }


def normalize_per_rule(
    scores: dict[tuple[str, str], float], rule_id: str
) -> dict[tuple[str, str], float]:
    """Min-max normalize one rule's scores into [0, 1]; all-equal maps to 0."""
    if not scores:
        raise ValidationError(f"no scores to normalize for rule {rule_id!r}")
    lo = min(scores.values())
    hi = max(scores.values())
    if hi == lo:
        return {pair: 0.0 for pair in scores}
    span = hi - lo
    return {pair: (value - lo) / span for pair, value in scores.items()}


def bm25_corpus_scores(
    corpus: list[RuleObservation], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> dict[tuple[str, str], float]:
    """Per-rule normalized BM25 over the whole corpus."""
    out: dict[tuple[str, str], float] = {}
    for rule in corpus:
        if not rule.responses or not rule.chunks:
            continue
        out.update(normalize_per_rule(bm25_rule_scores(rule, k1=k1, b=b), rule.rule_id))
    return out


@dataclass
class JudgeVerdict:
    score: int
    explanation: str
    raw_reply: str


def build_judge_prompt(
    comment_text: str, response_text: str, template: str = JUDGE_PROMPT_TEMPLATE
) -> str:
    return template.format(comment_text=comment_text, response_text=response_text)


def parse_judge_reply(raw: str) -> JudgeVerdict:
    """Parse a 'number - explanation' reply; anything else is an error."""
    match = _REPLY_RE.match(raw)
    if match is None:
        raise JudgeReplyError(f"cannot parse judge reply: {raw!r}", raw_reply=raw)
    score = int(match.group(1))
    if not 1 <= score <= 5:
        raise JudgeReplyError(f"judge score {score} outside 1..5", raw_reply=raw)
    return JudgeVerdict(score=score, explanation=match.group(2).strip(), raw_reply=raw)


def judge_pair(
    comment_text: str,
    response_text: str,
    transport: Callable[[str], str],
    template: str = JUDGE_PROMPT_TEMPLATE,
) -> JudgeVerdict:
    """Prompt the judge with one pair and parse its verdict."""
    prompt = build_judge_prompt(comment_text, response_text, template)
    return parse_judge_reply(transport(prompt))


class ReplayTransport:
    """Serves recorded replies in order; no network involved."""

    def __init__(self, replies: list[str]):
        self._replies = list(replies)
        self._next = 0

    def __call__(self, prompt: str) -> str:
        if self._next >= len(self._replies):
            raise TransportError(
                f"replay fixture exhausted after {len(self._replies)} replies"
            )
        reply = self._replies[self._next]
        self._next += 1
        return reply

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ReplayTransport":
        """Fixture: JSONL, one {"reply": ...} per line, consumed in order."""
        replies = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if "reply" not in record:
                    raise ValidationError(f"{path}:{line_no}: fixture line lacks 'reply'")
                replies.append(record["reply"])
        return cls(replies)


class HttpChatTransport:
    """Single-user-message chat-completion client.

    Endpoint and credential come from the environment unless passed
    explicitly; outbound requests are serialized by an optional
    requests-per-minute limit, and request/response bodies are appended to
    an audit JSONL file when configured.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        requests_per_minute: float | None = None,
        audit_path: str | Path | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_JUDGE_ENDPOINT)
        if not self.endpoint:
            raise ValidationError(
                f"judge endpoint not configured (set {ENV_JUDGE_ENDPOINT})"
            )
        self.api_key = api_key or os.environ.get(ENV_JUDGE_API_KEY)
        if not self.api_key:
            raise ValidationError(
                f"judge credential not configured (set {ENV_JUDGE_API_KEY})"
            )
        self.model = model or os.environ.get(ENV_JUDGE_MODEL, "gpt-4")
        self.min_interval = (
            60.0 / requests_per_minute if requests_per_minute else 0.0
        )
        self.audit_path = Path(audit_path) if audit_path else None
        self.timeout = timeout
        self._last_request = 0.0

    def __call__(self, prompt: str) -> str:
        if self.min_interval:
            wait = self._last_request + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            response = requests.post(
                self.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            self._last_request = time.monotonic()
            response.raise_for_status()
            payload = response.json()
        except requests.RequestException as exc:
            raise TransportError(f"judge request failed: {exc}") from exc
        self._audit(body, payload)
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed judge response: {payload!r}") from exc

    def _audit(self, request_body: dict, response_body: object) -> None:
        if self.audit_path is None:
            return
        with open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps({"request": request_body, "response": response_body}) + "\n"
            )
