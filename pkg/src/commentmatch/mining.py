"""Positive-pair mining and in-batch hard sample selection.

Positives are pseudo-labels: for each response, the most similar comment
chunk within the same rule under a frozen encoder snapshot. Hard samples
come from a loss matrix pairing a batch of anchors against every cached
string; per row, the highest-loss positive (a matched pair the model scores
low) and the highest-loss negative (a cross-rule pair it scores high) are
selected.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import RuleObservation
from .encoder import (
    EmbeddingCache,
    EncoderParams,
    FeatureVector,
    embed_features,
    featurize,
)
from .errors import CacheMissError, DuplicateIdError, ValidationError
from .scoring import NEGATIVE, POSITIVE, PROB_EPS, ScoringConfig

logger = logging.getLogger(__name__)

KIND_RESPONSE = "response"
KIND_CHUNK = "chunk"


@dataclass(frozen=True)
class PositivePair:
    response_id: str
    chunk_id: str
    cosine_similarity: float
    rule_id: str


@dataclass(frozen=True)
class HardSample:
    anchor_id: str
    partner_id: str
    label: str  # POSITIVE or NEGATIVE
    loss: float


@dataclass
class LossMatrix:
    """Per-pair BCE losses for a batch of anchors against all cached strings.

    masked entries are same-kind pairs, self pairs, and same-rule pairs that
    are not mined positives; labels holds True where the pair is a positive.
    """

    anchor_ids: list[str]
    col_ids: list[str]
    losses: np.ndarray  # (M, N) float64
    labels: np.ndarray  # (M, N) bool
    masked: np.ndarray  # (M, N) bool


def corpus_strings(
    corpus: list[RuleObservation],
) -> list[tuple[str, str, str, str]]:
    """Flatten to (id, text, kind, rule_id) tuples, responses then chunks."""
    out = []
    for rule in corpus:
        for resp in rule.responses:
            out.append((resp.response_id, resp.text, KIND_RESPONSE, rule.rule_id))
        for chunk in rule.chunks:
            out.append((chunk.chunk_id, chunk.text, KIND_CHUNK, rule.rule_id))
    return out


def corpus_features(
    corpus: list[RuleObservation], params: EncoderParams
) -> dict[str, FeatureVector]:
    """Featurize every corpus string once; reusable across encoder updates."""
    return {sid: featurize(text, params) for sid, text, _, _ in corpus_strings(corpus)}


def build_corpus_cache(
    corpus: list[RuleObservation],
    params: EncoderParams,
    features: dict[str, FeatureVector] | None = None,
    threads: int = 1,
) -> EmbeddingCache:
    """Embed every response and chunk into a metadata-carrying cache."""
    entries = sorted(corpus_strings(corpus), key=lambda e: e[0])
    seen: set[str] = set()
    for sid, _, _, _ in entries:
        if sid in seen:
            raise DuplicateIdError(f"duplicate string id {sid!r} in corpus")
        seen.add(sid)

    vectors = np.empty((len(entries), params.dim), dtype=np.float64)

    def encode(i: int) -> None:
        sid, text, _, _ = entries[i]
        fv = features[sid] if features is not None else featurize(text, params)
        vectors[i] = embed_features(fv, params)

    if threads > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(encode, range(len(entries))))
    else:
        for i in range(len(entries)):
            encode(i)

    return EmbeddingCache(
        ids=[e[0] for e in entries],
        vectors=vectors,
        kinds=[e[2] for e in entries],
        rule_ids=[e[3] for e in entries],
    )


def mine_positive_pairs(
    corpus: list[RuleObservation], cache: EmbeddingCache
) -> list[PositivePair]:
    """For each response, its most similar same-rule chunk under the cache.

    Ties break to the lexicographically smallest chunk_id. Responses whose
    rule has no chunks are skipped (counted in a warning). Output is sorted
    by (rule_id, response_id), so it is invariant to corpus order.
    """
    pairs: list[PositivePair] = []
    skipped = 0
    for rule in corpus:
        chunk_ids = sorted(c.chunk_id for c in rule.chunks)
        if not chunk_ids:
            skipped += len(rule.responses)
            continue
        chunk_matrix = cache.vectors[[cache.row(cid) for cid in chunk_ids]]
        for resp in rule.responses:
            sims = chunk_matrix @ cache.get(resp.response_id)
            best = int(np.argmax(sims))  # first max = smallest chunk_id
            pairs.append(
                PositivePair(
                    response_id=resp.response_id,
                    chunk_id=chunk_ids[best],
                    cosine_similarity=float(sims[best]),
                    rule_id=rule.rule_id,
                )
            )
    if skipped:
        logger.warning("skipped %d responses with no same-rule chunks", skipped)
    pairs.sort(key=lambda p: (p.rule_id, p.response_id))
    return pairs


def build_loss_matrix(
    anchor_ids: list[str],
    cache: EmbeddingCache,
    positives: list[PositivePair],
    cfg: ScoringConfig,
) -> LossMatrix:
    """Score a batch of anchors against every cached string.

    Labels: positive iff the (response, chunk) pair was mined; negative iff
    the pair crosses rules. Same-kind pairs, self pairs, and same-rule pairs
    that are not positives are masked out.
    """
    if cache.kinds is None or cache.rule_ids is None:
        raise ValidationError("loss matrix requires a cache with kind/rule metadata")
    rows = [cache.row(a) for a in anchor_ids]  # raises CacheMissError

    anchors = cache.vectors[rows]
    sims = np.clip(anchors @ cache.vectors.T, -1.0, 1.0)
    probs = np.exp(-cfg.alpha * (1.0 - sims))
    probs = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)

    kinds = np.array(cache.kinds)
    rules = np.array(cache.rule_ids)
    ids = np.array(cache.ids)

    # pos_by[(anchor)] -> partner ids mined with it, regardless of side
    pos_partners: dict[str, set[str]] = {}
    for p in positives:
        pos_partners.setdefault(p.response_id, set()).add(p.chunk_id)
        pos_partners.setdefault(p.chunk_id, set()).add(p.response_id)

    n = len(cache)
    labels = np.zeros((len(anchor_ids), n), dtype=bool)
    masked = np.zeros((len(anchor_ids), n), dtype=bool)
    for i, (aid, arow) in enumerate(zip(anchor_ids, rows)):
        for partner in pos_partners.get(aid, ()):
            if partner in cache:
                labels[i, cache.row(partner)] = True
        same_kind = kinds == kinds[arow]
        same_rule = rules == rules[arow]
        masked[i] = same_kind | (ids == aid) | (same_rule & ~labels[i])

    losses = np.where(labels, -np.log(probs), -np.log(1.0 - probs))
    return LossMatrix(
        anchor_ids=list(anchor_ids),
        col_ids=list(cache.ids),
        losses=losses,
        labels=labels,
        masked=masked,
    )


def select_hard_samples(matrix: LossMatrix) -> list[HardSample]:
    """Per row, the maximum-loss unmasked positive and negative entries.

    Ties break to the smallest column id (columns are id-sorted, argmax
    returns the first maximum). Fully masked rows are skipped with a
    warning.
    """
    samples: list[HardSample] = []
    skipped = 0
    for i, anchor_id in enumerate(matrix.anchor_ids):
        usable = ~matrix.masked[i]
        row_hit = False
        for want_positive, label in ((True, POSITIVE), (False, NEGATIVE)):
            eligible = usable & (matrix.labels[i] == want_positive)
            if not eligible.any():
                continue
            row_hit = True
            candidate = np.where(eligible, matrix.losses[i], -np.inf)
            j = int(np.argmax(candidate))
            samples.append(
                HardSample(
                    anchor_id=anchor_id,
                    partner_id=matrix.col_ids[j],
                    label=label,
                    loss=float(candidate[j]),
                )
            )
        if not row_hit:
            skipped += 1
    if skipped:
        logger.warning("skipped %d fully masked loss-matrix rows", skipped)
    return samples


def save_positive_pairs(pairs: list[PositivePair], path: str | Path) -> None:
    """Audit export: one CSV row per mined pair."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["response_id", "chunk_id", "cosine_similarity", "rule_id"])
        for p in pairs:
            writer.writerow(
                [p.response_id, p.chunk_id, f"{p.cosine_similarity:.17g}", p.rule_id]
            )
