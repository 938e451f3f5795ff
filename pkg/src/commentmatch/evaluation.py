"""Evaluation: binned test sampling, Likert aggregation, Pearson correlation.

Model scores are joined against human-annotated pairs on
(response_id, chunk_id) and compared with the sample Pearson correlation.
Constant score series raise instead of returning 0: the coefficient is
undefined there and a silent zero would mask bugs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import RuleObservation
from .encoder import EncoderParams, embed, load_checkpoint
from .errors import (
    AnnotationError,
    ConstantSeriesError,
    CorpusFormatError,
    MissingScoreError,
    PoolShortfallError,
    ValidationError,
)
from .mining import corpus_strings
from .scoring import ScoringConfig, match_probability

LIKERT_MIN = 1
LIKERT_MAX = 5
DEFAULT_MIN_ANNOTATORS = 3
MAX_ANNOTATORS = 5

_SAMPLE_STREAM = 0xB175


@dataclass
class AnnotatedPair:
    chunk_id: str
    response_id: str
    annotator_scores: list[int]
    mean_score: float


@dataclass
class EvalReport:
    method: str
    pearson_r: float
    n_pairs: int
    rows: list[tuple[str, str, float, float]]  # (response_id, chunk_id, model, human)


def pearson(x: list[float], y: list[float]) -> float:
    """Sample Pearson correlation, two-pass (means, then centered products)."""
    if len(x) != len(y):
        raise ValidationError(f"series length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValidationError(f"need at least 2 points, got {n}")
    mean_x = math.fsum(x) / n
    mean_y = math.fsum(y) / n
    sxx = math.fsum((a - mean_x) ** 2 for a in x)
    syy = math.fsum((b - mean_y) ** 2 for b in y)
    if sxx == 0.0:
        raise ConstantSeriesError("first series is constant; correlation undefined")
    if syy == 0.0:
        raise ConstantSeriesError("second series is constant; correlation undefined")
    sxy = math.fsum((a - mean_x) * (b - mean_y) for a, b in zip(x, y))
    return min(1.0, max(-1.0, sxy / math.sqrt(sxx * syy)))


def sample_binned_test_set(
    scored_pairs: dict[tuple[str, str], float],
    per_bin: int = 10,
    threshold: float = 0.1,
    bin_width: float = 0.1,
    batches: int = 4,
    batch_size: int = 40,
    seed: int = 0,
) -> list[tuple[str, str]]:
    """Draw a score-stratified test sample.

    Pairs scoring <= threshold are discarded; survivors are binned by
    floor(score/bin_width) with at most per_bin kept per (bin, response)
    via a seeded subsample, then `batches` batches of `batch_size` are drawn
    without replacement from the pool.
    """
    for pair, score in scored_pairs.items():
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"score {score!r} for pair {pair} outside [0, 1]")

    eligible = sorted(
        (pair for pair, score in scored_pairs.items() if score > threshold)
    )
    groups: dict[tuple[str, int], list[tuple[str, str]]] = {}
    for pair in eligible:
        bin_index = math.floor(scored_pairs[pair] / bin_width)
        groups.setdefault((pair[0], bin_index), []).append(pair)

    rng = np.random.default_rng([seed, _SAMPLE_STREAM])
    pool: list[tuple[str, str]] = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) > per_bin:
            picked = rng.choice(len(members), size=per_bin, replace=False)
            members = [members[i] for i in sorted(picked)]
        pool.extend(members)

    need = batches * batch_size
    if len(pool) < need:
        raise PoolShortfallError(
            f"binned pool holds {len(pool)} pairs, need {need} "
            f"({need - len(pool)} short)"
        )
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[:need]]


def evaluate_method(
    scores: dict[tuple[str, str], float],
    annotations: list[AnnotatedPair],
    method_name: str,
) -> EvalReport:
    """Join model scores with annotations and correlate; no silent drops."""
    rows: list[tuple[str, str, float, float]] = []
    for ann in annotations:
        key = (ann.response_id, ann.chunk_id)
        if key not in scores:
            raise MissingScoreError(f"no model score for pair {key}")
        rows.append((ann.response_id, ann.chunk_id, scores[key], ann.mean_score))
    r = pearson([row[2] for row in rows], [row[3] for row in rows])
    return EvalReport(method=method_name, pearson_r=r, n_pairs=len(rows), rows=rows)


def checkpoint_scores(
    params: EncoderParams,
    corpus: list[RuleObservation],
    pairs: list[tuple[str, str]],
    alpha: float = 50.0,
) -> dict[tuple[str, str], float]:
    """Match probabilities for (response_id, chunk_id) pairs under an encoder."""
    texts = {sid: text for sid, text, _, _ in corpus_strings(corpus)}
    cfg = ScoringConfig(alpha=alpha)
    embeddings: dict[str, np.ndarray] = {}

    def embedding_of(sid: str, pair: tuple[str, str]) -> np.ndarray:
        if sid not in embeddings:
            if sid not in texts:
                raise MissingScoreError(f"pair {pair} references unknown id {sid!r}")
            embeddings[sid] = embed(texts[sid], params)
        return embeddings[sid]

    out: dict[tuple[str, str], float] = {}
    for pair in pairs:
        response_id, chunk_id = pair
        score = match_probability(
            embedding_of(chunk_id, pair), embedding_of(response_id, pair), cfg
        )
        out[pair] = score.probability
    return out


def iteration_curve(
    checkpoints: list[str | Path],
    corpus: list[RuleObservation],
    annotations: list[AnnotatedPair],
    alpha: float = 50.0,
) -> list[tuple[int, float]]:
    """Pearson r of each checkpoint (indexed 0..K) against the annotations."""
    pairs = [(ann.response_id, ann.chunk_id) for ann in annotations]
    curve: list[tuple[int, float]] = []
    for k, path in enumerate(checkpoints):
        params = load_checkpoint(path)
        scores = checkpoint_scores(params, corpus, pairs, alpha=alpha)
        report = evaluate_method(scores, annotations, f"iteration{k}")
        curve.append((k, report.pearson_r))
    return curve


def load_annotations(
    path: str | Path, min_annotators: int = DEFAULT_MIN_ANNOTATORS
) -> list[AnnotatedPair]:
    """Read `response_id,chunk_id,scores` CSV; scores are '|'-separated ints.

    The mean is recomputed, never trusted from the file.
    """
    annotations: list[AnnotatedPair] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"response_id", "chunk_id", "scores"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CorpusFormatError(
                f"{path}: annotation header must contain {sorted(required)}"
            )
        for line_no, row in enumerate(reader, start=2):
            raw_scores = (row["scores"] or "").split("|")
            try:
                scores = [int(s) for s in raw_scores]
            except ValueError as exc:
                raise AnnotationError(f"{path}:{line_no}: bad score list {row['scores']!r}") from exc
            for s in scores:
                if not LIKERT_MIN <= s <= LIKERT_MAX:
                    raise AnnotationError(
                        f"{path}:{line_no}: score {s} outside {LIKERT_MIN}..{LIKERT_MAX}"
                    )
            if not min_annotators <= len(scores) <= MAX_ANNOTATORS:
                raise AnnotationError(
                    f"{path}:{line_no}: {len(scores)} annotator scores, "
                    f"expected {min_annotators}..{MAX_ANNOTATORS}"
                )
            annotations.append(
                AnnotatedPair(
                    chunk_id=row["chunk_id"],
                    response_id=row["response_id"],
                    annotator_scores=scores,
                    mean_score=sum(scores) / len(scores),
                )
            )
    return annotations


def save_annotations(annotations: list[AnnotatedPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["response_id", "chunk_id", "scores"])
        for ann in annotations:
            writer.writerow(
                [ann.response_id, ann.chunk_id, "|".join(str(s) for s in ann.annotator_scores)]
            )


def save_scatter(report: EvalReport, path: str | Path) -> None:
    """Scatter rows; floats use 17 significant digits so re-reading is exact."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "response_id", "chunk_id", "model_score", "human_mean"])
        for response_id, chunk_id, model_score, human_mean in report.rows:
            writer.writerow(
                [report.method, response_id, chunk_id,
                 f"{model_score:.17g}", f"{human_mean:.17g}"]
            )


def save_curve(curve: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "pearson_r"])
        for iteration, r in curve:
            writer.writerow([iteration, f"{r:.17g}"])


def load_scores(path: str | Path) -> dict[tuple[str, str], float]:
    """Read a `response_id,chunk_id,score` CSV into a pair-score map."""
    scores: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"response_id", "chunk_id", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CorpusFormatError(f"{path}: score header must contain {sorted(required)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                value = float(row["score"])
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{line_no}: bad score {row['score']!r}") from exc
            scores[(row["response_id"], row["chunk_id"])] = value
    return scores


def load_pairs(path: str | Path) -> list[tuple[str, str]]:
    """Read a `response_id,chunk_id` CSV (extra columns ignored)."""
    pairs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"response_id", "chunk_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CorpusFormatError(f"{path}: pair header must contain {sorted(required)}")
        for row in reader:
            pairs.append((row["response_id"], row["chunk_id"]))
    return pairs
