"""Iterative training loop: freeze encoder, mine, hard-sample updates, repeat.

Each iteration snapshots the encoder into a frozen cache, re-mines positive
pairs, then runs optimizer steps. A step samples a batch of anchors, builds
the loss matrix against the frozen cache, selects the hardest positive and
negative per row, and applies one decoupled-weight-decay update computed
with the *current* (drifting) parameters. The cache is only refreshed at
the next iteration boundary.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import RuleObservation
from .encoder import (
    DEFAULT_DIM,
    DEFAULT_FEATURE_DIM,
    EncoderParams,
    FeatureVector,
    init_params,
    normalization_backprop,
    project_features,
    save_checkpoint,
)
from .errors import NonFiniteError, ValidationError
from .mining import (
    build_corpus_cache,
    build_loss_matrix,
    corpus_features,
    mine_positive_pairs,
    select_hard_samples,
)
from .scoring import ScoringConfig, bce_loss, loss_gradient, match_probability

logger = logging.getLogger(__name__)

_BATCH_STREAM = 1000  # rng sub-stream offset for per-iteration batching


@dataclass
class TrainConfig:
    alpha: float = 50.0
    learning_rate: float = 1e-5
    batch_size: int = 8
    iterations: int = 5
    steps_per_iteration: int | None = None  # default: one epoch over the positive set
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    dim: int = DEFAULT_DIM
    feature_dim: int = DEFAULT_FEATURE_DIM
    ngram_min: int = 3
    ngram_max: int = 5

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("alpha, learning_rate, batch_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.steps_per_iteration is not None and self.steps_per_iteration < 0:
            raise ValueError("steps_per_iteration must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0 or self.weight_decay < 0:
            raise ValueError("adam_eps must be positive, weight_decay non-negative")

    def scoring(self) -> ScoringConfig:
        return ScoringConfig(alpha=self.alpha)


@dataclass
class OptimizerState:
    """Sparse AdamW moments keyed by projection column; step counts updates."""

    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class IterationReport:
    iteration: int
    n_positive_pairs: int
    n_steps: int
    mean_step_loss: float | None
    checkpoint_path: str
    wall_time_s: float


def apply_update(
    params: EncoderParams,
    grads: dict[int, np.ndarray],
    opt: OptimizerState,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected moment update plus decoupled decay, in place.

    Touched columns move by -lr * m_hat/(sqrt(v_hat)+eps) and are scaled by
    (1 - lr*weight_decay); untouched columns receive neither. The step
    counter is global: a column first touched at step t is still corrected
    with t.
    """
    opt.step += 1
    if not grads:
        return
    cols = sorted(grads)
    g = np.stack([grads[c] for c in cols])
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient entries in update")

    d = params.dim
    m = np.zeros((len(cols), d))
    v = np.zeros((len(cols), d))
    for i, c in enumerate(cols):
        if c in opt.m:
            m[i] = opt.m[c]
            v[i] = opt.v[c]
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g

    t = opt.step
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    step_term = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    old = params.projection[:, cols]
    new = old * (1.0 - cfg.learning_rate * cfg.weight_decay) - step_term.T
    if not np.isfinite(new).all():
        raise NonFiniteError("non-finite parameters after update")
    params.projection[:, cols] = new

    for i, c in enumerate(cols):
        opt.m[c] = m[i]
        opt.v[c] = v[i]


def _epoch_batches(pos_ids: list[str], batch_size: int, rng: np.random.Generator):
    """Yield batches forever: each epoch is one seeded permutation, sliced."""
    while True:
        perm = rng.permutation(len(pos_ids))
        for start in range(0, len(pos_ids), batch_size):
            yield [pos_ids[i] for i in perm[start : start + batch_size]]


def run_iteration(
    corpus: list[RuleObservation],
    params: EncoderParams,
    cfg: TrainConfig,
    iter_index: int,
    features: dict[str, FeatureVector] | None = None,
) -> tuple[EncoderParams, IterationReport]:
    """One mine-then-update cycle; mutates and returns params."""
    if iter_index < 1:
        raise ValueError(f"iter_index must be >= 1, got {iter_index}")
    started = time.perf_counter()
    scoring_cfg = cfg.scoring()
    if features is None:
        features = corpus_features(corpus, params)

    cache = build_corpus_cache(corpus, params, features=features)
    positives = mine_positive_pairs(corpus, cache)
    pos_ids = sorted(
        {p.response_id for p in positives} | {p.chunk_id for p in positives}
    )

    n_steps = (
        cfg.steps_per_iteration
        if cfg.steps_per_iteration is not None
        else math.ceil(len(pos_ids) / cfg.batch_size)
    )
    step_losses: list[float] = []

    if positives and n_steps > 0:
        sub_cache = cache.subset(pos_ids)
        rng = np.random.default_rng([cfg.seed, _BATCH_STREAM + iter_index])
        batches = _epoch_batches(pos_ids, cfg.batch_size, rng)
        opt = OptimizerState()

        for _ in range(n_steps):
            anchors = next(batches)
            matrix = build_loss_matrix(anchors, sub_cache, positives, scoring_cfg)
            samples = select_hard_samples(matrix)
            if not samples:
                continue
            samples = sorted(samples, key=lambda s: (s.anchor_id, s.partner_id, s.label))

            # Current-params embeddings, memoized within the step.
            embedded: dict[str, tuple[np.ndarray, float]] = {}

            def embed_current(sid: str) -> tuple[np.ndarray, float]:
                got = embedded.get(sid)
                if got is None:
                    got = project_features(features[sid], params)
                    embedded[sid] = got
                return got

            scale = 1.0 / len(samples)
            total = 0.0
            col_parts: list[np.ndarray] = []
            row_parts: list[np.ndarray] = []
            for s in samples:
                va, na = embed_current(s.anchor_id)
                vb, nb = embed_current(s.partner_id)
                score = match_probability(va, vb, scoring_cfg)
                total += bce_loss(score, s.label)
                gva, gvb = loss_gradient(va, vb, scoring_cfg, s.label)
                for sid, vec, norm, gvec in (
                    (s.anchor_id, va, na, gva),
                    (s.partner_id, vb, nb, gvb),
                ):
                    fv = features[sid]
                    g_u = normalization_backprop(vec, norm, gvec)
                    col_parts.append(fv.indices)
                    row_parts.append(np.outer(fv.values * scale, g_u))

            step_loss = total / len(samples)
            if not math.isfinite(step_loss):
                raise NonFiniteError(
                    f"iteration {iter_index} aborted: non-finite step loss"
                )
            step_losses.append(step_loss)

            all_cols = np.concatenate(col_parts)
            all_rows = np.concatenate(row_parts)
            uniq, inverse = np.unique(all_cols, return_inverse=True)
            accum = np.zeros((uniq.size, params.dim))
            np.add.at(accum, inverse, all_rows)
            grads = {int(c): accum[i] for i, c in enumerate(uniq)}
            apply_update(params, grads, opt, cfg)

    report = IterationReport(
        iteration=iter_index,
        n_positive_pairs=len(positives),
        n_steps=len(step_losses),
        mean_step_loss=(
            sum(step_losses) / len(step_losses) if step_losses else None
        ),
        checkpoint_path="",
        wall_time_s=time.perf_counter() - started,
    )
    return params, report


def train(
    corpus: list[RuleObservation],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[EncoderParams, list[IterationReport]]:
    """Run the full iterative scheme from a seeded initialization.

    Writes ckpt_iter0 (the initialization) through ckpt_iter{iterations}
    when out_dir is given. Optimizer state is reset at each iteration
    boundary; deterministic given cfg.seed.
    """
    if sum(len(r.chunks) for r in corpus) == 0:
        raise ValidationError("corpus has no chunks; chunk it before training")

    params = init_params(
        d=cfg.dim,
        feature_dim=cfg.feature_dim,
        seed=cfg.seed,
        ngram_range=(cfg.ngram_min, cfg.ngram_max),
        hash_seed=cfg.seed,
    )
    features = corpus_features(corpus, params)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out_path / "ckpt_iter0")

    reports: list[IterationReport] = []
    for k in range(1, cfg.iterations + 1):
        params, report = run_iteration(corpus, params, cfg, k, features=features)
        if out_path is not None:
            ckpt = out_path / f"ckpt_iter{k}"
            save_checkpoint(params, ckpt)
            report.checkpoint_path = str(ckpt)
        logger.info(
            "iteration %d: %d positives, %d steps, mean loss %s (%.2fs)",
            k,
            report.n_positive_pairs,
            report.n_steps,
            "n/a" if report.mean_step_loss is None else f"{report.mean_step_loss:.4f}",
            report.wall_time_s,
        )
        reports.append(report)
    return params, reports
