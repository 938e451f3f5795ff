"""Text encoder: hashed character n-gram features behind a linear projection.

The encoder interface (featurize / embed / embed_gradient) is the seam where
a heavier backbone could attach; this reference implementation is a seeded
Gaussian projection over hashed character n-gram counts, L2-normalized so
every embedding is a unit vector. All operations are pure and deterministic
given the parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CacheMissError,
    CorpusFormatError,
    DegenerateEmbeddingError,
    DuplicateIdError,
    EmptyTextError,
)

DEFAULT_DIM = 256
DEFAULT_FEATURE_DIM = 1 << 18
DEFAULT_NGRAM_RANGE = (3, 5)

_NORM_FLOOR = 1e-12

_CHECKPOINT_FORMAT = "commentmatch-checkpoint"
_CACHE_FORMAT = "commentmatch-embcache"


@dataclass
class EncoderParams:
    projection: np.ndarray  # (d, F) float64
    hash_seed: int
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[1]


@dataclass
class FeatureVector:
    """Sparse L2-normalized hashed n-gram counts; indices sorted ascending."""

    indices: np.ndarray  # int64
    values: np.ndarray  # float64


def _hash_ngram(gram: str, hash_seed: int, feature_dim: int) -> int:
    digest = hashlib.blake2b(
        gram.encode("utf-8"),
        digest_size=8,
        key=hash_seed.to_bytes(8, "little", signed=True),
    ).digest()
    return int.from_bytes(digest, "little") % feature_dim


def featurize(text: str, params: EncoderParams) -> FeatureVector:
    """Hash the lowercased text's character n-grams into a sparse unit vector.

    Hash collisions simply add counts; no collision resolution is attempted.
    """
    stripped = text.strip()
    if not stripped:
        raise EmptyTextError("cannot featurize empty text")
    lowered = stripped.lower()
    lo, hi = params.ngram_range

    grams: Counter[str] = Counter()
    for n in range(lo, hi + 1):
        for i in range(len(lowered) - n + 1):
            grams[lowered[i : i + n]] += 1

    accum: dict[int, float] = {}
    feature_dim = params.feature_dim
    seed = params.hash_seed
    for gram, count in grams.items():
        idx = _hash_ngram(gram, seed, feature_dim)
        accum[idx] = accum.get(idx, 0.0) + count

    indices = np.array(sorted(accum), dtype=np.int64)
    values = np.array([accum[i] for i in sorted(accum)], dtype=np.float64)
    norm = math.sqrt(float(values @ values)) if values.size else 0.0
    if norm > 0.0:
        values = values / norm
    return FeatureVector(indices=indices, values=values)


def project_features(
    features: FeatureVector, params: EncoderParams
) -> tuple[np.ndarray, float]:
    """Project and normalize; returns (unit embedding, pre-normalization norm)."""
    if features.indices.size == 0:
        raise DegenerateEmbeddingError("text yields no n-gram features")
    u = params.projection[:, features.indices] @ features.values
    norm = float(np.linalg.norm(u))
    if norm < _NORM_FLOOR:
        raise DegenerateEmbeddingError(
            f"pre-normalization embedding norm {norm:.3e} below {_NORM_FLOOR:.0e}"
        )
    return u / norm, norm


def embed_features(features: FeatureVector, params: EncoderParams) -> np.ndarray:
    return project_features(features, params)[0]


def embed(text: str, params: EncoderParams) -> np.ndarray:
    return embed_features(featurize(text, params), params)


def normalization_backprop(
    v: np.ndarray, norm: float, upstream: np.ndarray
) -> np.ndarray:
    """Pull upstream back through L2 normalization: (I - v v^T) upstream / norm."""
    return (upstream - (upstream @ v) * v) / norm


def embed_features_gradient(
    features: FeatureVector,
    params: EncoderParams,
    upstream: np.ndarray,
) -> dict[int, np.ndarray]:
    """Gradient of (upstream . embed) w.r.t. the projection's touched columns.

    With u the pre-normalization output and v = u/|u|, the normalization
    Jacobian is (I - v v^T)/|u|, so projection column j receives
    ((I - v v^T) upstream / |u|) * f_j; columns with zero features carry
    no gradient and are absent from the result.
    """
    v, norm = project_features(features, params)
    g_u = normalization_backprop(v, norm, upstream)
    return {
        int(j): g_u * val for j, val in zip(features.indices, features.values)
    }


def embed_gradient(
    text: str, params: EncoderParams, upstream: np.ndarray
) -> dict[int, np.ndarray]:
    return embed_features_gradient(featurize(text, params), params, upstream)


def init_params(
    d: int = DEFAULT_DIM,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE,
    hash_seed: int | None = None,
) -> EncoderParams:
    """Seeded Gaussian projection with entries N(0, 1/feature_dim)."""
    if d < 2:
        raise ValueError(f"embedding dimension must be >= 2, got {d}")
    if feature_dim < d:
        raise ValueError(f"feature_dim {feature_dim} must be >= d {d}")
    lo, hi = ngram_range
    if not (0 < lo <= hi):
        raise ValueError(f"invalid ngram_range {ngram_range}")
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((d, feature_dim)) / math.sqrt(feature_dim)
    return EncoderParams(
        projection=projection,
        hash_seed=seed if hash_seed is None else hash_seed,
        ngram_range=(lo, hi),
    )


def params_checksum(params: EncoderParams) -> str:
    """SHA-256 over the canonical little-endian float32 projection bytes."""
    payload = np.ascontiguousarray(params.projection, dtype="<f4").tobytes()
    return hashlib.sha256(payload).hexdigest()


class EmbeddingCache:
    """Immutable id -> unit-embedding snapshot of an encoder.

    Optionally carries per-id (kind, rule_id) metadata when built from a
    corpus, which mining needs for masking. Rows are stored in id-sorted
    order.
    """

    def __init__(
        self,
        ids: list[str],
        vectors: np.ndarray,
        kinds: list[str] | None = None,
        rule_ids: list[str] | None = None,
    ):
        if len(ids) != vectors.shape[0]:
            raise ValueError("id count does not match vector rows")
        vectors.setflags(write=False)  # caches are frozen snapshots
        self.ids = ids
        self.vectors = vectors
        self.kinds = kinds
        self.rule_ids = rule_ids
        self._row = {sid: i for i, sid in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: str) -> bool:
        return sid in self._row

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, sid: str) -> int:
        try:
            return self._row[sid]
        except KeyError:
            raise CacheMissError(f"id {sid!r} not in embedding cache") from None

    def get(self, sid: str) -> np.ndarray:
        return self.vectors[self.row(sid)]

    def kind(self, sid: str) -> str:
        if self.kinds is None:
            raise CacheMissError("cache carries no kind metadata")
        return self.kinds[self.row(sid)]

    def rule_of(self, sid: str) -> str:
        if self.rule_ids is None:
            raise CacheMissError("cache carries no rule metadata")
        return self.rule_ids[self.row(sid)]

    def subset(self, keep_ids: Iterable[str]) -> "EmbeddingCache":
        keep = sorted(keep_ids)
        rows = [self.row(sid) for sid in keep]
        return EmbeddingCache(
            ids=keep,
            vectors=self.vectors[rows],
            kinds=[self.kinds[r] for r in rows] if self.kinds else None,
            rule_ids=[self.rule_ids[r] for r in rows] if self.rule_ids else None,
        )


def build_embedding_cache(
    strings: Iterable[tuple[str, str]],
    params: EncoderParams,
    threads: int = 1,
) -> EmbeddingCache:
    """Embed (id, text) pairs into an id-sorted cache; ids must be unique."""
    pairs = list(strings)
    seen: set[str] = set()
    for sid, _ in pairs:
        if sid in seen:
            raise DuplicateIdError(f"duplicate cache id {sid!r}")
        seen.add(sid)
    pairs.sort(key=lambda p: p[0])

    vectors = np.empty((len(pairs), params.dim), dtype=np.float64)

    def encode(i: int) -> None:
        sid, text = pairs[i]
        try:
            vectors[i] = embed(text, params)
        except (EmptyTextError, DegenerateEmbeddingError) as exc:
            raise exc.__class__(f"id {sid!r}: {exc}") from exc

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(encode, range(len(pairs))))
    else:
        for i in range(len(pairs)):
            encode(i)

    return EmbeddingCache(ids=[sid for sid, _ in pairs], vectors=vectors)


def _write_header(fh, fields: dict) -> None:
    fh.write((json.dumps(fields, sort_keys=True) + "\n").encode("utf-8"))


def _read_header(fh, expected_format: str) -> dict:
    line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"bad header: {exc}") from exc
    if header.get("format") != expected_format:
        raise CorpusFormatError(
            f"expected {expected_format!r} file, got {header.get('format')!r}"
        )
    return header


def save_checkpoint(params: EncoderParams, path: str | Path) -> str:
    """Write a checkpoint; all-zero columns are omitted. Returns the checksum."""
    checksum = params_checksum(params)
    nonzero = np.flatnonzero(np.any(params.projection != 0.0, axis=0))
    with open(path, "wb") as fh:
        _write_header(
            fh,
            {
                "format": _CHECKPOINT_FORMAT,
                "version": 1,
                "d": params.dim,
                "feature_dim": params.feature_dim,
                "hash_seed": params.hash_seed,
                "ngram_range": list(params.ngram_range),
                "params_checksum": checksum,
                "n_cols": int(nonzero.size),
            },
        )
        fh.write(nonzero.astype("<i8").tobytes())
        cols = np.ascontiguousarray(params.projection[:, nonzero].T, dtype="<f4")
        fh.write(cols.tobytes())
    return checksum


def load_checkpoint(path: str | Path) -> EncoderParams:
    with open(path, "rb") as fh:
        header = _read_header(fh, _CHECKPOINT_FORMAT)
        d, feature_dim = header["d"], header["feature_dim"]
        n_cols = header["n_cols"]
        indices = np.frombuffer(fh.read(8 * n_cols), dtype="<i8")
        data = np.frombuffer(fh.read(4 * n_cols * d), dtype="<f4")
    if data.size != n_cols * d:
        raise CorpusFormatError(f"checkpoint {path}: truncated column data")
    projection = np.zeros((d, feature_dim), dtype=np.float64)
    projection[:, indices] = data.reshape(n_cols, d).T
    params = EncoderParams(
        projection=projection,
        hash_seed=header["hash_seed"],
        ngram_range=tuple(header["ngram_range"]),
    )
    actual = params_checksum(params)
    if actual != header["params_checksum"]:
        raise CorpusFormatError(
            f"checkpoint {path}: checksum mismatch ({actual} != {header['params_checksum']})"
        )
    return params


def save_cache(cache: EmbeddingCache, params: EncoderParams, path: str | Path) -> None:
    """Persist a cache: JSON header, JSON id index, then float32 rows."""
    with open(path, "wb") as fh:
        _write_header(
            fh,
            {
                "format": _CACHE_FORMAT,
                "version": 1,
                "d": cache.dim,
                "count": len(cache),
                "hash_seed": params.hash_seed,
                "ngram_range": list(params.ngram_range),
                "params_checksum": params_checksum(params),
            },
        )
        fh.write((json.dumps(cache.ids) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(cache.vectors, dtype="<f4").tobytes())


def load_cache(path: str | Path) -> EmbeddingCache:
    with open(path, "rb") as fh:
        header = _read_header(fh, _CACHE_FORMAT)
        ids = json.loads(fh.readline().decode("utf-8"))
        count, d = header["count"], header["d"]
        data = np.frombuffer(fh.read(4 * count * d), dtype="<f4")
    if len(ids) != count or data.size != count * d:
        raise CorpusFormatError(f"cache {path}: truncated or inconsistent payload")
    vectors = data.reshape(count, d).astype(np.float64)
    # float32 storage perturbs norms past the unit tolerance; restore it.
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise CorpusFormatError(f"cache {path}: zero-norm row")
    return EmbeddingCache(ids=ids, vectors=vectors / norms)
