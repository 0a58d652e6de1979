"""Cosine-similarity ranking of prompt-list labels against feature vectors.

Both operands are unit-normalised once and similarities are plain dot
products, computed in fixed-size row chunks so results do not depend on
how callers batch their inputs or on worker counts. Ties are always broken
by ascending prompt-list index. Zero-norm feature rows are tolerated: they
rank every label at similarity 0.0 (index order) and are reported through
a warning rather than rejected, since upstream pipelines occasionally emit
them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputFormatError, MetricDomainError
from .validation import as_feature_matrix

# Rows per similarity block. Fixed (never input-dependent) so that BLAS
# sees identical sub-problems regardless of caller batching; block results
# were verified bit-identical under different splits >= 64 rows.
_CHUNK_ROWS = 2048

# Flattened (row, label) pairs per rank-lookup block, bounding the size of
# the broadcast comparison buffers.
_PAIR_BLOCK = 1 << 22


@dataclass
class LabelEmbeddings:
    """Embedding matrix with one row per prompt-list label."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = as_feature_matrix(self.vectors, "embeddings")
        if len(self.vectors) == 0:
            raise InputFormatError("embeddings must contain at least one row")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0.0):
            raise InputFormatError("embeddings contain zero-norm rows")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class RankedLabelList:
    """Full descending ranking of all prompt labels for one feature vector.

    ``indices[k]`` is the prompt index at rank k+1; ``similarities`` is
    aligned with ``indices`` and non-increasing (ties sorted by ascending
    prompt index).
    """

    indices: np.ndarray
    similarities: np.ndarray

    def rank_of(self, label_index: int) -> int:
        """1-based rank of a prompt label."""
        pos = np.flatnonzero(self.indices == label_index)
        if pos.size == 0:
            raise MetricDomainError(f"label index {label_index} not in ranking")
        return int(pos[0]) + 1


def _unit_rows(matrix: np.ndarray, dtype) -> tuple[np.ndarray, int]:
    out = np.ascontiguousarray(matrix, dtype=dtype)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    zero = norms == 0.0
    n_zero = int(zero.sum())
    norms[zero] = 1.0
    return out / norms, n_zero


def prepare_embeddings(embeddings: LabelEmbeddings, compute_dtype="float32") -> np.ndarray:
    """Unit-normalised, transposed embedding matrix ready for dot products."""
    dtype = np.dtype(compute_dtype)
    if dtype not in (np.float32, np.float64):
        raise InputFormatError("compute_dtype must be float32 or float64")
    unit, _ = _unit_rows(embeddings.vectors, dtype)
    return np.ascontiguousarray(unit.T)


def similarity_block(features_block: np.ndarray, prepared_emb_t: np.ndarray) -> tuple[np.ndarray, int]:
    """Cosine similarities of one feature block against prepared embeddings.

    Returns ``(sims, n_zero_rows)``; zero-norm rows yield all-zero
    similarities. Normalisation is row-local, so block boundaries never
    influence the values.
    """
    dtype = prepared_emb_t.dtype
    if features_block.shape[1] != prepared_emb_t.shape[0]:
        raise InputFormatError(
            f"feature dimension {features_block.shape[1]} != embedding dimension "
            f"{prepared_emb_t.shape[0]}"
        )
    unit, n_zero = _unit_rows(features_block, dtype)
    return unit @ prepared_emb_t, n_zero


def iter_similarity_chunks(features, embeddings: LabelEmbeddings, compute_dtype="float32"):
    """Yield ``(start, stop, sims)`` blocks of the cosine-similarity matrix."""
    features = as_feature_matrix(features)
    emb_t = prepare_embeddings(embeddings, compute_dtype)
    n_zero = 0
    for start in range(0, len(features), _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, len(features))
        sims, z = similarity_block(features[start:stop], emb_t)
        n_zero += z
        yield start, stop, sims
    if n_zero:
        warnings.warn(
            f"{n_zero} feature row(s) have zero norm; they rank all labels as ties",
            stacklevel=2,
        )


# ---------------------------------------------------------------------------
# ranking kernels (shared with the segmentation engine)


def sort_descending(sims: np.ndarray) -> np.ndarray:
    """Full argsort by descending similarity, ties by ascending index."""
    return np.argsort(-sims, axis=1, kind="stable")


def top_n_from_sims(sims: np.ndarray, n: int) -> np.ndarray:
    """First n ranks per row, identical to ``sort_descending(sims)[:, :n]``.

    Uses argpartition for O(L) selection and repairs tie ambiguity at the
    selection boundary so equal similarities resolve to the lowest indices.
    """
    n_rows, n_labels = sims.shape
    if n >= n_labels:
        return sort_descending(sims)[:, :n]
    cand = np.argpartition(-sims, n - 1, axis=1)[:, :n]
    rows = np.arange(n_rows)[:, None]
    nth_value = sims[rows, cand].min(axis=1)
    ambiguous = np.flatnonzero((sims >= nth_value[:, None]).sum(axis=1) > n)
    for r in ambiguous:
        v = nth_value[r]
        greater = np.flatnonzero(sims[r] > v)
        equal = np.flatnonzero(sims[r] == v)
        cand[r] = np.concatenate([greater, equal[: n - len(greater)]])
    cand.sort(axis=1)
    order = np.argsort(-sims[rows, cand], axis=1, kind="stable")
    return cand[rows, order]


def ranks_from_sims(sims: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """1-based ranks of specific (row, label) picks within each row's ranking.

    rank = 1 + #(labels with higher similarity)
             + #(equal-similarity labels with a lower index).
    """
    out = np.empty(len(rows), dtype=np.int64)
    if len(rows) == 0:
        return out
    label_range = np.arange(sims.shape[1])
    block = max(1, _PAIR_BLOCK // max(1, sims.shape[1]))
    for start in range(0, len(rows), block):
        sl = slice(start, min(start + block, len(rows)))
        r = rows[sl]
        c = cols[sl]
        s = sims[r, c][:, None]
        row_sims = sims[r]
        greater = (row_sims > s).sum(axis=1)
        eq_before = ((row_sims == s) & (label_range[None, :] < c[:, None])).sum(axis=1)
        out[sl] = 1 + greater + eq_before
    return out


# ---------------------------------------------------------------------------
# contract operations


def rank_labels(features, embeddings: LabelEmbeddings, compute_dtype="float32"):
    """Full descending ranking of all prompt labels for each feature row.

    Materialises one :class:`RankedLabelList` per row; for very large
    inputs prefer :func:`top_n_indices` / :func:`label_ranks`, which agree
    with this ranking by construction.
    """
    out: list[RankedLabelList] = []
    for _, _, sims in iter_similarity_chunks(features, embeddings, compute_dtype):
        order = sort_descending(sims)
        values = np.take_along_axis(sims, order, axis=1)
        out.extend(RankedLabelList(order[i], values[i]) for i in range(len(order)))
    return out


def top_n(ranked: RankedLabelList, n: int) -> np.ndarray:
    """First n entries of a ranking."""
    if not 1 <= n <= len(ranked.indices):
        raise MetricDomainError(f"n={n} outside [1, {len(ranked.indices)}]")
    return ranked.indices[:n]


def top_n_indices(features, embeddings: LabelEmbeddings, n: int, compute_dtype="float32"):
    """(N, n) matrix of the top-n prompt indices per feature row."""
    if not 1 <= n <= len(embeddings):
        raise MetricDomainError(f"n={n} outside [1, {len(embeddings)}]")
    blocks = [
        top_n_from_sims(sims, n)
        for _, _, sims in iter_similarity_chunks(features, embeddings, compute_dtype)
    ]
    if not blocks:
        return np.empty((0, n), dtype=np.int64)
    return np.vstack(blocks)


def label_ranks(features, embeddings: LabelEmbeddings, label_sets, compute_dtype="float32"):
    """Per feature row, the 1-based ranks of the given prompt indices.

    ``label_sets[i]`` is an integer array of prompt indices for row i; the
    result is a list of equally shaped rank arrays.
    """
    label_sets = [np.asarray(s, dtype=np.int64) for s in label_sets]
    features = as_feature_matrix(features)
    if len(label_sets) != len(features):
        raise InputFormatError("label_sets must align one-to-one with feature rows")
    out: list[np.ndarray] = []
    for start, stop, sims in iter_similarity_chunks(features, embeddings, compute_dtype):
        sets = label_sets[start:stop]
        counts = np.array([len(s) for s in sets])
        rows = np.repeat(np.arange(stop - start), counts)
        cols = np.concatenate(sets) if sets else np.empty(0, dtype=np.int64)
        ranks = ranks_from_sims(sims, rows, cols)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        out.extend(ranks[offsets[i] : offsets[i + 1]] for i in range(stop - start))
    return out
