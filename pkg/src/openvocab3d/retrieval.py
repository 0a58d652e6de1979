"""Open-set object retrieval: queries, NMS, AP suite, rank histograms.

Queries are generated from the ground-truth label sets: one query per
synonym, plus one per (depiction, synonym) pair under the template
"<depiction> <synonym>". Predicted instances are ranked per query by
cosine similarity of their feature against the query embedding and matched
greedily to targets by voxelized point-set IoU; average precision uses the
interpolated (monotone-envelope) precision-recall curve over all ranks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputFormatError, MetricDomainError
from .geometry import DEFAULT_RESOLUTION, voxel_keys
from .labels import GroundTruthScene
from .similarity import LabelEmbeddings
from .validation import as_points_array, check_positive

KIND_SYNONYM = "S"
KIND_SYNONYM_DEPICTION = "S+D"
QUERY_KINDS = (KIND_SYNONYM, KIND_SYNONYM_DEPICTION)

# IoU thresholds: mAP averages 0.50..0.95 in steps of 0.05.
MAP_THRESHOLDS = tuple(i / 100 for i in range(50, 100, 5))
AP50_THRESHOLD = 0.50
AP25_THRESHOLD = 0.25

# Histogram buckets: ranks 1..9, everything >= 10 pooled, plus no-match.
RANK_BUCKETS = tuple(str(i) for i in range(1, 10)) + ("10+", "no_match")


@dataclass(frozen=True)
class RetrievalQuery:
    """One text query with the ground-truth instances it refers to."""

    text: str
    kind: str
    targets: frozenset[int]

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise InputFormatError(f"query kind must be one of {QUERY_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "targets", frozenset(int(t) for t in self.targets))
        if not self.targets:
            raise InputFormatError(f"query {self.text!r} has no targets")


@dataclass
class PredictedInstance:
    """A predicted object: point set, one feature vector, optional confidence."""

    instance_id: int
    points: np.ndarray
    feature: np.ndarray
    confidence: float | None = None

    def __post_init__(self):
        self.points = as_points_array(self.points, "instance points")
        if len(self.points) == 0:
            raise InputFormatError(f"instance {self.instance_id} has an empty point set")
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)


@dataclass
class KindMetrics:
    n_queries: int
    map: float
    ap50: float
    ap25: float

    def to_dict(self) -> dict:
        return {"n_queries": self.n_queries, "map": self.map, "ap50": self.ap50, "ap25": self.ap25}


@dataclass
class RetrievalReport:
    """Scene-level retrieval metrics."""

    n_queries: int
    map: float
    ap50: float
    ap25: float
    by_kind: dict[str, KindMetrics | None]
    rank_histogram: dict[str, int]
    per_query_ap: dict[float, list[float]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "map": self.map,
            "ap50": self.ap50,
            "ap25": self.ap25,
            "by_kind": {
                kind: (metrics.to_dict() if metrics is not None else None)
                for kind, metrics in self.by_kind.items()
            },
            "rank_histogram": dict(self.rank_histogram),
        }


# ---------------------------------------------------------------------------
# query generation


def generate_queries(scene: GroundTruthScene, include_ambiguous: bool = True) -> list[RetrievalQuery]:
    """All synonym and depiction-synonym queries of a scene.

    Identical (kind, text) pairs are merged with their targets unioned; a
    string arising as both kinds stays once per kind. Order is first
    appearance under ascending instance id, lexicographic labels.
    """
    merged: dict[tuple[str, str], set[int]] = {}
    for iid in scene.evaluated_instances(include_ambiguous):
        ls = scene.labels[iid]
        for syn in sorted(ls.synonyms):
            merged.setdefault((KIND_SYNONYM, syn), set()).add(iid)
        for dep in sorted(ls.depictions):
            for syn in sorted(ls.synonyms):
                merged.setdefault((KIND_SYNONYM_DEPICTION, f"{dep} {syn}"), set()).add(iid)
    return [
        RetrievalQuery(text=text, kind=kind, targets=frozenset(targets))
        for (kind, text), targets in merged.items()
    ]


# ---------------------------------------------------------------------------
# voxelized instance overlap


class _VoxelSets:
    """Cached voxel-key sets on one shared grid, for repeated IoU queries."""

    def __init__(self, clouds: list[np.ndarray], resolution: float):
        check_positive(resolution, "resolution")
        stack = [c for c in clouds if len(c)]
        if stack:
            origin = np.floor(np.vstack(stack) / resolution).astype(np.int64).min(axis=0)
        else:
            origin = np.zeros(3, dtype=np.int64)
        self.keys = [
            np.unique(voxel_keys(c, resolution, origin=origin)) if len(c) else np.empty(0, np.int64)
            for c in clouds
        ]

    def iou(self, i: int, j: int) -> float:
        a, b = self.keys[i], self.keys[j]
        if a.size == 0 or b.size == 0:
            return 0.0
        inter = np.intersect1d(a, b, assume_unique=True).size
        union = a.size + b.size - inter
        return inter / union


# ---------------------------------------------------------------------------
# non-maximum suppression


def nms(
    instances: list[PredictedInstance],
    iou_threshold: float,
    resolution: float = DEFAULT_RESOLUTION,
) -> list[PredictedInstance]:
    """Greedy suppression of overlapping instances by descending confidence.

    An instance is dropped when its voxelized point-set IoU with any kept
    instance exceeds ``iou_threshold``; confidence ties keep input order.
    """
    if any(inst.confidence is None for inst in instances):
        raise InputFormatError("NMS is undefined without confidence scores")
    if len(instances) <= 1:
        return list(instances)
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].confidence, i))
    vox = _VoxelSets([inst.points for inst in instances], resolution)
    kept: list[int] = []
    for i in order:
        if all(vox.iou(i, j) <= iou_threshold for j in kept):
            kept.append(i)
    kept.sort()
    return [instances[i] for i in kept]


# ---------------------------------------------------------------------------
# ranking + AP


def _query_rankings(queries, query_embeddings: LabelEmbeddings, instances) -> np.ndarray:
    """(Q, I) matrix: per query, instance indices by descending similarity."""
    if len(query_embeddings) != len(queries):
        raise InputFormatError(
            f"query embeddings have {len(query_embeddings)} rows for {len(queries)} queries"
        )
    feats = np.stack([inst.feature for inst in instances]).astype(np.float64)
    if feats.shape[1] != query_embeddings.dim:
        raise InputFormatError(
            f"instance feature dimension {feats.shape[1]} != query embedding "
            f"dimension {query_embeddings.dim}"
        )
    fnorm = np.linalg.norm(feats, axis=1, keepdims=True)
    n_zero = int((fnorm == 0.0).sum())
    if n_zero:
        warnings.warn(f"{n_zero} instance feature(s) have zero norm", stacklevel=3)
    fnorm[fnorm == 0.0] = 1.0
    q = query_embeddings.vectors.astype(np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    sims = q @ (feats / fnorm).T
    return np.argsort(-sims, axis=1, kind="stable")


def _greedy_tp_flags(ranked_ious: list[dict[int, float]], targets: list[int], threshold: float):
    """True-positive flags down the ranked list under one-to-one matching."""
    unmatched = set(targets)
    flags = np.zeros(len(ranked_ious), dtype=bool)
    for k, ious in enumerate(ranked_ious):
        best_t, best_iou = None, 0.0
        for t in targets:
            if t not in unmatched:
                continue
            iou = ious.get(t, 0.0)
            if iou >= threshold and (best_t is None or iou > best_iou):
                best_t, best_iou = t, iou
        if best_t is not None:
            unmatched.discard(best_t)
            flags[k] = True
    return flags


def _average_precision(tp_flags: np.ndarray, n_targets: int) -> float:
    """Area under the interpolated precision-recall curve."""
    if n_targets == 0:
        raise MetricDomainError("a query must have at least one target")
    if len(tp_flags) == 0 or not tp_flags.any():
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp_cum / ranks
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(interp[tp_flags] / n_targets)


def evaluate_retrieval(
    queries: list[RetrievalQuery],
    query_embeddings: LabelEmbeddings,
    instances: list[PredictedInstance],
    scene: GroundTruthScene,
    resolution: float = DEFAULT_RESOLUTION,
) -> RetrievalReport:
    """AP suite and rank histogram for one scene.

    Per query, every predicted instance is a candidate; a prediction is a
    true positive at threshold t when its point-set IoU with a still
    unmatched target reaches t. AP50/AP25 fix t; mAP averages the
    0.50..0.95 range. Scene metrics are unweighted means over queries.
    """
    if not queries:
        raise MetricDomainError("retrieval needs at least one query")
    thresholds = sorted(set(MAP_THRESHOLDS) | {AP50_THRESHOLD, AP25_THRESHOLD})
    per_query_ap: dict[float, list[float]] = {t: [] for t in thresholds}
    histogram = {b: 0 for b in RANK_BUCKETS}

    if not instances:
        for t in thresholds:
            per_query_ap[t] = [0.0] * len(queries)
        histogram["no_match"] = len(queries)
    else:
        rankings = _query_rankings(queries, query_embeddings, instances)
        target_ids = sorted({t for q in queries for t in q.targets})
        clouds = [inst.points for inst in instances] + [scene.points_of(t) for t in target_ids]
        vox = _VoxelSets(clouds, resolution)
        target_slot = {t: len(instances) + k for k, t in enumerate(target_ids)}

        iou_cache: dict[tuple[int, int], float] = {}

        def iou(inst_idx: int, target: int) -> float:
            key = (inst_idx, target)
            if key not in iou_cache:
                iou_cache[key] = vox.iou(inst_idx, target_slot[target])
            return iou_cache[key]

        for qi, query in enumerate(queries):
            targets = sorted(query.targets)
            ranked = rankings[qi]
            ranked_ious = [
                {t: v for t in targets if (v := iou(int(idx), t)) > 0.0} for idx in ranked
            ]
            for t in thresholds:
                flags = _greedy_tp_flags(ranked_ious, targets, t)
                per_query_ap[t].append(_average_precision(flags, len(targets)))
            histogram[_rank_bucket(ranked_ious)] += 1

    def summarize(idxs: list[int]) -> KindMetrics | None:
        if not idxs:
            return None
        ap_at = {
            t: math.fsum(per_query_ap[t][i] for i in idxs) / len(idxs) for t in thresholds
        }
        return KindMetrics(
            n_queries=len(idxs),
            map=math.fsum(ap_at[t] for t in MAP_THRESHOLDS) / len(MAP_THRESHOLDS),
            ap50=ap_at[AP50_THRESHOLD],
            ap25=ap_at[AP25_THRESHOLD],
        )

    overall = summarize(list(range(len(queries))))
    by_kind = {
        kind: summarize([i for i, q in enumerate(queries) if q.kind == kind])
        for kind in QUERY_KINDS
    }
    return RetrievalReport(
        n_queries=len(queries),
        map=overall.map,
        ap50=overall.ap50,
        ap25=overall.ap25,
        by_kind=by_kind,
        rank_histogram=histogram,
        per_query_ap=per_query_ap,
    )


def _rank_bucket(ranked_ious: list[dict[int, float]]) -> str:
    """Histogram bucket: rank of the first prediction overlapping any target at 0.25."""
    for k, ious in enumerate(ranked_ious):
        if any(v >= AP25_THRESHOLD for v in ious.values()):
            rank = k + 1
            return str(rank) if rank < 10 else "10+"
    return "no_match"


def query_rank_counts(
    queries: list[RetrievalQuery],
    query_embeddings: LabelEmbeddings,
    instances: list[PredictedInstance],
    scene: GroundTruthScene,
    resolution: float = DEFAULT_RESOLUTION,
) -> dict[str, int]:
    """Rank histogram alone (bucket of the first 0.25-overlap per query)."""
    report = evaluate_retrieval(queries, query_embeddings, instances, scene, resolution)
    return report.rank_histogram
