"""Tiered open-set semantic segmentation metrics.

Every evaluated ground-truth point is assigned exactly one diagnostic
category from its top-N ranked labels: synonym beats depiction beats
visually-similar beats clutter; a point whose top-N hits none of its sets
is incorrect, and a point with no matched prediction is missing. On top of
the per-category frequencies, the set-ranking analysis locates every
ground-truth label inside the full similarity ranking and scores it
against the ideal tiering (synonyms first, then the joint
depiction/visually-similar set).

Penalty conventions
-------------------
The three penalties are defined so that an ideal tiered ranking yields
exactly zero penalty, and each grows towards one as labels drift past
their rank box:

* synonym underscoring  = 1 - mean right-bound clamp over synonym labels,
* dvs overscoring       = 1 - mean left-bound clamp over dvs labels,
* dvs underscoring      = 1 - mean right-bound clamp over dvs labels,

where the left clamp ``1 + min(0, (r - b_l)/b_l)`` penalises ranks before
the box and the right clamp ``1 - max(0, (r - b_r)/(|L| - b_r))`` ranks
beyond it. Synonym overscoring cannot occur because the synonym box starts
at rank 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InputFormatError, MetricDomainError
from .geometry import (
    DEFAULT_RESOLUTION,
    MISSING,
    PointMatching,
    match_points,
    voxel_downsample,
)
from .labels import GroundTruthScene, PromptList
from .similarity import (
    _CHUNK_ROWS,
    LabelEmbeddings,
    RankedLabelList,
    prepare_embeddings,
    ranks_from_sims,
    similarity_block,
    top_n_from_sims,
)
from .validation import as_feature_matrix

DEFAULT_N_VALUES = (1, 5, 10)


class Category(Enum):
    """Diagnostic category of one evaluated ground-truth point."""

    SYNONYM = "synonym"
    DEPICTION = "depiction"
    VISUALLY_SIMILAR = "visually_similar"
    CLUTTER = "clutter"
    MISSING = "missing"
    INCORRECT = "incorrect"


CATEGORY_ORDER = (
    Category.SYNONYM,
    Category.DEPICTION,
    Category.VISUALLY_SIMILAR,
    Category.CLUTTER,
    Category.MISSING,
    Category.INCORRECT,
)

# Integer codes used by the vectorised engine; order matches CATEGORY_ORDER.
_CODE = {cat: i for i, cat in enumerate(CATEGORY_ORDER)}
_MISSING_CODE = _CODE[Category.MISSING]


@dataclass(frozen=True)
class PointLabelSets:
    """Prompt-list index sets of one point's ground-truth labels.

    Derived from the owning instance's label set: its own three text
    categories plus the union of every clutter neighbour's labels (any of
    their categories, non-transitively).
    """

    synonyms: frozenset[int]
    depictions: frozenset[int]
    visually_similar: frozenset[int]
    clutter: frozenset[int]

    @property
    def dvs(self) -> tuple[int, ...]:
        return tuple(sorted(self.depictions | self.visually_similar))


def instance_label_sets(
    scene: GroundTruthScene,
    prompt: PromptList,
    include_ambiguous: bool = True,
) -> dict[int, PointLabelSets]:
    """Per evaluated instance, its label sets resolved to prompt indices.

    An instance's own label missing from the prompt list is a hard error:
    the prompt list must be built from the same label data. Neighbour
    labels outside the prompt list are dropped silently -- they can never
    be predicted, so they cannot influence any category decision.
    """
    sets: dict[int, PointLabelSets] = {}
    for iid in scene.evaluated_instances(include_ambiguous):
        ls = scene.labels[iid]

        def resolve(labels) -> frozenset[int]:
            out = set()
            for lab in labels:
                if lab not in prompt:
                    raise MetricDomainError(
                        f"instance {iid}: ground-truth label {lab!r} is absent from the "
                        "prompt list; the prompt list must cover the label data"
                    )
                out.add(prompt.index[lab])
            return frozenset(out)

        clutter: set[int] = set()
        for nid in ls.clutter_ids:
            neighbour = scene.labels.get(nid)
            if neighbour is None:
                continue
            clutter.update(prompt.index[lab] for lab in neighbour.all_labels if lab in prompt)
        sets[iid] = PointLabelSets(
            synonyms=resolve(ls.synonyms),
            depictions=resolve(ls.depictions),
            visually_similar=resolve(ls.visually_similar),
            clutter=frozenset(clutter),
        )
    return sets


# ---------------------------------------------------------------------------
# category assignment and frequencies


def assign_category(top_indices, sets: PointLabelSets) -> Category:
    """Hierarchical category of a matched point given its top-N indices."""
    top = set(int(i) for i in np.asarray(top_indices).ravel())
    if not top:
        raise MetricDomainError("assign_category requires a non-empty top-N list")
    if top & sets.synonyms:
        return Category.SYNONYM
    if top & sets.depictions:
        return Category.DEPICTION
    if top & sets.visually_similar:
        return Category.VISUALLY_SIMILAR
    if top & sets.clutter:
        return Category.CLUTTER
    return Category.INCORRECT


def _frequencies_from_counts(
    per_object_counts: dict[int, np.ndarray], per_object_points: dict[int, int]
) -> dict[Category, float]:
    ids = sorted(per_object_counts)
    freqs = {}
    for cat in CATEGORY_ORDER:
        code = _CODE[cat]
        freqs[cat] = math.fsum(
            per_object_counts[o][code] / per_object_points[o] for o in ids
        ) / len(ids)
    return freqs


def top_n_frequency(
    scene: GroundTruthScene,
    prompt: PromptList,
    matching: PointMatching,
    rankings: list[RankedLabelList],
    n: int,
    include_ambiguous: bool = True,
) -> dict[Category, float]:
    """Object-normalised share of points per category at top-N.

    ``rankings`` align with the matched ground-truth points in ascending
    point order; unmatched points count as missing. Every object
    contributes equally regardless of its point count.
    """
    ids = scene.evaluated_instances(include_ambiguous)
    if not ids:
        raise MetricDomainError(f"scene {scene.name!r} has no evaluated objects")
    sets = instance_label_sets(scene, prompt, include_ambiguous)
    eval_mask = np.isin(scene.instance_ids, ids)
    matched_rows = np.flatnonzero(matching.matched_mask)
    if len(rankings) != len(matched_rows):
        raise InputFormatError("rankings must align with matched points")
    ranking_at = dict(zip(matched_rows.tolist(), rankings))

    counts = {o: np.zeros(len(CATEGORY_ORDER), dtype=np.int64) for o in ids}
    points = {o: 0 for o in ids}
    for row in np.flatnonzero(eval_mask):
        iid = int(scene.instance_ids[row])
        points[iid] += 1
        if matching.indices[row] == MISSING:
            counts[iid][_MISSING_CODE] += 1
        else:
            cat = assign_category(ranking_at[row].indices[:n], sets[iid])
            counts[iid][_CODE[cat]] += 1
    if any(v == 0 for v in points.values()):
        empty = [o for o, v in points.items() if v == 0]
        raise MetricDomainError(f"instances {empty} have no points to evaluate")
    return _frequencies_from_counts(counts, points)


# ---------------------------------------------------------------------------
# rank scores and set ranking


@dataclass(frozen=True)
class RankBounds:
    """Inclusive 1-based ideal rank box of a category set."""

    lower: int
    upper: int
    total: int

    def __post_init__(self):
        if not 1 <= self.lower <= self.upper <= self.total:
            raise MetricDomainError(
                f"invalid rank bounds [{self.lower}, {self.upper}] for list size {self.total}"
            )

    @classmethod
    def for_synonyms(cls, n_synonyms: int, total: int) -> "RankBounds":
        return cls(1, n_synonyms, total)

    @classmethod
    def for_dvs(cls, n_synonyms: int, n_dvs: int, total: int) -> "RankBounds":
        return cls(n_synonyms + 1, n_synonyms + n_dvs, total)


def _left_clamp(rank, lower):
    return 1.0 + np.minimum(0.0, (rank - lower) / lower)


def _right_clamp(rank, upper, total):
    if upper == total:  # the box touches the end of the list: no room to underscore
        return np.ones_like(np.asarray(rank, dtype=np.float64))
    return 1.0 - np.maximum(0.0, (rank - upper) / (total - upper))


def rank_score(rank: int, bounds: RankBounds) -> float:
    """Score of one ranked label against its ideal box (1 inside, decaying outside)."""
    if not 1 <= rank <= bounds.total:
        raise MetricDomainError(f"rank {rank} outside [1, {bounds.total}]")
    r = np.float64(rank)
    left = _left_clamp(r, np.float64(bounds.lower))
    right = _right_clamp(r, bounds.upper, bounds.total)
    return float(np.minimum(left, right))


@dataclass
class SetRankingScores:
    """Scene-level set-ranking summary over matched points.

    Values are ``None`` when no matched point carries labels of the
    relevant set (undefined rather than zero).
    """

    mean_rank_score: float | None
    inlier_rate_synonyms: float | None
    inlier_rate_dvs: float | None
    penalty_synonym_under: float | None
    penalty_dvs_over: float | None
    penalty_dvs_under: float | None

    def to_dict(self) -> dict:
        return {
            "mean_rank_score": self.mean_rank_score,
            "inlier_rate_synonyms": self.inlier_rate_synonyms,
            "inlier_rate_dvs": self.inlier_rate_dvs,
            "penalty_synonym_under": self.penalty_synonym_under,
            "penalty_dvs_over": self.penalty_dvs_over,
            "penalty_dvs_under": self.penalty_dvs_under,
        }


class _SetRankingAccumulator:
    """Per-point contributions, reduced with fsum for order independence."""

    def __init__(self):
        self.mr: list[float] = []
        self.rs: list[float] = []
        self.rdvs: list[float] = []
        self.right_s: list[float] = []
        self.left_dvs: list[float] = []
        self.right_dvs: list[float] = []

    def add_point(self, syn_ranks: np.ndarray, dvs_ranks: np.ndarray, n_syn: int, n_dvs: int, total: int):
        scores = []
        if n_syn:
            b = RankBounds.for_synonyms(n_syn, total)
            left = _left_clamp(syn_ranks.astype(np.float64), float(b.lower))
            right = _right_clamp(syn_ranks.astype(np.float64), b.upper, b.total)
            s = np.minimum(left, right)
            scores.append(s)
            self.rs.append(float((s == 1.0).sum() / n_syn))
            self.right_s.append(float(right.sum() / n_syn))
        if n_dvs:
            b = RankBounds.for_dvs(n_syn, n_dvs, total)
            left = _left_clamp(dvs_ranks.astype(np.float64), float(b.lower))
            right = _right_clamp(dvs_ranks.astype(np.float64), b.upper, b.total)
            s = np.minimum(left, right)
            scores.append(s)
            self.rdvs.append(float((s == 1.0).sum() / n_dvs))
            self.left_dvs.append(float(left.sum() / n_dvs))
            self.right_dvs.append(float(right.sum() / n_dvs))
        if scores:
            all_s = np.concatenate(scores)
            self.mr.append(float(all_s.sum() / len(all_s)))

    @staticmethod
    def _mean(values: list[float]) -> float | None:
        if not values:
            return None
        return math.fsum(values) / len(values)

    def finish(self) -> SetRankingScores:
        def inv(values):
            m = self._mean(values)
            return None if m is None else 1.0 - m

        return SetRankingScores(
            mean_rank_score=self._mean(self.mr),
            inlier_rate_synonyms=self._mean(self.rs),
            inlier_rate_dvs=self._mean(self.rdvs),
            penalty_synonym_under=inv(self.right_s),
            penalty_dvs_over=inv(self.left_dvs),
            penalty_dvs_under=inv(self.right_dvs),
        )


def set_ranking(
    scene: GroundTruthScene,
    prompt: PromptList,
    matching: PointMatching,
    rankings: list[RankedLabelList],
    include_ambiguous: bool = True,
) -> SetRankingScores:
    """Locate every matched point's ground-truth labels in its ranking.

    Only matched points are evaluated. Synonyms are scored against the box
    [1, |S|], the joint depiction/visually-similar set against
    [|S|+1, |S|+|DVS|].
    """
    ids = set(scene.evaluated_instances(include_ambiguous))
    sets = instance_label_sets(scene, prompt, include_ambiguous)
    matched_rows = np.flatnonzero(matching.matched_mask)
    if len(rankings) != len(matched_rows):
        raise InputFormatError("rankings must align with matched points")
    total = len(prompt)
    acc = _SetRankingAccumulator()
    for row, ranking in zip(matched_rows, rankings):
        iid = int(scene.instance_ids[row])
        if iid not in ids:
            continue
        ps = sets[iid]
        syn = np.array(sorted(ps.synonyms), dtype=np.int64)
        dvs = np.array(ps.dvs, dtype=np.int64)
        syn_ranks = np.array([ranking.rank_of(i) for i in syn], dtype=np.int64)
        dvs_ranks = np.array([ranking.rank_of(i) for i in dvs], dtype=np.int64)
        acc.add_point(syn_ranks, dvs_ranks, len(syn), len(dvs), total)
    return acc.finish()


# ---------------------------------------------------------------------------
# closed-set mIoU baseline


def compute_miou(
    scene: GroundTruthScene,
    prompt: PromptList,
    matching: PointMatching,
    rankings: list[RankedLabelList],
    include_ambiguous: bool = True,
) -> float | None:
    """Closed-set comparison baseline: top-1 label vs one class per object.

    Each instance is reduced to its lexicographically smallest synonym;
    instances without synonyms are skipped. Standard per-class IoU of the
    top-1 prediction, averaged over the classes present; unmatched points
    count as false negatives for their class.
    """
    primary: dict[int, int] = {}
    for iid in scene.evaluated_instances(include_ambiguous):
        syns = sorted(scene.labels[iid].synonyms)
        if not syns:
            continue
        if syns[0] not in prompt:
            raise MetricDomainError(
                f"instance {iid}: primary class {syns[0]!r} absent from the prompt list"
            )
        primary[iid] = prompt.index[syns[0]]
    if not primary:
        return None
    matched_rows = np.flatnonzero(matching.matched_mask)
    ranking_at = dict(zip(matched_rows.tolist(), rankings))
    classes = sorted(set(primary.values()))
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for row in range(len(scene.instance_ids)):
        iid = int(scene.instance_ids[row])
        if iid not in primary:
            continue
        gt = primary[iid]
        pred = None
        if matching.indices[row] != MISSING:
            pred = int(ranking_at[row].indices[0])
        if pred == gt:
            tp[gt] += 1
        else:
            fn[gt] += 1
            if pred in fp:
                fp[pred] += 1
    ious = []
    for c in classes:
        denom = tp[c] + fp[c] + fn[c]
        if denom:
            ious.append(tp[c] / denom)
    if not ious:
        return None
    return math.fsum(ious) / len(ious)


# ---------------------------------------------------------------------------
# streaming scene engine


@dataclass
class SceneSegmentationResult:
    """All segmentation metrics of one scene."""

    name: str
    n_objects: int
    n_points: int
    n_matched: int
    frequencies: dict[int, dict[Category, float]]
    set_ranking: SetRankingScores
    miou: float | None = None
    # categories per evaluated downsampled point at each N, for viz exports
    point_categories: dict[int, np.ndarray] | None = None
    eval_points: np.ndarray | None = None


def evaluate_segmentation(
    scene: GroundTruthScene,
    prompt: PromptList,
    embeddings: LabelEmbeddings,
    pred_points,
    pred_features,
    n_values=DEFAULT_N_VALUES,
    resolution: float = DEFAULT_RESOLUTION,
    match_distance: float | None = None,
    include_ambiguous: bool = True,
    with_miou: bool = False,
    compute_dtype="float32",
    keep_point_categories: bool = False,
) -> SceneSegmentationResult:
    """End-to-end segmentation evaluation of one scene.

    Downsamples the evaluated ground truth and the prediction on the same
    grid, matches points within ``match_distance`` (default: one voxel),
    ranks each matched feature against the prompt list, and reduces to
    frequencies, set-ranking scores, and optionally the closed-set mIoU.
    Streams over matched points in fixed-size blocks; results are
    independent of block and worker layout.
    """
    n_values = tuple(int(n) for n in n_values)
    if not n_values or any(not 1 <= n <= len(prompt) for n in n_values):
        raise MetricDomainError(f"n_values {n_values} outside [1, {len(prompt)}]")
    if len(prompt) != len(embeddings):
        raise InputFormatError(
            f"prompt list has {len(prompt)} labels but embeddings {len(embeddings)} rows"
        )
    ids = scene.evaluated_instances(include_ambiguous)
    if not ids:
        raise MetricDomainError(f"scene {scene.name!r} has no evaluated objects")
    sets = instance_label_sets(scene, prompt, include_ambiguous)

    # evaluated ground truth only, downsampled on the shared grid
    eval_mask = np.isin(scene.instance_ids, ids)
    gt_points, gt_iids = voxel_downsample(
        scene.points[eval_mask], scene.instance_ids[eval_mask], resolution
    )
    if len(gt_points) == 0:
        raise MetricDomainError(f"scene {scene.name!r} has no evaluated points")

    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    if len(pred_points):
        pred_points, pred_features = voxel_downsample(pred_points, pred_features, resolution)
    md = resolution if match_distance is None else match_distance
    matching = match_points(gt_points, pred_points, md)

    # process matched points grouped by instance for cheap per-object masks
    order = np.lexsort((np.arange(len(gt_points)), gt_iids))
    order = order[matching.matched_mask[order]]
    feat_rows = matching.indices[order]

    id_list = sorted(ids)
    id_pos = {iid: k for k, iid in enumerate(id_list)}
    n_labels = len(prompt)
    cat_masks = np.zeros((4, len(id_list), n_labels), dtype=bool)
    own_cols: list[np.ndarray] = []
    n_syn = np.zeros(len(id_list), dtype=np.int64)
    n_dvs = np.zeros(len(id_list), dtype=np.int64)
    for iid in id_list:
        k = id_pos[iid]
        ps = sets[iid]
        for axis, idxs in enumerate((ps.synonyms, ps.depictions, ps.visually_similar, ps.clutter)):
            if idxs:
                cat_masks[axis, k, list(idxs)] = True
        syn = np.array(sorted(ps.synonyms), dtype=np.int64)
        dvs = np.array(ps.dvs, dtype=np.int64)
        own_cols.append(np.concatenate([syn, dvs]))
        n_syn[k] = len(syn)
        n_dvs[k] = len(dvs)

    max_n = max(n_values)
    obj_of_row = np.array([id_pos[int(i)] for i in gt_iids[order]], dtype=np.int64)
    codes = {n: np.full(len(gt_points), _MISSING_CODE, dtype=np.int8) for n in n_values}
    top1 = np.full(len(gt_points), -1, dtype=np.int64)
    acc = _SetRankingAccumulator()

    if len(order):
        emb_t = prepare_embeddings(embeddings, compute_dtype)
        pred_features = np.asarray(pred_features)
        for start in range(0, len(order), _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, len(order))
            block = as_feature_matrix(pred_features[feat_rows[start:stop]])
            sims, _ = similarity_block(block, emb_t)
            rows_gt = order[start:stop]
            objs = obj_of_row[start:stop]
            top = top_n_from_sims(sims, max_n)
            top1[rows_gt] = top[:, 0]
            hits = cat_masks[:, objs[:, None], top]  # (4, B, max_n)
            any_hits = np.logical_or.accumulate(hits, axis=2)
            for n in n_values:
                h = any_hits[:, :, n - 1]
                code = np.select(
                    [h[0], h[1], h[2], h[3]],
                    [0, 1, 2, 3],
                    default=_CODE[Category.INCORRECT],
                ).astype(np.int8)
                codes[n][rows_gt] = code

            counts = n_syn[objs] + n_dvs[objs]
            pair_rows = np.repeat(np.arange(stop - start), counts)
            pair_cols = np.concatenate([own_cols[o] for o in objs])
            ranks = ranks_from_sims(sims, pair_rows, pair_cols)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            for b in range(stop - start):
                o = objs[b]
                r = ranks[offsets[b] : offsets[b + 1]]
                acc.add_point(r[: n_syn[o]], r[n_syn[o] :], int(n_syn[o]), int(n_dvs[o]), n_labels)

    # frequencies from integer per-object counts
    pos_of_point = np.array([id_pos[int(i)] for i in gt_iids], dtype=np.int64)
    n_points_per_obj = np.bincount(pos_of_point, minlength=len(id_list))
    if np.any(n_points_per_obj == 0):
        empty = [id_list[k] for k in np.flatnonzero(n_points_per_obj == 0)]
        raise MetricDomainError(f"instances {empty} have no points to evaluate")
    frequencies: dict[int, dict[Category, float]] = {}
    n_cats = len(CATEGORY_ORDER)
    obj_points = {iid: int(n_points_per_obj[id_pos[iid]]) for iid in id_list}
    for n in n_values:
        table = np.bincount(
            pos_of_point * n_cats + codes[n], minlength=len(id_list) * n_cats
        ).reshape(len(id_list), n_cats)
        per_obj = {iid: table[id_pos[iid]] for iid in id_list}
        frequencies[n] = _frequencies_from_counts(per_obj, obj_points)

    miou = None
    if with_miou:
        miou = _miou_from_top1(scene, prompt, gt_iids, top1, include_ambiguous)

    return SceneSegmentationResult(
        name=scene.name,
        n_objects=len(id_list),
        n_points=len(gt_points),
        n_matched=matching.n_matched,
        frequencies=frequencies,
        set_ranking=acc.finish(),
        miou=miou,
        point_categories={n: codes[n].copy() for n in n_values} if keep_point_categories else None,
        eval_points=gt_points if keep_point_categories else None,
    )


def _miou_from_top1(scene, prompt, gt_iids, top1, include_ambiguous) -> float | None:
    primary: dict[int, int] = {}
    for iid in scene.evaluated_instances(include_ambiguous):
        syns = sorted(scene.labels[iid].synonyms)
        if syns:
            primary[iid] = prompt.index[syns[0]]
    if not primary:
        return None
    classes = sorted(set(primary.values()))
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for row in range(len(gt_iids)):
        iid = int(gt_iids[row])
        if iid not in primary:
            continue
        gt = primary[iid]
        pred = int(top1[row]) if top1[row] >= 0 else None
        if pred == gt:
            tp[gt] += 1
        else:
            fn[gt] += 1
            if pred in fp:
                fp[pred] += 1
    ious = [
        tp[c] / (tp[c] + fp[c] + fn[c]) for c in classes if tp[c] + fp[c] + fn[c] > 0
    ]
    if not ious:
        return None
    return math.fsum(ious) / len(ious)
