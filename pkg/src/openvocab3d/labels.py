"""Tiered ground-truth label model and its curation conventions.

Every annotated object carries free-text labels in three categories of
decreasing description specificity -- synonyms, depictions, visually
similar -- plus a clutter set of neighbouring object ids derived from box
overlap. Curation normalises annotator responses, resolves cross-category
duplicates to the least specific category, and flags objects whose
annotators could not agree on any synonym.
"""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputFormatError, MetricDomainError
from .geometry import MIN_BOX_EXTENT, box_iou, fit_oriented_box
from .validation import as_points_array

# Categories ordered from most to least specific; cross-category duplicates
# are kept only in the least specific one.
CATEGORY_FIELDS = ("synonyms", "depictions", "visually_similar")

DEFAULT_AGREEMENT_THRESHOLD = 2


def normalize_label(text: str) -> str:
    """Trim, lowercase, and collapse internal whitespace to single spaces."""
    return " ".join(text.strip().lower().split())


def parse_free_text(text: str) -> list[str]:
    """Split a comma-separated annotator response into normalised labels."""
    return [lab for lab in (normalize_label(part) for part in text.split(",")) if lab]


def _check_label(label: str) -> None:
    if not label or normalize_label(label) != label:
        raise InputFormatError(
            f"label {label!r} must be non-empty, lowercase, single-space separated"
        )


@dataclass(frozen=True)
class CategoryLabelSet:
    """Curated labels of one object instance, split by specificity tier."""

    synonyms: frozenset[str] = frozenset()
    depictions: frozenset[str] = frozenset()
    visually_similar: frozenset[str] = frozenset()
    clutter_ids: frozenset[int] = frozenset()
    ambiguous: bool = False

    def __post_init__(self):
        for name in CATEGORY_FIELDS:
            value = frozenset(getattr(self, name))
            object.__setattr__(self, name, value)
            for label in value:
                _check_label(label)
        object.__setattr__(self, "clutter_ids", frozenset(int(i) for i in self.clutter_ids))
        if self.synonyms & self.depictions or self.synonyms & self.visually_similar or (
            self.depictions & self.visually_similar
        ):
            raise InputFormatError("label categories must be pairwise disjoint after curation")

    @property
    def all_labels(self) -> frozenset[str]:
        return self.synonyms | self.depictions | self.visually_similar

    @property
    def n_labels(self) -> int:
        return len(self.synonyms) + len(self.depictions) + len(self.visually_similar)


@dataclass
class RawAnnotation:
    """One annotator's free-text response for one object instance."""

    annotator: str
    instance: int
    synonyms: str = ""
    depictions: str = ""
    vis_sim: str = ""


@dataclass
class GroundTruthScene:
    """Points with instance ids, per-instance label sets, and exclusions.

    ``excluded_instances`` holds structural ids (floors, walls, ceilings)
    plus any instance annotators could not label; they are skipped by every
    metric but their points remain part of the scene.
    """

    name: str
    points: np.ndarray
    instance_ids: np.ndarray
    labels: dict[int, CategoryLabelSet]
    excluded_instances: frozenset[int] = frozenset()

    def __post_init__(self):
        self.points = as_points_array(self.points)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        if self.instance_ids.shape != (len(self.points),):
            raise InputFormatError("instance_ids must align one-to-one with points")
        self.labels = {int(k): v for k, v in self.labels.items()}
        self.excluded_instances = frozenset(int(i) for i in self.excluded_instances)

    def validate(self) -> "GroundTruthScene":
        known = set(self.labels) | self.excluded_instances
        present = set(np.unique(self.instance_ids).tolist())
        unknown = present - known
        if unknown:
            raise InputFormatError(
                f"scene {self.name!r}: instances {sorted(unknown)} appear in the point "
                "stream but have neither labels nor an exclusion entry"
            )
        for iid, labelset in self.labels.items():
            for cid in labelset.clutter_ids:
                if cid == iid:
                    raise InputFormatError(
                        f"scene {self.name!r}: instance {iid} lists itself as clutter"
                    )
                if cid not in known:
                    raise InputFormatError(
                        f"scene {self.name!r}: instance {iid} references clutter id {cid} "
                        "that is not present in the scene"
                    )
        return self

    def evaluated_instances(self, include_ambiguous: bool = True) -> list[int]:
        """Labelled, non-excluded instance ids in ascending order."""
        ids = [i for i in sorted(self.labels) if i not in self.excluded_instances]
        if not include_ambiguous:
            ids = [i for i in ids if not self.labels[i].ambiguous]
        return ids

    def points_of(self, instance_id: int) -> np.ndarray:
        return self.points[self.instance_ids == instance_id]


@dataclass(frozen=True)
class PromptList:
    """Ordered unique labels a representation's features are ranked against."""

    labels: tuple[str, ...]
    index: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise InputFormatError("prompt list contains duplicate labels")
        object.__setattr__(self, "index", {lab: i for i, lab in enumerate(self.labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self.index


# ---------------------------------------------------------------------------
# curation


def curate_labels(
    annotations: list[RawAnnotation],
    agreement_threshold: int = DEFAULT_AGREEMENT_THRESHOLD,
) -> CategoryLabelSet | None:
    """Merge one instance's annotations into a curated label set.

    Responses are normalised and unioned per category; a label occurring in
    several categories is kept only in the least specific one (visually
    similar < depictions < synonyms). Plural and spacing variants are
    distinct labels and all kept. Returns ``None`` when every response is
    empty after normalisation, i.e. the annotators could not identify the
    object; callers exclude such instances downstream.
    """
    if not annotations:
        raise MetricDomainError("curate_labels needs at least one annotation")
    union: dict[str, set[str]] = {name: set() for name in CATEGORY_FIELDS}
    for ann in annotations:
        union["synonyms"].update(parse_free_text(ann.synonyms))
        union["depictions"].update(parse_free_text(ann.depictions))
        union["visually_similar"].update(parse_free_text(ann.vis_sim))

    vis = union["visually_similar"]
    dep = union["depictions"] - vis
    syn = union["synonyms"] - union["depictions"] - vis
    if not (syn or dep or vis):
        return None
    return CategoryLabelSet(
        synonyms=frozenset(syn),
        depictions=frozenset(dep),
        visually_similar=frozenset(vis),
        ambiguous=flag_ambiguous(annotations, agreement_threshold),
    )


def flag_ambiguous(
    annotations: list[RawAnnotation],
    agreement_threshold: int = DEFAULT_AGREEMENT_THRESHOLD,
) -> bool:
    """True when no synonym is shared by at least ``agreement_threshold`` annotators."""
    per_annotator: dict[str, set[str]] = defaultdict(set)
    for ann in annotations:
        per_annotator[ann.annotator].update(parse_free_text(ann.synonyms))
    counts: dict[str, int] = defaultdict(int)
    for labels in per_annotator.values():
        for label in labels:
            counts[label] += 1
    best = max(counts.values(), default=0)
    return best < agreement_threshold


# ---------------------------------------------------------------------------
# clutter from box overlap


def compute_clutter(scene: GroundTruthScene) -> dict[int, set[int]]:
    """Mutual clutter membership for every labelled, non-excluded instance.

    Two instances are clutter neighbours when their fitted yaw-boxes have
    IoU > 0. Degenerate instances (fewer than 4 points, or flat) fall back
    to clamped boxes with a warning, never a failure. The result is
    symmetric by construction.
    """
    ids = scene.evaluated_instances()
    boxes = {}
    for iid in ids:
        pts = scene.points_of(iid)
        if len(pts) == 0:
            warnings.warn(f"instance {iid} has no points; skipped for clutter", stacklevel=2)
            continue
        box = fit_oriented_box(pts)
        if np.any(box.half_extents == MIN_BOX_EXTENT / 2.0):
            warnings.warn(
                f"instance {iid} is degenerate; box extents clamped to one voxel",
                stacklevel=2,
            )
        boxes[iid] = box
    out: dict[int, set[int]] = {iid: set() for iid in ids}
    listed = sorted(boxes)
    for i, a in enumerate(listed):
        for b in listed[i + 1 :]:
            if box_iou(boxes[a], boxes[b]) > 0.0:
                out[a].add(b)
                out[b].add(a)
    return out


def apply_clutter(scene: GroundTruthScene) -> GroundTruthScene:
    """Return a copy of the scene with clutter ids recomputed from geometry."""
    clutter = compute_clutter(scene)
    labels = {
        iid: replace(ls, clutter_ids=frozenset(clutter.get(iid, set())))
        for iid, ls in scene.labels.items()
    }
    return GroundTruthScene(
        name=scene.name,
        points=scene.points,
        instance_ids=scene.instance_ids,
        labels=labels,
        excluded_instances=scene.excluded_instances,
    )


# ---------------------------------------------------------------------------
# prompt list and statistics


def _instance_labels_in_order(labelset: CategoryLabelSet):
    for name in CATEGORY_FIELDS:
        yield from sorted(getattr(labelset, name))


def build_prompt_list(scenes: list[GroundTruthScene]) -> PromptList:
    """Deduplicated union of all labels across scenes, in a fixed traversal.

    Order is first appearance under: scene order as given, instance ids
    ascending, categories from most to least specific, labels lexicographic
    within a category. Deterministic and idempotent.
    """
    seen: dict[str, None] = {}
    for scene in scenes:
        for iid in scene.evaluated_instances():
            for label in _instance_labels_in_order(scene.labels[iid]):
                seen.setdefault(label, None)
    if not seen:
        raise MetricDomainError("no labels found; nothing to evaluate against")
    return PromptList(tuple(seen))


@dataclass(frozen=True)
class LabelStats:
    """Per-scene label summary."""

    objects: int
    unique_labels: int
    labels_per_object_mean: int
    labels_per_object_mean_raw: float
    labels_per_object_max: int
    ambiguous_objects: int

    def to_dict(self) -> dict:
        return {
            "objects": self.objects,
            "unique_labels": self.unique_labels,
            "labels_per_object_mean": self.labels_per_object_mean,
            "labels_per_object_mean_raw": self.labels_per_object_mean_raw,
            "labels_per_object_max": self.labels_per_object_max,
            "ambiguous_objects": self.ambiguous_objects,
        }


def label_stats(scene: GroundTruthScene) -> LabelStats:
    """Object count, unique labels, per-object label counts, ambiguous count.

    The mean is also reported rounded half-up to the nearest integer, the
    convention used in summary tables.
    """
    ids = scene.evaluated_instances()
    if not ids:
        return LabelStats(0, 0, 0, 0.0, 0, 0)
    counts = [scene.labels[i].n_labels for i in ids]
    unique: set[str] = set()
    for i in ids:
        unique |= scene.labels[i].all_labels
    mean = sum(counts) / len(counts)
    return LabelStats(
        objects=len(ids),
        unique_labels=len(unique),
        labels_per_object_mean=int(math.floor(mean + 0.5)),
        labels_per_object_mean_raw=mean,
        labels_per_object_max=max(counts),
        ambiguous_objects=sum(1 for i in ids if scene.labels[i].ambiguous),
    )
