"""Interchange formats: point clouds, label files, tensors, reports, viz.

All binary formats are little-endian and bit-exact across platforms; all
writers are deterministic (identical inputs produce byte-identical files).
See FORMATS.md at the repository root for the full schemas.
"""

from .ply import read_ply, write_ply
from .tensors import read_tensor, write_tensor
from .scenes import (
    load_ground_truth,
    save_ground_truth,
    load_labels_file,
    save_labels_file,
    load_raw_annotations,
    group_annotations,
    read_prompt_list,
    write_prompt_list,
)
from .predictions import (
    Prediction,
    load_prediction,
    save_dense_prediction,
    save_object_prediction,
)
from .queries import load_queries, save_queries
from .reports import (
    segmentation_report,
    retrieval_report,
    write_report_json,
    write_report_csv,
    read_report_json,
)
from .viz import export_category_pointcloud, CATEGORY_COLORS

__all__ = [
    "read_ply",
    "write_ply",
    "read_tensor",
    "write_tensor",
    "load_ground_truth",
    "save_ground_truth",
    "load_labels_file",
    "save_labels_file",
    "load_raw_annotations",
    "group_annotations",
    "read_prompt_list",
    "write_prompt_list",
    "Prediction",
    "load_prediction",
    "save_dense_prediction",
    "save_object_prediction",
    "load_queries",
    "save_queries",
    "segmentation_report",
    "retrieval_report",
    "write_report_json",
    "write_report_csv",
    "read_report_json",
    "export_category_pointcloud",
    "CATEGORY_COLORS",
]
