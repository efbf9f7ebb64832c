"""Dataset manifests, augmentation and batch pipeline."""

from goelan.data.manifest import (
    CATARACT_CLASSES,
    CATARACT_SPLIT_SIZES,
    AnnotationError,
    DatasetError,
    DatasetManifest,
    Sample,
    format_annotation,
    load_manifest,
    parse_annotation_file,
    parse_detection_file,
    read_image,
    write_image,
)
from goelan.data.pipeline import Batch, DetectionDataset, build_pipeline, mosaic_active
from goelan.data.synthetic import make_synthetic_dataset

__all__ = [
    "CATARACT_CLASSES", "CATARACT_SPLIT_SIZES", "AnnotationError", "DatasetError", "DatasetManifest", "Sample", "format_annotation",
    "load_manifest", "parse_annotation_file", "parse_detection_file", "read_image", "write_image",
    "Batch", "DetectionDataset", "build_pipeline", "mosaic_active", "make_synthetic_dataset",
]
