"""One-shot, training-free active-learning data selection.

Pipeline: a binary feature dump (GEALFD01) is condensed into per-image
knowledge clusters (attention-filtered K-Means centroids, GEALKC01), and a
distance-weighted sampler picks a diverse image subset under a budget.
"""

from .baselines import BaselineConfig, kcenter_greedy, random_select
from .errors import (
    ConfigError,
    CorruptionError,
    DistanceDomainError,
    FormatError,
    GealError,
    ValidationError,
)
from .feature_store import (
    ImageRecord,
    NoiseSpec,
    generate_synthetic,
    read_dump,
    write_dump,
)
from .knowledge_clusters import (
    KnowledgeClusterSet,
    extract_all,
    extract_knowledge_clusters,
    filter_by_attention,
    kmeans,
    sort_regions_by_attention,
)
from .report import AnnotationManifest, coverage_stats, instance_totals, timing_summary
from .selector import (
    ClusterPool,
    SelectionConfig,
    SelectionResult,
    distance,
    init_state,
    sample_next,
    select,
    update_min_dist,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationManifest",
    "BaselineConfig",
    "ClusterPool",
    "ConfigError",
    "CorruptionError",
    "DistanceDomainError",
    "FormatError",
    "GealError",
    "ImageRecord",
    "KnowledgeClusterSet",
    "NoiseSpec",
    "SelectionConfig",
    "SelectionResult",
    "ValidationError",
    "coverage_stats",
    "distance",
    "extract_all",
    "extract_knowledge_clusters",
    "filter_by_attention",
    "generate_synthetic",
    "init_state",
    "instance_totals",
    "kcenter_greedy",
    "kmeans",
    "random_select",
    "read_dump",
    "sample_next",
    "select",
    "sort_regions_by_attention",
    "timing_summary",
    "update_min_dist",
    "write_dump",
]
