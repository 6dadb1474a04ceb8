"""Active-learning tile selection for detection by segmentation."""

from .clustering import AgglomerativeClusterer, agglomerative_cluster
from .embedding import TileEmbedder, embed_tile, global_avg_pool, grid_max_pool
from .evaluation import (
    connected_components,
    match_detections,
    pr_curve,
    threshold_map,
)
from .selection import (
    ActiveSelector,
    PoolState,
    cover_radius,
    hybrid_clustering,
    hybrid_naive,
    kcenter_greedy,
    random_select,
    robust_kcenter,
    select,
    top_k_uncertain,
)
from .tensor_store import (
    SelectionManifest,
    TileRecord,
    load_catalog,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)
from .uncertainty import (
    MCDropoutScorer,
    mc_dropout_score,
    mean_intensity,
    pixel_variance,
    preselect,
)

__version__ = "0.1.0"
