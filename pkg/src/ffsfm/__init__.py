"""Feed-forward structure from motion over pairwise pointmap decodes."""

from .accumulate import AccumulateOptions, Reconstruction, accumulate, merge_confidence, symmetric_fuse
from .backend import (
    DecoderBackend,
    EdgeDecode,
    FileBackend,
    GroundTruthScene,
    OracleBackend,
    oracle_decode,
    synth_scene,
)
from .geometry import (
    ConfidenceMap,
    Intrinsics,
    Pointmap,
    RigidTransform,
    apply,
    compose,
    weighted_procrustes,
)
from .latent_align import AlignWeights, complexity_probe, latent_align_forward, pool_global
from .losses import LossConfig, LossReport, conf_loss, global_loss, pairwise_loss, total_loss
from .metrics import MetricReport, PoseSet, ate, chamfer, evaluate, maa30, relative_errors, rra_rta
from .pose_extract import ExtractionResult, PnPConfig, estimate_focal, extract_all, extract_pose
from .scene_graph import (
    SceneGraph,
    SimilarityMatrix,
    build_mst,
    build_spt,
    compute_similarity,
    overlap_similarity,
    select_root,
)

__version__ = "0.1.0"
