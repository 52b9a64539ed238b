"""graspkit: training-free hand-object grasp optimization toolkit."""

from .geometry import (
    ConciseMesh,
    KnnIndex,
    PointCloud,
    TriMesh,
    alpha_shape,
    build_knn,
    farthest_point_sample,
    is_inside,
    is_watertight,
    nearest_on_set,
    query_knn,
    upsample_to_target,
    vertex_normals,
)
from .meshio import load_mesh, save_mesh
from .gaussmap import (
    GaussianSet,
    LaplacianStencil,
    VertexGaussianMap,
    bind_vertices,
    build_stencil,
    laplacian,
    laplacian_loss,
)
from .hand import (
    HandModel,
    HandPose,
    clamp_pose,
    keypoints,
    keypoints_21,
    lbs_forward,
    lbs_jacobians,
    load_hand_model,
    make_test_hand,
)
from .hoiopt import (
    AdamState,
    ContactMasks,
    HoiParams,
    HoiScene,
    LossWeights,
    adam_step,
    compose_hand,
    detect_penetration,
    init_contact_masks,
    loss_cons,
    loss_hc,
    loss_oc,
    loss_pene,
    loss_repos,
    metrics,
    optimize,
    total_loss,
)
from .refine import (
    CandidateSet,
    SelectionTranscript,
    VlmSelector,
    candidate_grid,
    prefilter,
    refine_translation,
    tournament_select,
)
from .render import Camera, Image, default_hoi_camera, rasterize, write_png

__version__ = "0.1.0"
