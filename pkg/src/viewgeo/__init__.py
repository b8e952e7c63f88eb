"""Single- and multi-view geometric consistency losses on posed fields."""

from .geometry import (
    Camera,
    Pose,
    backproject_depth,
    normal_from_depth,
    project_point,
    transform_points,
    unbiased_depth,
)
from .multi_view import (
    DegeneratePatchError,
    MvConfig,
    MvLossReport,
    PatchAnalysis,
    SampleSet,
    candidate_set,
    fuse_weights,
    mvgeo_loss,
    patch_pca,
    top_s_sample,
    validity_mask,
)
from .partition import (
    depth_weight_map,
    gradient_magnitude,
    percentile_threshold,
    sobel_gradients,
    texture_partition,
    trust_region,
)
from .single_view import (
    SvConfig,
    SvLossReport,
    cross_loss,
    discrepancy_field,
    svgeo_gradients,
    svgeo_loss,
    svn_loss,
    tv_normal_loss,
)
from .synth import (
    SceneSpec,
    ViewBundle,
    corrupt,
    look_at,
    make_two_view_spec,
    observed_bundles,
    render_scene,
)

__version__ = "0.1.0"
