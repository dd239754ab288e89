"""texsr: multi-view texture super-resolution.

Reconstructs a high-resolution texture raster from several low-resolution
observations by inverting an explicit image-formation model (projection,
flow warp, Gaussian blur, box downsampling) with an unrolled primal-dual
solver, and learns the solver's free parameters (a per-texel regularization
weight map, per-view blur widths, and a small residual prior network) by
differentiating through the unrolled iterations.
"""

from .atlas import (
    PatchSet,
    TextureAtlas,
    ViewObservation,
    dilate_mask,
    extract_patches,
    init_atlas_average,
)
from .learn import (
    LearnableParams,
    LossTerms,
    PriorNet,
    TrainConfig,
    adam_step,
    backprop_through_solver,
    init_params,
    loss,
    prior_backward,
    prior_forward,
    run_pipeline,
    train_epoch,
)
from .metrics import MetricReport, evaluate, psnr, sre, ssim
from .operators import (
    BlurKernel,
    FlowField,
    ProjectionSpec,
    SparseLinearMap,
    ViewChain,
    blur_apply,
    build_blur,
    build_downsample,
    build_projection,
    build_warp,
    compose_chain,
)
from .solver import SolverConfig, SolverState, energy, pd_step, run_unrolled
from .synth import GroundTruth, SceneSpec, gen_texture, make_pseudo_gt, render_views

__version__ = "0.1.0"
