"""3D time-sequence EIT reconstruction with a dynamic untrained-network prior.

Submodules:
    geometry      voxel grids, electrode belts, measurement protocols
    forward       lead-field sensitivity operator, voltage synthesis, noise
    phantom       dynamic thoracic phantoms and measurement simulation
    regularizers  spatio-temporal total variation
    priornet      the untrained volumetric reconstruction network
    pipeline      warm-started, temporally propagated sequence reconstruction
    baselines     Tikhonov and spatial-TV single-frame solvers
    metrics       CC / PSNR / MSSIM / ERR evaluation
    cli           the ``d2ip`` command-line harness
"""

from .geometry import (
    Extent,
    GridGeometry,
    THORAX_BOX,
    UNIT_BOX,
    build_grid,
    default_electrode_array,
    devectorize,
    generate_protocol,
    place_electrodes,
    vectorize,
)
from .forward import (
    SensitivityMatrix,
    VoltageFrame,
    VoltageSequence,
    add_noise,
    assemble_sensitivity,
    forward_project,
    normalize_sensitivity,
)
from .phantom import ConductivitySequence, make_case1, make_case2, synthesize_measurements
from .regularizers import FrameHistory, TVWeights, decay_weight, spatial_tv, temporal_tv, tv4d
from .priornet import NetworkConfig, NoiseInput, ParameterState, init_parameters, sample_noise_input
from .pipeline import (
    ReconstructionResult,
    RunConfig,
    ablation_mode,
    reconstruct_frame,
    reconstruct_sequence,
    upws_pretrain,
)
from .baselines import TVConfig, TikhonovConfig, tikhonov, tv_reconstruct
from .metrics import MetricsReport, cc, err, evaluate_sequence, mssim, psnr

__version__ = "0.1.0"
