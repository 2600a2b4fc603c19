"""dwiharm: dictionary-learning based harmonization of diffusion MRI.

Overcomplete dictionaries are trained on spatial-angular patches pooled from
one or several scanners; new datasets are reconstructed against the fixed
dictionary with a per-patch, automatically selected lasso penalty (AIC or
cross-validation), optionally mapping across spatial resolutions by coding
with spatially downsampled atoms and reconstructing with the full ones.
"""

from .alteration import AlterationConfig, alter_volume, make_phantom
from .core import (
    BrainMask,
    DiffusionVolume,
    GradientTable,
    Region,
    load_mask,
    load_volume,
    save_volume,
)
from .dictionary import (
    Dictionary,
    TrainConfig,
    dictionary_update,
    init_dictionary,
    load_dictionary,
    save_dictionary,
    train,
)
from .errors import (
    ArgumentError,
    DegenerateDataError,
    EvaluationError,
    ExtractionError,
    FitError,
    FormatError,
    HarmonizationError,
)
from .evaluation import (
    fdr_correct,
    g_confidence_interval,
    hedges_g,
    kl_symmetric,
    paired_ttest,
    percentage_difference,
    raw_percentage_difference,
    voxel_errors,
)
from .harmonizer import (
    HarmonizeConfig,
    downsample_dictionary,
    harmonize,
    train_target_dictionary,
)
from .lasso import (
    PathConfig,
    SparseCode,
    lambda_max,
    select_aic,
    select_cv,
    solve_lasso,
    solve_path,
)
from .metrics import ShFit, TensorFit, adc, fa, fit_dti, fit_sh, rish
from .patching import (
    PatchConfig,
    PatchSet,
    angular_neighbors,
    extract_patches,
    reassemble,
)

__version__ = "0.1.0"

__all__ = [
    "AlterationConfig",
    "ArgumentError",
    "BrainMask",
    "DegenerateDataError",
    "Dictionary",
    "DiffusionVolume",
    "EvaluationError",
    "ExtractionError",
    "FitError",
    "FormatError",
    "GradientTable",
    "HarmonizationError",
    "HarmonizeConfig",
    "PatchConfig",
    "PatchSet",
    "PathConfig",
    "Region",
    "ShFit",
    "SparseCode",
    "TensorFit",
    "TrainConfig",
    "adc",
    "alter_volume",
    "angular_neighbors",
    "dictionary_update",
    "downsample_dictionary",
    "extract_patches",
    "fa",
    "fdr_correct",
    "fit_dti",
    "fit_sh",
    "g_confidence_interval",
    "harmonize",
    "hedges_g",
    "init_dictionary",
    "kl_symmetric",
    "lambda_max",
    "load_dictionary",
    "load_mask",
    "load_volume",
    "make_phantom",
    "paired_ttest",
    "percentage_difference",
    "raw_percentage_difference",
    "reassemble",
    "rish",
    "save_dictionary",
    "save_volume",
    "select_aic",
    "select_cv",
    "solve_lasso",
    "solve_path",
    "train",
    "train_target_dictionary",
    "voxel_errors",
]
