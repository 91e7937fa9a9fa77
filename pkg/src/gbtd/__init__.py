"""Generalized block term decompositions, factored convolutions and residual
network accounting."""

__version__ = "0.1.0"

from . import backend
from .archspec import (
    ArchSpec,
    CountConvention,
    builtin,
    flop_count,
    model_size_mb,
    param_count,
    parse_notation,
    resnext_config,
)
from .convmap import (
    ConvKernel,
    FactoredConvUnit,
    compress_kernel,
    direct_conv2d,
    factored_forward,
    fuse_affine,
    grouped_conv2d,
)
from .cru import CollectiveGroup, collective_compress, shared_param_count, unit_forward
from .decomp import (
    AlsConfig,
    BlockTermDecomp,
    CPForm,
    TuckerTerm,
    btd_als,
    cp_reconstruct,
    degrade_to_cp,
    degrade_to_tucker,
    hosvd,
    random_btd,
    reconstruct,
)
from .errors import (
    AlsNumericalError,
    ArchiveError,
    DegenerateReferenceError,
    NotationError,
    RefusalError,
)
from .tensor import (
    IDENTITY,
    RELU,
    Activation,
    concat_mode,
    frobenius_norm,
    generalized_mode_n_product,
    mode_n_product,
    relative_error,
    unfold,
)
