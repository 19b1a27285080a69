"""Relevance propagation engine and evaluation harness for feed-forward CNNs."""

from .engine import ContributionMap, MethodConfig, attribute, pixel_contributions
from .errors import (
    DimensionError,
    DomainError,
    EngineError,
    GraphSizeError,
    GuardedDenominatorError,
    ImageFormatError,
    ManifestShapeError,
    ModelFormatError,
    NonFiniteWeightError,
    NumericError,
    TruncatedBlobError,
    VersionMismatchError,
)
from .harness import (
    Dataset,
    DatasetRecord,
    EvalRow,
    accuracy_curve,
    apply_mask,
    avg_distance,
    cross_compare,
    distance_transform,
    load_dataset,
    make_mask,
    pointing_game,
    quality_curve,
    random_mask_curve,
    write_csv,
)
from .model_graph import (
    AvgPool2D,
    Conv2D,
    Dense,
    Flatten,
    ForwardTrace,
    MaxPool2D,
    Network,
    Preprocessing,
    ReLU,
    ResidualBlock,
    forward,
    predict_class,
    prepare_input,
)
from .model_io import (
    load_image,
    load_mask,
    load_model,
    save_image,
    save_mask,
    save_model,
    save_model_files,
)
from .tensor_core import (
    as_tensor,
    conv2d,
    conv2d_transpose,
    matvec,
    top_fraction_indices,
)

__version__ = "0.1.0"
