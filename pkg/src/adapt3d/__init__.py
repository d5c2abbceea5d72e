"""adapt3d: adaptive 2D-slice transformer for 3D volume classification."""

__version__ = "0.1.0"

from .numerics import Tape, Tensor  # noqa: F401
from .volumes import (  # noqa: F401
    LABEL_AD,
    LABEL_MCI,
    LABEL_NC,
    PhantomSpec,
    Volume,
    generate_phantom,
    load_volume,
    normalize_zmuv,
    resize_trilinear,
    save_volume,
)
from .morphology import StructuringElement, augment_sample, dilate, erode  # noqa: F401
from .slicer import SliceAllocation, SliceStack, extract_slices, important_indices  # noqa: F401
from .model import AdaptConfig, AdaptModel, AttentionRecord, attention_scores, param_count  # noqa: F401
from .trainer import (  # noqa: F401
    AdamW,
    TrainConfig,
    cosine_lr,
    evaluate,
    initial_allocation,
    load_checkpoint,
    save_checkpoint,
    train,
    update_allocation,
)
