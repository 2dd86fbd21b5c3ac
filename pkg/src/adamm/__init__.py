"""Desk-scale missing-modality brain-tumor segmentation harness."""

from .volumes import (
    MODALITY_NAMES,
    LESION_NAMES,
    LabelVolume,
    ModalityCombination,
    MultiModalVolume,
    PresenceLabels,
    RegionMasks,
    VolumeFormatError,
    ZeroVarianceError,
    apply_modality_mask,
    derive_presence_labels,
    derive_regions,
    enumerate_combinations,
    load_volume,
    normalize_intensity,
    save_volume,
    synth_case,
)
from .backbone import (
    ADAPTER_SLOTS,
    AdapterBank,
    Backbone,
    BackboneConfig,
    FeatureBundle,
    adapter_similarity,
)
from .garm import GarmModule, GraphNet3D, GraphRep, soft_assign
from .bbdm import (
    Discriminator,
    GramTriple,
    adversarial_loss,
    bbdm_loss,
    discriminator_bce,
    fuse_encoder_bottleneck,
    gram_triple,
    gsme_loss,
)
from .lgrm import (
    PresenceHead,
    gate_segmentation,
    lgrm_loss,
    presence_bce,
    presence_weights,
    weighted_dice_loss,
)
from .metrics import (
    MetricsRecord,
    RegionMetrics,
    SweepTable,
    dice,
    evaluate_case,
    hd95,
    iou,
    sensitivity,
    sweep_aggregate,
    table_to_csv,
    table_to_text,
)
from .trainer import (
    AdammModel,
    Case,
    ConfigError,
    NumericalAbort,
    TrainConfig,
    TrainState,
    eval_sweep,
    infer_case,
    init_state,
    joint_loss,
    load_checkpoint,
    load_dataset,
    make_synthetic_dataset,
    sample_combo,
    save_checkpoint,
    train,
    train_step,
    write_synthetic_dataset,
)

__version__ = "0.1.0"
