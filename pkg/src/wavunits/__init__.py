"""Self-supervised audio representations for bioacoustics.

Pipeline: WAV decoding and resampling -> 39-dim MFCCs -> k-means acoustic
units -> masked unit-prediction pretraining of a CNN+transformer encoder
(two stages) -> transfer to clip classification and sliding-window event
detection, with accuracy / mAP / T-score evaluation.
"""

from .audio import AudioClip, AudioError, Segment, load_wav, resample, save_wav, window
from .checkpoint import (
    CheckpointContainer,
    CheckpointError,
    load_model,
    read_container,
    save_model,
    write_container,
)
from .evaluation import (
    DetectionEvent,
    EvalReport,
    MetricError,
    accuracy,
    average_precision,
    detect,
    mean_average_precision,
    segment_labels,
    t_scores,
)
from .features import (
    FeatureError,
    FeatureStats,
    FrameFeatures,
    compute_stats,
    mfcc39,
    standardize,
)
from .manifest import DatasetManifest, ManifestEntry, ManifestError, load_manifest, save_manifest
from .model import (
    ClassifierHead,
    EncoderModel,
    MaskSpec,
    ModelConfig,
    ModelError,
    PredictorHead,
    attach_classifier,
    classify,
    cnn_encode,
    forward,
    init_model,
    mean_pool,
    n_encoder_frames,
    pretrain_loss,
    sample_mask,
    unit_probs,
)
from .synth import build_all as build_synthetic_corpora
from .train import (
    Adam,
    AdamState,
    FinetuneConfig,
    PretrainConfig,
    TrainError,
    adam_step,
    finetune,
    pretrain,
    run_two_stage,
)
from .units import (
    Codebook,
    UnitError,
    UnitSequence,
    align_to_frame_count,
    assign,
    discover_units,
    kmeans_fit,
    relabel_from_model,
)

__version__ = "0.1.0"
