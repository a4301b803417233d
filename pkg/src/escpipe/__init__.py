"""Two-level environmental sound classification pipeline.

Decode and resample audio, apply time-domain modifiers (silence-crop-and-tile,
stationary spectral gating, Butterworth filters), extract log-mel or PCEN
spectrogram features, and train a coarse-to-fine pair of classifier levels
over a seven-group sound taxonomy.
"""

from .audio import CANONICAL_RATE, AudioClip, decode_wav, encode_wav, resample
from .dataset import (
    EscRecord,
    GroupLabel,
    Partition,
    SplitAssignment,
    Taxonomy,
    group_of,
    make_standard_splits,
    parse_meta_csv,
    split,
    split_sizes,
    subset_for_group,
)
from .features import (
    FeatureVector,
    MelParams,
    PcenParams,
    SpectrogramMatrix,
    StftParams,
    frontend_spectrogram,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    pcen,
    pool_features,
    render_png,
    stft_power,
)
from .model import (
    Metrics,
    MlpHead,
    TrainConfig,
    TrainHistory,
    evaluate,
    forward,
    init_head,
    load_model,
    loss_and_grad,
    save_model,
    train,
)
from .modifiers import (
    BiquadCascade,
    CropParams,
    FilterKind,
    FilterSpec,
    FiltrationMode,
    GateParams,
    apply_iir,
    apply_modifier,
    crop_audio,
    design_butterworth,
    max_time_len,
    spectral_gate,
)
from .pipeline import (
    ExperimentReport,
    FeatureManifest,
    FeatureStore,
    FrontendConfig,
    Prediction,
    TwoLevelModel,
    classify,
    classify_features,
    evaluate_end_to_end,
    evaluate_isolated,
    load_bundle,
    preprocess_corpus,
    save_bundle,
    select_group,
    train_two_level,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
