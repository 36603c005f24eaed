"""Fully joint speech-enhancement + speaker-verification training at desk
scale: a synthetic source-filter corpus, SNR-exact noise mixing, a log-mel
frontend, three systems (baseline encoder, U-Net, extended U-Net), their
losses, and an EER/minDCF evaluation harness.
"""

__version__ = "0.1.0"

from .corpus import (
    CorpusAudioSource,
    CorpusManifest,
    Waveform,
    load_manifest,
    mix_at_snr,
    read_wav,
    save_manifest,
    split_noise_pool,
    synth_noise_pool,
    synth_speaker_corpus,
    write_wav,
)
from .frontend import (
    DEFAULT_FRONTEND,
    FrontendConfig,
    MelSpec,
    build_mel_filterbank,
    log_mel,
)
from .losses import LossBundle, apn_loss, apn_similarity, cce_loss, mse_fe_loss, total_loss
from .metrics import (
    Condition,
    Trial,
    TrialScoreSet,
    compute_eer,
    compute_min_dcf,
    cosine_score,
    parse_trials,
    run_trials,
)
from .netcore import (
    EXUNET_L_WIDTH_SCALE,
    JointNet,
    ModelConfig,
    build_model,
    count_params,
    extract_embedding,
)
from .trainer import TrainConfig, grad_check, lr_schedule, sample_minibatch, train
