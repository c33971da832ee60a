"""サンプルレベル raw waveform CNN

SampleCNN と ReSE-2-Multi (残差 + Squeeze-and-Excitation + 多層連結) の
学習・評価・フィルタ可視化を numpy と numba だけで行う
"""

from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
)
from .gradcheck import grad_check, kink_monitor, smooth_point
from .layers import (
    BlockKind,
    BlockSpec,
    ConfigError,
    basic_block,
    batchnorm,
    conv1d_forward,
    rese2_block,
    se_module,
)
from .model import (
    HeadSpec,
    Model,
    ModelConfig,
    ModelParams,
    OutputKind,
    StemSpec,
    build_model,
    extent_trace,
    receptive_field,
)
from .presets import dcase_config, mtat_config, preset_config, speech_config, viz_config
from .audio import Waveform, WavFormatError, decode_wav, encode_wav, read_wav, resample
from .dataset import (
    ClipRecord,
    Manifest,
    ManifestError,
    SegmentPlan,
    Split,
    TaskKind,
    load_clips,
    load_manifest,
    plan_segments,
    synth_tone_dataset,
)
from .losses import bce_multilabel_loss, cross_entropy_loss
from .optim import OptimizerConfig, OptimizerKind, OptimizerState, optimizer_step
from .metrics import accuracy, instance_f1, macro_auc, micro_auc, roc_auc
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDivergedError, evaluate, predict_clip, train
from .viz import (
    SpectrumSheet,
    VizConfig,
    activation_maximization,
    emit_sheet,
    sort_by_peak,
    spectrum,
    visualize_layer,
)
from .config import RunConfig, load_run_config

__all__ = [
    # テンソルと自動微分
    "NonFiniteError",
    "Tensor",
    "backward",
    "get_default_dtype",
    "no_grad",
    "precision",
    "grad_check",
    "kink_monitor",
    "smooth_point",
    # 層とモデル
    "BlockKind",
    "BlockSpec",
    "ConfigError",
    "basic_block",
    "batchnorm",
    "conv1d_forward",
    "rese2_block",
    "se_module",
    "HeadSpec",
    "Model",
    "ModelConfig",
    "ModelParams",
    "OutputKind",
    "StemSpec",
    "build_model",
    "extent_trace",
    "receptive_field",
    # プリセット
    "dcase_config",
    "mtat_config",
    "preset_config",
    "speech_config",
    "viz_config",
    # 音声とデータセット
    "Waveform",
    "WavFormatError",
    "decode_wav",
    "encode_wav",
    "read_wav",
    "resample",
    "ClipRecord",
    "Manifest",
    "ManifestError",
    "SegmentPlan",
    "Split",
    "TaskKind",
    "load_clips",
    "load_manifest",
    "plan_segments",
    "synth_tone_dataset",
    # 学習と評価
    "bce_multilabel_loss",
    "cross_entropy_loss",
    "OptimizerConfig",
    "OptimizerKind",
    "OptimizerState",
    "optimizer_step",
    "accuracy",
    "instance_f1",
    "macro_auc",
    "micro_auc",
    "roc_auc",
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "TrainingDivergedError",
    "evaluate",
    "predict_clip",
    "train",
    # フィルタ可視化
    "SpectrumSheet",
    "VizConfig",
    "activation_maximization",
    "emit_sheet",
    "sort_by_peak",
    "spectrum",
    "visualize_layer",
    # 実行設定
    "RunConfig",
    "load_run_config",
]
