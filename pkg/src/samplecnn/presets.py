"""データセットごとのモデル構成

| preset | 入力長 | stem (kernel/stride) | ブロック数 | 出力                |
|--------|--------|----------------------|------------|---------------------|
| mtat   | 39366  | 2 / 2                | 9          | sigmoid-multilabel  |
| speech | 16000  | 2 / 2                | 8          | softmax-multiclass  |
| dcase  | 19683  | 3 / 3                | 8          | sigmoid-multilabel  |
| viz    | 729    | 3 / 3                | 5          | sigmoid-multilabel  |

block_kind が basic なら SampleCNN (最後のブロックだけをヘッドに渡す)、
rese2 なら ReSE-2-Multi (最後の 3 ブロックを連結する)
"""

from __future__ import annotations

from collections.abc import Callable

from .layers import BlockKind, BlockSpec, ConfigError
from .model import HeadSpec, ModelConfig, OutputKind, StemSpec, default_taps

__all__ = [
    "PRESETS",
    "dcase_config",
    "filter_plan",
    "mtat_config",
    "preset_config",
    "se_reduction_for",
    "speech_config",
    "viz_config",
]

STEM_FILTERS = 128
BLOCK_FILTERS = (128, 128, 128, 256, 256, 256, 256, 512, 512)
SE_REDUCTION = 16
HEAD_HIDDEN = 512


def _scaled(filters: int, scale: float) -> int:
    return max(1, round(filters * scale))


def filter_plan(n_blocks: int, scale: float = 1.0) -> tuple[int, ...]:
    """ブロックごとのフィルタ数 (足りない分は最後の値を繰り返す)"""
    if n_blocks < 1:
        raise ConfigError(f"ブロック数は 1 以上です: {n_blocks}")
    if scale <= 0:
        raise ConfigError(f"filters_scale は正である必要があります: {scale}")
    plan = list(BLOCK_FILTERS[:n_blocks])
    plan += [BLOCK_FILTERS[-1]] * (n_blocks - len(plan))
    return tuple(_scaled(f, scale) for f in plan)


def se_reduction_for(filters: int) -> int:
    """min(16, filters / 4) から始めて filters を割り切る値まで減らす"""
    reduction = max(1, min(SE_REDUCTION, filters // 4))
    while filters % reduction:
        reduction -= 1
    return reduction


def _build(
    *,
    input_len: int,
    stem_kernel: int,
    n_blocks: int,
    block_kind: BlockKind,
    n_classes: int,
    output: OutputKind,
    filters_scale: float,
    sample_rate: int = 16000,
) -> ModelConfig:
    blocks = tuple(
        BlockSpec(kind=block_kind, filters=f, se_reduction=se_reduction_for(f))
        for f in filter_plan(n_blocks, filters_scale)
    )
    config = ModelConfig(
        input_len=input_len,
        sample_rate=sample_rate,
        stem=StemSpec(
            kernel=stem_kernel,
            stride=stem_kernel,
            filters=_scaled(STEM_FILTERS, filters_scale),
        ),
        blocks=blocks,
        concat_taps=default_taps(blocks),
        head=HeadSpec(
            n_classes=n_classes,
            hidden=_scaled(HEAD_HIDDEN, filters_scale),
            output=output,
        ),
    )
    config.validate()
    return config


def mtat_config(
    block_kind: BlockKind = BlockKind.BASIC, n_classes: int = 50, filters_scale: float = 1.0
) -> ModelConfig:
    """MagnaTagATune (タグ付け、39366 サンプル = 2 x 3^9)"""
    return _build(
        input_len=39366,
        stem_kernel=2,
        n_blocks=9,
        block_kind=block_kind,
        n_classes=n_classes,
        output=OutputKind.SIGMOID_MULTILABEL,
        filters_scale=filters_scale,
    )


def speech_config(
    block_kind: BlockKind = BlockKind.BASIC, n_classes: int = 12, filters_scale: float = 1.0
) -> ModelConfig:
    """音声コマンド (1 秒 16000 サンプル、余りは切り捨てプーリングで落とす)"""
    return _build(
        input_len=16000,
        stem_kernel=2,
        n_blocks=8,
        block_kind=block_kind,
        n_classes=n_classes,
        output=OutputKind.SOFTMAX_MULTICLASS,
        filters_scale=filters_scale,
    )


def dcase_config(
    block_kind: BlockKind = BlockKind.BASIC, n_classes: int = 17, filters_scale: float = 1.0
) -> ModelConfig:
    """DCASE 2017 task 4 (イベントタグ付け、19683 サンプル = 3^9)"""
    return _build(
        input_len=19683,
        stem_kernel=3,
        n_blocks=8,
        block_kind=block_kind,
        n_classes=n_classes,
        output=OutputKind.SIGMOID_MULTILABEL,
        filters_scale=filters_scale,
    )


def viz_config(
    block_kind: BlockKind = BlockKind.BASIC, n_classes: int = 50, filters_scale: float = 1.0
) -> ModelConfig:
    """フィルタ可視化用 (729 サンプルが 6 層目で時間長 1 になる)"""
    return _build(
        input_len=729,
        stem_kernel=3,
        n_blocks=5,
        block_kind=block_kind,
        n_classes=n_classes,
        output=OutputKind.SIGMOID_MULTILABEL,
        filters_scale=filters_scale,
    )


PRESETS: dict[str, Callable[..., ModelConfig]] = {
    "mtat": mtat_config,
    "speech": speech_config,
    "dcase": dcase_config,
    "viz": viz_config,
}


def preset_config(
    name: str,
    block_kind: BlockKind | str = BlockKind.BASIC,
    n_classes: int | None = None,
    filters_scale: float = 1.0,
) -> ModelConfig:
    """名前からプリセットを作る

    Raises:
        ConfigError: 未知のプリセット名・ブロック種別
    """
    try:
        factory = PRESETS[name]
    except KeyError as e:
        raise ConfigError(f"未知のプリセットです: {name!r} (候補: {sorted(PRESETS)})") from e
    try:
        kind = BlockKind(block_kind)
    except ValueError as e:
        raise ConfigError(f"未知の block_kind です: {block_kind!r}") from e
    if n_classes is None:
        return factory(kind, filters_scale=filters_scale)
    return factory(kind, n_classes=n_classes, filters_scale=filters_scale)
