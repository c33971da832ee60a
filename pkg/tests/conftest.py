import numpy as np
import pytest

from samplecnn.dataset import TaskKind, synth_tone_dataset
from samplecnn.layers import BlockKind, BlockSpec
from samplecnn.model import HeadSpec, ModelConfig, OutputKind, StemSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(
    kind: BlockKind = BlockKind.BASIC,
    *,
    n_classes: int = 3,
    output: OutputKind = OutputKind.SIGMOID_MULTILABEL,
    filters: tuple[int, ...] = (4, 6, 8),
    input_len: int = 81,
    hidden: int = 8,
) -> ModelConfig:
    """stem 3/3 と pool 3 のブロックからなる小さなモデル (81 サンプルなら最後の時間長は 1)"""
    blocks = tuple(
        BlockSpec(kind=kind, filters=f, se_reduction=2 if f % 2 == 0 else 1) for f in filters
    )
    taps = tuple(range(len(blocks))) if kind is BlockKind.RESE2 else (len(blocks) - 1,)
    return ModelConfig(
        input_len=input_len,
        stem=StemSpec(kernel=3, stride=3, filters=4),
        blocks=blocks,
        concat_taps=taps[-3:],
        head=HeadSpec(n_classes=n_classes, hidden=hidden, output=output),
    )


@pytest.fixture
def basic_config():
    return tiny_config(BlockKind.BASIC)


@pytest.fixture
def rese2_config():
    return tiny_config(BlockKind.RESE2, filters=(4, 8, 8))


@pytest.fixture
def tone_manifest(tmp_path):
    """4 クラスの合成トーンデータセット (multilabel、81 サンプル)"""
    return synth_tone_dataset(
        tmp_path / "tones",
        n_classes=4,
        clips_per_split={"train": 8, "valid": 8, "test": 8},
        clip_len=81,
        task=TaskKind.MULTILABEL,
        seed=7,
    )


@pytest.fixture
def tone_manifest_multiclass(tmp_path):
    """3 クラスの合成トーンデータセット (multiclass、81 サンプル)"""
    return synth_tone_dataset(
        tmp_path / "tones-mc",
        n_classes=3,
        clips_per_split={"train": 6, "valid": 6, "test": 6},
        clip_len=81,
        task=TaskKind.MULTICLASS,
        seed=11,
    )
