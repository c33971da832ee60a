"""損失関数"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .dataset import TaskKind
from .tensor import Tensor

__all__ = ["bce_multilabel_loss", "cross_entropy_loss", "task_loss"]


def bce_multilabel_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """N x C 要素の平均 -[t log sigmoid(z) + (1 - t) log(1 - sigmoid(z))]

    max(z, 0) - z t + log(1 + exp(-|z|)) の形で計算するので大きな |z| でも溢れない

    Raises:
        ValueError: 形状不一致、または target が {0, 1} 以外
    """
    return F.bce_with_logits(logits, targets)


def cross_entropy_loss(logits: Tensor, classes: np.ndarray) -> Tensor:
    """平均 -log softmax(z)[class]

    Raises:
        ValueError: クラス番号が範囲外
    """
    return F.cross_entropy(logits, classes)


def task_loss(logits: Tensor, targets: np.ndarray, task: TaskKind) -> Tensor:
    if task is TaskKind.MULTICLASS:
        return cross_entropy_loss(logits, targets)
    return bce_multilabel_loss(logits, targets)
