"""評価指標

- ROC AUC: 正例が負例より上に順位付けされる確率 (同点は 0.5)
- macro AUC: 正例と負例の両方を持つクラスの AUC の単純平均
- micro AUC: 全クラスをまとめた 1 つの AUC
- instance F1: インスタンスごとの F 値の平均
- accuracy: argmax 一致率 (同点は小さいインデックス)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

__all__ = ["AucSummary", "accuracy", "instance_f1", "macro_auc", "micro_auc", "roc_auc"]


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney の順位和で求める AUC

    Raises:
        ValueError: 正例か負例がない場合、形状不一致
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} と labels {labels.shape} の形状が一致しません")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels は 0 か 1 である必要があります")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"正例と負例の両方が必要です: positives={n_pos}, negatives={n_neg}")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


@dataclass(frozen=True)
class AucSummary:
    """macro AUC と除外したクラス

    per_class は除外したクラスが NaN
    """

    value: float
    per_class: np.ndarray
    excluded: tuple[int, ...]


def macro_auc(scores: np.ndarray, truth: np.ndarray) -> AucSummary:
    """クラスごとの AUC の単純平均 (全正例・全負例のクラスは除外して警告する)

    Raises:
        ValueError: 有効なクラスが 1 つもない場合
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.ndim != 2 or scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} と truth {truth.shape} は同じ [N, C] です")
    per_class = np.full(scores.shape[1], np.nan)
    excluded: list[int] = []
    for c in range(scores.shape[1]):
        column = truth[:, c]
        if column.all() or not column.any():
            excluded.append(c)
            continue
        per_class[c] = roc_auc(scores[:, c], column)
    if excluded:
        logger.warning("macro AUC: %d classes excluded (all positive or all negative)", len(excluded))
    if len(excluded) == scores.shape[1]:
        raise ValueError("AUC を計算できるクラスがありません")
    return AucSummary(float(np.nanmean(per_class)), per_class, tuple(excluded))


def micro_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """全 (インスタンス, クラス) の組をまとめた AUC"""
    return roc_auc(np.asarray(scores).reshape(-1), np.asarray(truth).reshape(-1))


def instance_f1(scores: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """score >= threshold で二値化したインスタンスごとの F 値の平均

    予測と正解がどちらも空なら 1、片方だけ空なら 0
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold は (0, 1) の範囲です: {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.ndim != 2 or scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} と truth {truth.shape} は同じ [N, C] です")
    predicted = scores >= threshold
    hits = (predicted & truth).sum(axis=1)
    n_pred = predicted.sum(axis=1)
    n_true = truth.sum(axis=1)
    f1 = np.zeros(scores.shape[0])
    both_empty = (n_pred == 0) & (n_true == 0)
    f1[both_empty] = 1.0
    # F = 2PR / (P + R) = 2 |A ∩ B| / (|A| + |B|)
    nonempty = (n_pred > 0) & (n_true > 0)
    f1[nonempty] = 2 * hits[nonempty] / (n_pred[nonempty] + n_true[nonempty])
    return float(f1.mean())


def accuracy(scores: np.ndarray, truth: np.ndarray) -> float:
    scores = np.asarray(scores)
    truth = np.asarray(truth).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != truth.shape[0] or scores.shape[0] == 0:
        raise ValueError(f"scores {scores.shape} と truth {truth.shape} の形状が不正です")
    return float(np.mean(np.argmax(scores, axis=1) == truth))
