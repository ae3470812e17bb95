"""Answer-quality and rank-correlation metrics.

Answer normalization follows the SQuAD convention (lowercase, strip
punctuation, drop English articles, collapse whitespace) so that exact
match and token F1 agree with the standard open-domain QA harnesses.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from cival.types import AnswerSet

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class MetricKind(str, Enum):
    EXACT_MATCH = "exact-match"
    TOKEN_F1 = "token-f1"
    # Multiple-choice accuracy is exact match over the choice label set.
    ACCURACY = "accuracy"


class UndefinedCorrelationError(ValueError):
    """Raised when rank correlation is undefined (constant ranks)."""


def normalize_answer(text: str) -> str:
    """Lowercase, remove punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def _aliases(answers: "AnswerSet | Iterable[str]") -> tuple[str, ...]:
    inner = getattr(answers, "answers", answers)
    return tuple(inner)


def exact_match(prediction: str, answers: "AnswerSet | Iterable[str]") -> float:
    """1.0 iff the normalized prediction equals any normalized alias."""
    pred = normalize_answer(prediction)
    return 1.0 if any(pred == normalize_answer(a) for a in _aliases(answers)) else 0.0


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, answers: "AnswerSet | Iterable[str]") -> float:
    """Max over aliases of the token-level F1 on normalized tokens."""
    pred_tokens = normalize_answer(prediction).split()
    return max(
        _f1_single(pred_tokens, normalize_answer(a).split()) for a in _aliases(answers)
    )


def score_text(kind: MetricKind, prediction: str, answers: "AnswerSet | Iterable[str]") -> float:
    """Dispatch a prediction/answers pair to the chosen metric."""
    if kind is MetricKind.TOKEN_F1:
        return token_f1(prediction, answers)
    return exact_match(prediction, answers)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank range."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.shape[0], dtype=float)
    i = 0
    while i < arr.shape[0]:
        j = i
        while j + 1 < arr.shape[0] and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks.

    Raises ValueError on misaligned or too-short inputs and
    UndefinedCorrelationError when either side has zero rank variance.
    """
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("need at least 2 observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = float(np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))
    if denom == 0.0:
        raise UndefinedCorrelationError("zero rank variance")
    rho = float(np.sum(rx * ry) / denom)
    return min(1.0, max(-1.0, rho))
