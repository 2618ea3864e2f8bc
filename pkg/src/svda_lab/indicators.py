"""Spectral interpretability indicators computed from attention snapshots."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .attention import AttentionRecord

INDICATOR_NAMES = (
    "entropy",
    "effective_rank",
    "alignment",
    "selectivity",
    "sparsity",
    "robustness",
)

DEFAULT_SPARSITY_EPS = 1e-2
DEFAULT_NOISE_STD = 0.01
DEFAULT_DRAWS = 8


@dataclass(frozen=True)
class IndicatorSample:
    epoch: int
    layer: int
    head: int
    name: str
    value: float | None


def spectral_entropy(sigma) -> float:
    """Shannon entropy (nats) of ``|sigma| / sum|sigma|``; 0 for an all-zero spectrum."""
    s = np.abs(np.asarray(sigma, dtype=np.float64).reshape(-1))
    if s.size < 1:
        raise ValueError("sigma must have at least one entry")
    total = s.sum()
    if total == 0.0:
        return 0.0
    p = s[s > 0] / total
    h = float(-(p * np.log(p)).sum())
    # rounding can push a uniform spectrum a hair outside [0, ln d]
    return min(max(h, 0.0), math.log(s.size))


def effective_rank(sigma) -> float:
    """``exp(entropy)``, kept inside ``[1, len(sigma)]`` against last-ulp rounding."""
    size = np.asarray(sigma).size
    return min(math.exp(spectral_entropy(sigma)), float(size))


def alignment_values(rec: AttentionRecord) -> np.ndarray:
    """All ``n*n`` cosines ``Q_i . K_j`` between normalized query and key rows."""
    return rec.q_normalized @ rec.k_normalized.T


def angular_alignment(rec: AttentionRecord) -> float:
    return float(alignment_values(rec).mean())


def alignment_percentiles(rec: AttentionRecord, qs=(5, 50, 95)) -> tuple[float, ...]:
    return tuple(float(v) for v in np.percentile(alignment_values(rec), qs))


def selectivity_rows(attention) -> np.ndarray:
    a = np.asarray(attention, dtype=np.float64)
    return 1.0 - (a * a).sum(axis=-1) / a.sum(axis=-1) ** 2


def selectivity(attention) -> float:
    """Mean over rows of ``1 - sum_j A_ij^2 / (sum_j A_ij)^2``."""
    return float(selectivity_rows(attention).mean())


def spectral_sparsity(sigma, eps: float = DEFAULT_SPARSITY_EPS) -> float:
    """Fraction of spectral entries with ``|sigma_i| < eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    s = np.abs(np.asarray(sigma, dtype=np.float64).reshape(-1))
    return float(np.count_nonzero(s < eps)) / s.size


def perturbation_robustness(
    model_slice: Callable[[np.ndarray], np.ndarray],
    x,
    noise_std: float = DEFAULT_NOISE_STD,
    num_draws: int = DEFAULT_DRAWS,
    seed: int = 0,
):
    """Mean Frobenius norm of ``A(x) - A(x + delta)`` over Gaussian draws of ``delta``.

    ``model_slice`` maps inputs to attention matrices. It may return a stack
    ``[..., n, n]``; the norm is then taken over the last two axes and an array
    of per-matrix means is returned instead of a float.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if num_draws < 1:
        raise ValueError("num_draws must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    clean = np.asarray(model_slice(x))
    total = np.zeros(clean.shape[:-2])
    for _ in range(num_draws):
        delta = rng.normal(0.0, noise_std, size=x.shape)
        diff = clean - np.asarray(model_slice(x + delta))
        total = total + np.sqrt((diff * diff).sum(axis=(-2, -1)))
    out = total / num_draws
    return float(out) if out.ndim == 0 else out


@dataclass
class RobustnessSpec:
    """How to evaluate robustness for a whole encoder at once.

    ``attention_fn`` maps tokens ``[B, n, d]`` to stacked attention
    ``[L, H, B, n, n]``; ``tokens`` is the fixed diagnostic batch.
    """

    attention_fn: Callable[[np.ndarray], np.ndarray]
    tokens: np.ndarray
    noise_std: float = DEFAULT_NOISE_STD
    num_draws: int = DEFAULT_DRAWS
    seed: int = 0

    def evaluate(self) -> np.ndarray:
        """Per-(layer, head, sample) robustness, shape ``[L, H, B]``."""
        return perturbation_robustness(
            self.attention_fn, self.tokens, self.noise_std, self.num_draws, self.seed
        )


def record_indicators(
    rec: AttentionRecord, eps: float = DEFAULT_SPARSITY_EPS
) -> dict[str, float | None]:
    """The five record-local indicators for one sample of one head."""
    has_sigma = rec.sigma is not None
    return {
        "entropy": spectral_entropy(rec.sigma) if has_sigma else None,
        "effective_rank": effective_rank(rec.sigma) if has_sigma else None,
        "alignment": angular_alignment(rec),
        "selectivity": selectivity(rec.attention),
        "sparsity": spectral_sparsity(rec.sigma, eps) if has_sigma else None,
    }


def per_sample_values(
    recs: Iterable[AttentionRecord],
    eps: float = DEFAULT_SPARSITY_EPS,
    robustness: RobustnessSpec | None = None,
) -> dict[tuple[int, int], dict[str, list[float | None]]]:
    """Indicator values per (layer, head), one list entry per diagnostic sample."""
    out: dict[tuple[int, int], dict[str, list]] = defaultdict(lambda: defaultdict(list))
    recs = sorted(recs, key=lambda r: (r.layer_index, r.head_index, r.sample_index))
    for rec in recs:
        for name, value in record_indicators(rec, eps).items():
            out[(rec.layer_index, rec.head_index)][name].append(value)
    if robustness is not None and out:
        table = robustness.evaluate()
        for (layer, head), values in out.items():
            values["robustness"] = [float(v) for v in table[layer, head]]
    return {key: dict(v) for key, v in out.items()}


def _mean(values: list[float | None]) -> float | None:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(values))


def collect_epoch(
    recs: Iterable[AttentionRecord],
    epoch: int,
    eps: float = DEFAULT_SPARSITY_EPS,
    robustness: RobustnessSpec | None = None,
) -> list[IndicatorSample]:
    """All six indicators for every (layer, head), averaged over the diagnostic samples.

    Output is ordered by (layer, head, indicator). Indicators that need sigma
    carry ``value=None`` for baseline heads; robustness is ``None`` when no
    ``RobustnessSpec`` is given.
    """
    samples = []
    for (layer, head), values in sorted(per_sample_values(recs, eps, robustness).items()):
        for name in INDICATOR_NAMES:
            samples.append(IndicatorSample(epoch, layer, head, name, _mean(values.get(name, []))))
    return samples
