"""SVD-inspired and standard scaled dot-product attention heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import Tensor, concat, l2_normalize_rows, matmul, softmax_rows

NORM_EPS = 1e-8


class Mechanism(str, Enum):
    SVDA = "svda"
    BASELINE = "baseline"


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    num_heads: int = 4
    d_k: int = 16
    mechanism: Mechanism = Mechanism.SVDA
    capture_diagnostics: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        for name in ("d_model", "num_heads", "d_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_heads * self.d_k != self.d_model:
            raise ValueError(
                f"num_heads * d_k must equal d_model ({self.num_heads} * {self.d_k} != {self.d_model})"
            )


@dataclass
class HeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    sigma: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.w_q, self.w_k, self.w_v]
        if self.sigma is not None:
            out.append(self.sigma)
        return out


@dataclass
class AttentionRecord:
    """Detached per-head snapshot used by the indicators.

    Arrays are ``[n, d_k]`` / ``[n, n]`` for a single sample. ``sigma`` is
    ``None`` for the baseline mechanism.
    """

    layer_index: int
    head_index: int
    q_normalized: np.ndarray
    k_normalized: np.ndarray
    sigma: np.ndarray | None
    attention: np.ndarray
    sample_index: int = 0


def _records(layer, head, q, k, sigma, attn) -> list[AttentionRecord]:
    sig = None if sigma is None else sigma.copy()
    if attn.ndim == 2:
        return [AttentionRecord(layer, head, q, k, sig, attn, 0)]
    q = q.reshape(-1, *q.shape[-2:])
    k = k.reshape(-1, *k.shape[-2:])
    attn = attn.reshape(-1, *attn.shape[-2:])
    return [
        AttentionRecord(layer, head, q[b], k[b], sig, attn[b], b) for b in range(attn.shape[0])
    ]


def svda_head_forward(
    x: Tensor,
    p: HeadParams,
    d_k: int,
    capture: bool = True,
    layer_index: int = 0,
    head_index: int = 0,
) -> tuple[Tensor, list[AttentionRecord]]:
    """One SVDA head: ``softmax(Q diag(sigma) K^T / sqrt(d_k)) V`` with unit-norm Q, K rows.

    ``x`` is ``[n, d_model]`` or batched ``[B, n, d_model]``; one record per
    sample is returned when ``capture`` is set.
    """
    if p.sigma is None:
        raise ValueError("SVDA head requires a sigma vector")
    if p.sigma.shape != (d_k,):
        raise ValueError(f"sigma must have shape ({d_k},), got {p.sigma.shape}")
    q = l2_normalize_rows(matmul(x, p.w_q), NORM_EPS)
    k = l2_normalize_rows(matmul(x, p.w_k), NORM_EPS)
    v = matmul(x, p.w_v)
    logits = matmul(q * p.sigma, k.T) / math.sqrt(d_k)
    a = softmax_rows(logits)
    y = matmul(a, v)
    recs = _records(layer_index, head_index, q.data, k.data, p.sigma.data, a.data) if capture else []
    return y, recs


def baseline_head_forward(
    x: Tensor,
    p: HeadParams,
    d_k: int,
    capture: bool = True,
    layer_index: int = 0,
    head_index: int = 0,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Standard head: ``softmax(Q K^T / sqrt(d_k)) V`` on raw projections.

    The record still carries row-normalized Q, K (computed outside the graph)
    so that angular alignment can be compared across mechanisms.
    """
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    a = softmax_rows(matmul(q, k.T) / math.sqrt(d_k))
    y = matmul(a, v)
    recs: list[AttentionRecord] = []
    if capture:
        qn = q.data / np.maximum(np.linalg.norm(q.data, axis=-1, keepdims=True), NORM_EPS)
        kn = k.data / np.maximum(np.linalg.norm(k.data, axis=-1, keepdims=True), NORM_EPS)
        recs = _records(layer_index, head_index, qn, kn, None, a.data)
    return y, recs


def multi_head_forward(
    x: Tensor,
    heads: list[HeadParams],
    w_o: Tensor,
    mechanism: Mechanism | str = Mechanism.SVDA,
    capture: bool = False,
    layer_index: int = 0,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Run every head, concatenate along features in head order, project by ``w_o``."""
    mechanism = Mechanism(mechanism)
    head_fn = svda_head_forward if mechanism is Mechanism.SVDA else baseline_head_forward
    outs, recs = [], []
    for h, p in enumerate(heads):
        d_k = p.w_q.shape[1]
        y, r = head_fn(x, p, d_k, capture=capture, layer_index=layer_index, head_index=h)
        outs.append(y)
        recs.extend(r)
    y = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    return matmul(y, w_o), recs


def param_count(config: AttentionConfig) -> int:
    """Trainable scalars in one attention layer (per-head Q/K/V, output projection, sigma)."""
    per_head = 3 * config.d_model * config.d_k
    if config.mechanism is Mechanism.SVDA:
        per_head += config.d_k
    return config.num_heads * per_head + config.d_model * config.d_model
