"""Per-frame attention variants over projected feature stacks: plain
self-attention, cross-frame attention against the first frame, and temporal
momentum attention (TMA) against exponentially averaged key/value accumulators,
in both recurrent and one-shot matrix form.

Momentum 1 reduces TMA to cross-frame attention and momentum 0 to
self-attention; both reductions are elementwise exact because the accumulator
update special-cases the endpoints instead of multiplying through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import FLOAT

MODES = ("sa", "cfa", "tma")


@dataclass(frozen=True)
class AttnFrames:
    """Query/key/value stacks of shape [m, tokens, c]."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        for name in ("q", "k", "v"):
            arr = getattr(self, name)
            if arr.ndim != 3:
                raise ValidationError(f"{name} must be [m, tokens, c], got shape {arr.shape}")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValidationError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        m, tokens, c = self.q.shape
        if m < 1 or tokens < 1 or c < 1:
            raise ValidationError(f"all extents must be >= 1, got {self.q.shape}")

    @property
    def m(self) -> int:
        return self.q.shape[0]

    @property
    def channels(self) -> int:
        return self.q.shape[2]


def scaled_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(c)) v for one frame, with max-subtracted softmax."""
    c = q.shape[-1]
    if c == 0:
        raise ValidationError("channel width must be >= 1")
    logits = (q @ k.T) / np.asarray(math.sqrt(c), dtype=q.dtype)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return weights @ v


def self_attention(frames: AttnFrames) -> np.ndarray:
    """Each frame attends to its own keys and values."""
    out = np.empty_like(frames.q)
    for i in range(frames.m):
        out[i] = scaled_attention(frames.q[i], frames.k[i], frames.v[i])
    return out


def cross_frame_attention(frames: AttnFrames) -> np.ndarray:
    """Every frame attends to the first frame's keys and values."""
    out = np.empty_like(frames.q)
    for i in range(frames.m):
        out[i] = scaled_attention(frames.q[i], frames.k[0], frames.v[0])
    return out


def _check_mus(mus, m: int) -> list[float]:
    vals = [float(u) for u in mus]
    if len(vals) != m:
        raise ValidationError(f"momentum schedule must have length m={m}, got {len(vals)}")
    if any(not 0.0 <= u <= 1.0 for u in vals):
        raise ValidationError(f"momentum values must lie in [0, 1], got {vals}")
    return vals


def momentum_accumulate(stack: np.ndarray, mus) -> np.ndarray:
    """Recurrent accumulators acc_i = mu_i * acc_{i-1} + (1 - mu_i) * stack_i,
    acc_1 = stack_1. Endpoint momenta keep or replace exactly."""
    m = stack.shape[0]
    vals = _check_mus(mus, m)
    acc = np.empty_like(stack)
    acc[0] = stack[0]
    for i in range(1, m):
        mu = vals[i]
        if mu == 1.0:
            acc[i] = acc[i - 1]
        elif mu == 0.0:
            acc[i] = stack[i]
        else:
            mu_t = np.asarray(mu, dtype=stack.dtype)
            acc[i] = mu_t * acc[i - 1] + (np.asarray(1.0, dtype=stack.dtype) - mu_t) * stack[i]
    return acc


def tma_recurrent(frames: AttnFrames, mus) -> np.ndarray:
    """Temporal momentum attention via the sequential accumulator scan."""
    k_acc = momentum_accumulate(frames.k, mus)
    v_acc = momentum_accumulate(frames.v, mus)
    out = np.empty_like(frames.q)
    for i in range(frames.m):
        out[i] = scaled_attention(frames.q[i], k_acc[i], v_acc[i])
    return out


@dataclass(frozen=True)
class CoeffMatrix:
    """Upper triangular accumulator coefficients u[j, k] = mu^(k-j) for k >= j,
    with entries below truncation_threshold zeroed."""

    u: np.ndarray
    mu: float
    truncation_threshold: float


def tma_coeff_matrix(m: int, mu: float, truncation_threshold: float = 0.0) -> CoeffMatrix:
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if not 0.0 <= mu <= 1.0:
        raise ValidationError(f"mu must lie in [0, 1], got {mu}")
    if truncation_threshold < 0.0:
        raise ValidationError(f"truncation threshold must be >= 0, got {truncation_threshold}")
    j, k = np.indices((m, m))
    lag = k - j
    with np.errstate(invalid="ignore"):
        powers = np.where(lag >= 0, np.float64(mu) ** np.maximum(lag, 0), 0.0)
    powers[(lag > 0) & (powers < truncation_threshold)] = 0.0
    return CoeffMatrix(u=powers.astype(FLOAT), mu=float(mu),
                       truncation_threshold=float(truncation_threshold))


def _matrix_accumulate(stack: np.ndarray, coeff: CoeffMatrix) -> np.ndarray:
    scaled = stack.copy()
    if stack.shape[0] > 1:
        scaled[1:] = scaled[1:] * np.asarray(1.0 - coeff.mu, dtype=stack.dtype)
    return np.einsum("jtc,jk->ktc", scaled, coeff.u.astype(stack.dtype))


def tma_matrix(frames: AttnFrames, mu: float, truncation_threshold: float = 0.0) -> np.ndarray:
    """Temporal momentum attention with all accumulators formed by one matrix
    multiplication against the upper triangular coefficient matrix. Requires a
    constant momentum; equals tma_recurrent up to accumulated rounding when the
    truncation threshold is zero."""
    coeff = tma_coeff_matrix(frames.m, mu, truncation_threshold)
    k_acc = _matrix_accumulate(frames.k, coeff)
    v_acc = _matrix_accumulate(frames.v, coeff)
    out = np.empty_like(frames.q)
    for i in range(frames.m):
        out[i] = scaled_attention(frames.q[i], k_acc[i], v_acc[i])
    return out


def _run_mode(frames: AttnFrames, mode: str, mus) -> np.ndarray:
    if mode == "sa":
        return self_attention(frames)
    if mode == "cfa":
        return cross_frame_attention(frames)
    if mode == "tma":
        if mus is None:
            raise ValidationError("tma mode requires a momentum schedule")
        return tma_recurrent(frames, mus)
    raise ValidationError(f"unknown attention mode {mode!r}, expected one of {MODES}")


def multi_head(frames: AttnFrames, heads: int, mode: str, mus=None,
               w_out: np.ndarray | None = None) -> np.ndarray:
    """Split channels into heads, run the selected attention per head, concat,
    then apply the optional output projection (identity when omitted)."""
    if heads < 1:
        raise ValidationError(f"heads must be >= 1, got {heads}")
    c = frames.channels
    if c % heads != 0:
        raise ValidationError(f"channel width {c} not divisible by heads {heads}")
    if heads == 1:
        out = _run_mode(frames, mode, mus)
    else:
        width = c // heads
        out = np.empty_like(frames.q)
        for h in range(heads):
            sl = slice(h * width, (h + 1) * width)
            sub = AttnFrames(q=frames.q[:, :, sl], k=frames.k[:, :, sl], v=frames.v[:, :, sl])
            out[:, :, sl] = _run_mode(sub, mode, mus)
    if w_out is not None:
        if w_out.shape != (c, c):
            raise ValidationError(f"output projection must be [{c}, {c}], got {w_out.shape}")
        out = out @ w_out.astype(out.dtype)
    return out
