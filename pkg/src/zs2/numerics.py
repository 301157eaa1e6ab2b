"""Deterministic tensor plumbing: counter-based RNG, moment statistics, KS test,
and the "ZST1" binary tensor container used for all CLI tensor exchange.

Exported tensors are single precision (float32); statistics and oracles run in
double precision internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

FLOAT = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

TENSOR_MAGIC = b"ZST1"


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fold(state: int, key: int) -> int:
    return _splitmix64(state ^ ((key * _GOLDEN) & _MASK64))


@dataclass
class RngState:
    """Counter-based RNG state: (seed, stream_id, counter) fully determines output.

    Backed by the Philox bit generator. ``counter`` advances once per draw
    operation; within a draw, Philox consumes its own intra-block counter word,
    so draws of any practical size never collide across counters. Distinct
    stream_ids index statistically independent streams, which makes parallel
    candidate generation reproducible and order-independent.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not (0 <= int(v) < 1 << 64):
                raise ValidationError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
            setattr(self, name, int(v))

    def derive(self, *keys: int) -> "RngState":
        """Pure derivation of an independent child stream; does not advance this state."""
        s = self.stream_id
        for k in keys:
            s = _fold(s, int(k))
        return RngState(self.seed, s, 0)

    def _generator(self) -> np.random.Generator:
        bg = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, self.counter, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bg)


def _check_shape(shape) -> tuple[int, ...]:
    try:
        dims = tuple(int(d) for d in shape)
    except TypeError:
        raise ValidationError(f"shape must be a sequence of extents, got {shape!r}") from None
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ValidationError(f"shape must be nonempty with extents >= 1, got {dims}")
    return dims


def randn(rng: RngState, shape, dtype=FLOAT) -> np.ndarray:
    """I.i.d. standard-normal draws; advances rng.counter by one."""
    dims = _check_shape(shape)
    out = rng._generator().standard_normal(dims, dtype=dtype)
    rng.counter += 1
    return out


def ensure_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return x


@dataclass(frozen=True)
class MomentStats:
    n: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float


def moments(x: np.ndarray) -> MomentStats:
    """Sample mean, unbiased variance, and standardized 3rd/4th central moments."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    n = flat.size
    if n < 2:
        raise ValidationError(f"moments requires >= 2 elements, got {n}")
    mean = float(flat.mean())
    centered = flat - mean
    m2 = float(np.mean(centered**2))
    variance = float(centered @ centered / (n - 1))
    if m2 == 0.0:
        skew = kurt = 0.0
    else:
        skew = float(np.mean(centered**3) / m2**1.5)
        kurt = float(np.mean(centered**4) / m2**2 - 3.0)
    return MomentStats(n=n, mean=mean, variance=variance, skewness=skew, excess_kurtosis=kurt)


def ks_standard_normal(x: np.ndarray) -> float:
    """Kolmogorov-Smirnov statistic sup|F_n - Phi| against the standard normal CDF."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    n = flat.size
    if n < 8:
        raise ValidationError(f"ks_standard_normal requires >= 8 elements, got {n}")
    cdf = ndtr(np.sort(flat))
    steps = np.arange(1, n + 1, dtype=np.float64) / n
    d_plus = float(np.max(steps - cdf))
    d_minus = float(np.max(cdf - (steps - 1.0 / n)))
    return max(d_plus, d_minus)


def save_tensor(path, arr: np.ndarray) -> None:
    """Write the ZST1 container: magic, u32 rank, rank x u64 extents, row-major LE float32."""
    a = np.ascontiguousarray(np.asarray(arr, dtype=FLOAT))
    ensure_finite(a, "tensor to save")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        if rank == 0:
            raise ValidationError(f"{path}: zero-rank tensor not allowed")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        count = int(np.prod(dims))
        data = np.frombuffer(f.read(4 * count), dtype="<f4")
        if data.size != count:
            raise ValidationError(f"{path}: truncated payload ({data.size} of {count} scalars)")
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after payload")
    arr = data.reshape(dims).astype(FLOAT)
    ensure_finite(arr, f"tensor from {path}")
    return arr
