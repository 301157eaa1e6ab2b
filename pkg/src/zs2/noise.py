"""Noise priors for frame sequences: mixed, progressive, and the dependency
model that searches each frame's noise so its KL divergence from the previous
frame's noise hits a target value while staying marginally standard normal.

KL between two noise tensors is realized as categorical KL between the
softmax distributions of the flattened tensors, computed in double precision.
It is zero at identity and grows as inter-frame correlation drops; target
values are therefore expressed in nats over the whole tensor and calibrated
at the 4096-element desk scale (between independent standard-normal tensors
the divergence is ~1 nat, nearly independent of element count).
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .errors import ValidationError
from .numerics import FLOAT, RngState, ensure_finite, ks_standard_normal, moments, randn, save_tensor

KL_DIRECTIONS = ("new_vs_prev", "prev_vs_new")

#: KS critical coefficient at the 1% significance level: D <= 1.63/sqrt(n).
KS_COEFF = 1.63


def kl_noise(eps_a: np.ndarray, eps_b: np.ndarray) -> float:
    """KL(P_a || P_b) in nats, where P_x = softmax(flatten(x))."""
    a = np.asarray(eps_a)
    b = np.asarray(eps_b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValidationError(f"kl_noise requires >= 2 elements, got {a.size}")
    la = log_softmax(a.astype(np.float64).ravel())
    lb = log_softmax(b.astype(np.float64).ravel())
    return float(np.sum(np.exp(la) * (la - lb)))


def kl_loss(eps_i: np.ndarray, eps_prev: np.ndarray, lam: float,
            direction: str = "new_vs_prev") -> float:
    """Squared deviation of the inter-frame KL from its target: (KL - lam)^2."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    if direction not in KL_DIRECTIONS:
        raise ValidationError(f"unknown KL direction {direction!r}")
    if direction == "new_vs_prev":
        kl = kl_noise(eps_i, eps_prev)
    else:
        kl = kl_noise(eps_prev, eps_i)
    return (kl - lam) ** 2


def validate_alpha(alpha: float) -> float:
    a = float(alpha)
    if not 0.0 <= a <= 1.0:
        raise ValidationError(f"mix coefficient must lie in [0, 1], got {alpha}")
    return a


def interpolate_noise(eps_prev: np.ndarray, eps_tilde: np.ndarray, alpha: float) -> np.ndarray:
    """sqrt(alpha) * eps_prev + sqrt(1 - alpha) * eps_tilde, unit variance preserving.

    The endpoints return exact copies so that alpha == 1 reproduces eps_prev
    bit for bit (the static-video limit) and alpha == 0 reproduces eps_tilde.
    """
    a = validate_alpha(alpha)
    if eps_prev.shape != eps_tilde.shape:
        raise ValidationError(f"shape mismatch: {eps_prev.shape} vs {eps_tilde.shape}")
    if a == 1.0:
        return eps_prev.copy()
    if a == 0.0:
        return eps_tilde.copy()
    mixed = math.sqrt(a) * eps_prev.astype(np.float64) + math.sqrt(1.0 - a) * eps_tilde.astype(np.float64)
    return mixed.astype(FLOAT)


@dataclass(frozen=True)
class SearchConfig:
    """Budgets for the two-stage noise search.

    random_iters counts fresh draws tried after the initial one. linear_iters
    counts step-size halvings in the linear phase, i.e. refinement levels: the
    phase keeps accepting improving steps at the current delta and spends one
    unit of budget each time delta is halved, stopping when the budget is
    exhausted or delta falls below min_delta.
    """

    random_iters: int = 10
    linear_iters: int = 15
    delta0: float = 0.1
    min_delta: float = 1e-6

    def __post_init__(self) -> None:
        if self.random_iters < 1:
            raise ValidationError(f"random_iters must be >= 1, got {self.random_iters}")
        if self.linear_iters < 1:
            raise ValidationError(f"linear_iters must be >= 1, got {self.linear_iters}")
        if not 0.0 < self.delta0 <= 1.0:
            raise ValidationError(f"delta0 must lie in (0, 1], got {self.delta0}")
        if not 0.0 < self.min_delta < self.delta0:
            raise ValidationError(
                f"min_delta must lie in (0, delta0), got {self.min_delta} with delta0={self.delta0}")


@dataclass
class SearchTrace:
    phase: str  # "random" | "linear"
    step_losses: list[float] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)
    final_alpha: float | None = None
    final_loss: float = math.nan


@dataclass
class NoiseSequence:
    """Ordered per-frame noise tensors plus the KL targets and search traces
    that produced them. lambdas is None for models without a KL target."""

    frames: list[np.ndarray]
    lambdas: tuple[float, ...] | None = None
    traces: list[SearchTrace] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.frames) < 1:
            raise ValidationError("a noise sequence needs at least one frame")
        if self.lambdas is not None and len(self.lambdas) != len(self.frames) - 1:
            raise ValidationError(
                f"lambdas must have length m-1={len(self.frames) - 1}, got {len(self.lambdas)}")

    @property
    def m(self) -> int:
        return len(self.frames)


def _check_m(m: int) -> int:
    if int(m) < 1:
        raise ValidationError(f"frame count m must be >= 1, got {m}")
    return int(m)


def mixed_noise(rng: RngState, m: int, alpha: float, shape) -> NoiseSequence:
    """One shared tensor blended with per-frame independent tensors; pairwise
    covariance between any two frames equals alpha."""
    m = _check_m(m)
    a = validate_alpha(alpha)
    shared = randn(rng.derive(0), shape)
    if a == 1.0:
        return NoiseSequence([shared.copy() for _ in range(m)])
    frames = []
    for i in range(1, m + 1):
        ind = randn(rng.derive(i), shape)
        frames.append(interpolate_noise(shared, ind, a))
    return NoiseSequence(frames)


def progressive_noise(rng: RngState, m: int, alpha: float, shape) -> NoiseSequence:
    """Autoregressive blend: each frame perturbs the previous one, so that
    corr(frame_i, frame_{i-k}) = alpha^(k/2)."""
    m = _check_m(m)
    a = validate_alpha(alpha)
    frames = [randn(rng.derive(1), shape)]
    for i in range(2, m + 1):
        if a == 1.0:
            frames.append(frames[-1].copy())
            continue
        ind = randn(rng.derive(i), shape)
        frames.append(interpolate_noise(frames[-1], ind, a))
    return NoiseSequence(frames)


def random_search(rng: RngState, eps_prev: np.ndarray, lam: float, cfg: SearchConfig,
                  workers: int = 1, direction: str = "new_vs_prev") -> tuple[np.ndarray, SearchTrace]:
    """Best-of-(1 + random_iters) fresh standard-normal draws by KL loss.

    Each candidate uses its own derived stream, so evaluation order (and any
    parallelism) cannot change the result; ties break toward the lowest index.
    """
    ensure_finite(eps_prev, "eps_prev")
    n_candidates = 1 + cfg.random_iters

    def evaluate(k: int) -> tuple[float, np.ndarray]:
        cand = randn(rng.derive(k), eps_prev.shape)
        return kl_loss(cand, eps_prev, lam, direction), cand

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, range(n_candidates)))
    else:
        results = [evaluate(k) for k in range(n_candidates)]

    trace = SearchTrace(phase="random")
    best_idx = 0
    for k, (loss, _) in enumerate(results):
        trace.step_losses.append(loss)
        better = loss < results[best_idx][0]
        trace.accepted.append(better or k == 0)
        if better:
            best_idx = k
    trace.final_loss = results[best_idx][0]
    return results[best_idx][1], trace


def linear_search(eps_prev: np.ndarray, eps_tilde: np.ndarray, lam: float, cfg: SearchConfig,
                  direction: str = "new_vs_prev") -> tuple[float, SearchTrace]:
    """Find alpha in [0, 1] so that interpolate_noise(eps_prev, eps_tilde, alpha)
    has KL divergence from eps_prev closest to lam.

    Forward march from alpha=0: a step of delta is accepted when it strictly
    lowers the loss without dropping the divergence below the target (a
    forward-only march cannot recover after crossing, so crossing steps are
    rejected and delta is halved instead). The march stops after linear_iters
    halvings or once delta < min_delta. The boundary point alpha=1 (divergence
    exactly zero) is evaluated last and kept if it beats the march, which
    realizes the static-video limit for vanishing targets.
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")

    def eval_at(a: float) -> tuple[float, float]:
        z = interpolate_noise(eps_prev, eps_tilde, a)
        if direction == "new_vs_prev":
            kl = kl_noise(z, eps_prev)
        else:
            kl = kl_noise(eps_prev, z)
        return kl, (kl - lam) ** 2

    trace = SearchTrace(phase="linear")
    alpha, delta = 0.0, cfg.delta0
    kl_cur, loss_cur = eval_at(alpha)
    halvings = 0
    while halvings < cfg.linear_iters and delta >= cfg.min_delta:
        cand = min(alpha + delta, 1.0)
        kl_c, loss_c = eval_at(cand)
        trace.step_losses.append(loss_c)
        if loss_c < loss_cur and kl_c >= lam:
            trace.accepted.append(True)
            alpha, kl_cur, loss_cur = cand, kl_c, loss_c
        else:
            trace.accepted.append(False)
            delta /= 2.0
            halvings += 1
    if alpha != 1.0:
        _, loss_b = eval_at(1.0)
        trace.step_losses.append(loss_b)
        if loss_b < loss_cur:
            trace.accepted.append(True)
            alpha, loss_cur = 1.0, loss_b
        else:
            trace.accepted.append(False)
    trace.final_alpha = alpha
    trace.final_loss = loss_cur
    return alpha, trace


def dependency_noise(rng: RngState, m: int, lambdas, cfg: SearchConfig, shape,
                     workers: int = 1, direction: str = "new_vs_prev",
                     initial_frame: np.ndarray | None = None,
                     frame_offset: int = 0) -> NoiseSequence:
    """Two-stage searched noise chain: frame 1 is a raw draw, every later frame
    interpolates the previous frame with the best random-search candidate at the
    alpha found by the linear search.

    initial_frame replaces the raw first draw (used by auto-regressive
    extension); frame_offset shifts the stream indices so extended chains reuse
    the same per-frame streams as an equivalent longer run.
    """
    m = _check_m(m)
    lams = tuple(float(l) for l in lambdas)
    if len(lams) != m - 1:
        raise ValidationError(f"lambdas must have length m-1={m - 1}, got {len(lams)}")
    if any(l <= 0 for l in lams):
        raise ValidationError("all lambdas must be > 0")

    if initial_frame is not None:
        if initial_frame.shape != tuple(shape):
            raise ValidationError(
                f"initial frame shape {initial_frame.shape} != requested {tuple(shape)}")
        frames = [initial_frame.astype(FLOAT)]
    else:
        frames = [randn(rng.derive(frame_offset + 1, 0), shape)]
    traces: list[SearchTrace] = []
    for i in range(2, m + 1):
        prev = frames[-1]
        lam = lams[i - 2]
        cand, rtrace = random_search(rng.derive(frame_offset + i), prev, lam, cfg,
                                     workers=workers, direction=direction)
        alpha, ltrace = linear_search(prev, cand, lam, cfg, direction=direction)
        frames.append(interpolate_noise(prev, cand, alpha))
        traces.extend([rtrace, ltrace])
    return NoiseSequence(frames, lambdas=lams, traces=traces)


def adjacent_kls(seq: NoiseSequence, direction: str = "new_vs_prev") -> list[float]:
    """Achieved KL divergence for each adjacent frame pair."""
    out = []
    for prev, cur in zip(seq.frames, seq.frames[1:]):
        if direction == "new_vs_prev":
            out.append(kl_noise(cur, prev))
        else:
            out.append(kl_noise(prev, cur))
    return out


def normality_report(x: np.ndarray) -> dict:
    """Statistical consistency with N(0, I): 4-sigma moment bounds and the 1%
    KS critical value. These are the thresholds a dependency frame must pass."""
    n = x.size
    stats = moments(x)
    ks = ks_standard_normal(x)
    mean_bound = 4.0 / math.sqrt(n)
    var_bound = 4.0 * math.sqrt(2.0 / n)
    ks_bound = KS_COEFF / math.sqrt(n)
    return {
        "n": n,
        "mean": stats.mean,
        "variance": stats.variance,
        "ks": ks,
        "mean_bound": mean_bound,
        "var_bound": var_bound,
        "ks_bound": ks_bound,
        "passed": bool(abs(stats.mean) <= mean_bound
                       and abs(stats.variance - 1.0) <= var_bound
                       and ks <= ks_bound),
    }


def trace_to_dict(trace: SearchTrace) -> dict:
    return {
        "phase": trace.phase,
        "step_losses": trace.step_losses,
        "accepted": trace.accepted,
        "final_alpha": trace.final_alpha,
        "final_loss": trace.final_loss,
    }


def trace_from_dict(d: dict) -> SearchTrace:
    return SearchTrace(phase=d["phase"], step_losses=list(d["step_losses"]),
                       accepted=list(d["accepted"]), final_alpha=d["final_alpha"],
                       final_loss=d["final_loss"])


def write_traces_csv(path, traces: list[SearchTrace], frame_ids: list[int] | None = None) -> None:
    """CSV trace export (frame, phase, step, loss), one row per evaluated candidate.

    Search traces come in (random, linear) pairs per frame starting at frame 2;
    frame_ids overrides that default assignment.
    """
    if frame_ids is None:
        frame_ids = [2 + i // 2 for i in range(len(traces))]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "phase", "step", "loss"])
        for fid, tr in zip(frame_ids, traces):
            for step, loss in enumerate(tr.step_losses):
                w.writerow([fid, tr.phase, step, repr(loss)])


def save_noise_sequence(seq: NoiseSequence, outdir, seed: int | None = None,
                        cfg: SearchConfig | None = None,
                        direction: str = "new_vs_prev") -> None:
    """One ZST1 container per frame plus a JSON sidecar and CSV traces."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        save_tensor(out / f"eps_{i:04d}.zst", frame)
    sidecar = {
        "m": seq.m,
        "lambdas": list(seq.lambdas) if seq.lambdas is not None else None,
        "seed": seed,
        "cfg": None if cfg is None else {
            "random_iters": cfg.random_iters,
            "linear_iters": cfg.linear_iters,
            "delta0": cfg.delta0,
            "min_delta": cfg.min_delta,
        },
        "kl_direction": direction,
        "achieved_kls": adjacent_kls(seq, direction) if seq.m >= 2 else [],
        "traces": [trace_to_dict(t) for t in seq.traces],
    }
    (out / "noise.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    write_traces_csv(out / "traces.csv", seq.traces)
