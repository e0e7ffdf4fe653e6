"""Latent global alignment: attention across images through pooled tokens.

Each image contributes a dense token grid (T, d).  Information is shared
between images only through one pooled global token per image: at every
level the N global tokens exchange information via multi-head
self-attention, then each image's dense tokens read from all N global
tokens via cross-attention.  The final output adds the level-0 input back
through a residual connection.  Global tokens are pooled once at level 0
and afterwards evolve only through self-attention.

There is no training here: weights are seeded Gaussian and the module's
guarantees are structural (permutation equivariance, residual identity,
and the global-token bottleneck), not statistical.  No positional encoding
is used anywhere, since the image collection is unordered.  Plain
attention only; no feed-forward sublayers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

_NORM_EPS = 1e-8


class AllocationMeter:
    """Tracks scalars held in live temporaries during a forward pass."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, count: int):
        self.current += int(count)
        if self.current > self.peak:
            self.peak = self.current

    def drop(self, count: int):
        self.current -= int(count)


@dataclass(frozen=True)
class LevelWeights:
    """Projection matrices and pre-norm gains for one alignment level."""

    self_q: np.ndarray
    self_k: np.ndarray
    self_v: np.ndarray
    self_o: np.ndarray
    cross_q: np.ndarray
    cross_k: np.ndarray
    cross_v: np.ndarray
    cross_o: np.ndarray
    self_gain: np.ndarray
    cross_q_gain: np.ndarray
    cross_kv_gain: np.ndarray


@dataclass(frozen=True)
class AlignWeights:
    """Stack of deterministic seeded weights for L alignment levels."""

    levels: tuple
    dim: int
    heads: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("token dimension must be divisible by the head count")
        if len(self.levels) < 1:
            raise ValueError("need at least one alignment level")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @classmethod
    def create(cls, seed: int, dim: int = 64, heads: int = 8, n_levels: int = 4, std: float = 0.02):
        """Seeded Gaussian projections (std 0.02), unit pre-norm gains."""
        rng = np.random.default_rng([seed, 3])
        levels = []
        for _ in range(n_levels):
            mats = [rng.normal(scale=std, size=(dim, dim)) for _ in range(8)]
            levels.append(LevelWeights(*mats, np.ones(dim), np.ones(dim), np.ones(dim)))
        return cls(tuple(levels), dim, heads)

    @classmethod
    def zeros(cls, dim: int = 64, heads: int = 8, n_levels: int = 4):
        """All-zero projections: the forward pass becomes the pure residual."""
        z = np.zeros((dim, dim))
        levels = tuple(
            LevelWeights(z, z, z, z, z, z, z, z, np.ones(dim), np.ones(dim), np.ones(dim))
            for _ in range(n_levels)
        )
        return cls(levels, dim, heads)


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt((x ** 2).mean(axis=-1, keepdims=True) + _NORM_EPS)
    return x / scale * gain


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (..., T, d) -> (..., heads, T, d/heads)
    t, d = x.shape[-2], x.shape[-1]
    return np.swapaxes(x.reshape(x.shape[:-2] + (t, heads, d // heads)), -3, -2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    return np.swapaxes(x, -3, -2).reshape(x.shape[:-3] + (t, h * dh))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(queries, keys_values, wq, wk, wv, wo, q_gain, kv_gain, heads, meter=None):
    """Multi-head scaled-dot-product attention with pre-norm and residual add."""
    qn = _rms_norm(queries, q_gain)
    kn = _rms_norm(keys_values, kv_gain)
    q = _split_heads(qn @ wq, heads)
    k = _split_heads(kn @ wk, heads)
    v = _split_heads(kn @ wv, heads)
    if meter is not None:
        meter.add(qn.size + kn.size + q.size + k.size + v.size)
    dh = q.shape[-1]
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    attn = _softmax(scores)
    if meter is not None:
        meter.add(scores.size + attn.size)
    out = _merge_heads(attn @ v) @ wo
    if meter is not None:
        meter.add(out.size)
        meter.drop(qn.size + kn.size + q.size + k.size + v.size + scores.size + attn.size + out.size)
    return queries + out


def pool_global(tokens: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the token axis: (T, d) -> (d,)."""
    return np.asarray(tokens, dtype=np.float64).mean(axis=0)


def global_self_attention(globals_, level: LevelWeights, heads: int, meter=None) -> np.ndarray:
    """Self-attention over the N global tokens, (N, d) -> (N, d)."""
    g = np.asarray(globals_, dtype=np.float64)
    return _attention(g, g, level.self_q, level.self_k, level.self_v, level.self_o,
                      level.self_gain, level.self_gain, heads, meter)


def cross_attention(tokens: np.ndarray, globals_: np.ndarray, level: LevelWeights, heads: int, meter=None) -> np.ndarray:
    """Dense tokens of one image attend to the N global tokens."""
    f = np.asarray(tokens, dtype=np.float64)
    g = np.asarray(globals_, dtype=np.float64)
    return _attention(f, g, level.cross_q, level.cross_k, level.cross_v, level.cross_o,
                      level.cross_q_gain, level.cross_kv_gain, heads, meter)


def latent_align_forward(token_grids, weights: AlignWeights, override_globals=None, meter=None):
    """Run all alignment levels over N token grids and add the residual.

    ``override_globals`` maps image index -> (d,) vector used in place of
    that image's pooled level-0 global token (the hook that makes the
    global-token bottleneck directly testable).

    Returns a list of N (T, d) arrays.
    """
    grids = [np.asarray(f, dtype=np.float64) for f in token_grids]
    if not grids:
        raise ValueError("need at least one image")
    shape = grids[0].shape
    if len(shape) != 2 or shape[1] != weights.dim:
        raise ShapeMismatch(f"token grids must be (T, {weights.dim}), got {shape}")
    for f in grids:
        if f.shape != shape:
            raise ShapeMismatch("all token grids must share (T, d)")

    g = np.stack([pool_global(f) for f in grids])
    if override_globals:
        for idx, vec in override_globals.items():
            g[idx] = np.asarray(vec, dtype=np.float64)
    if meter is not None:
        meter.add(sum(f.size for f in grids) + g.size)

    current = grids
    for level in weights.levels:
        g = global_self_attention(g, level, weights.heads, meter)
        current = [cross_attention(f, g, level, weights.heads, meter) for f in current]
    return [f0 + f for f0, f in zip(grids, current)]


@dataclass
class ProbeRow:
    n: int
    time_ms: float
    peak_scalars: int


def complexity_probe(
    n_values,
    tokens_per_image: int = 64,
    dim: int = 32,
    heads: int = 4,
    n_levels: int = 2,
    reps: int = 3,
    seed: int = 0,
):
    """Measure forward wall time and peak live temporaries across N.

    Returns one ProbeRow per N (best-of-``reps`` timing).
    """
    weights = AlignWeights.create(seed, dim=dim, heads=heads, n_levels=n_levels)
    rows = []
    for n in n_values:
        rng = np.random.default_rng([seed, 4, n])
        grids = [rng.standard_normal((tokens_per_image, dim)) for _ in range(n)]
        best = np.inf
        peak = 0
        for _ in range(reps):
            meter = AllocationMeter()
            t0 = time.perf_counter()
            latent_align_forward(grids, weights, meter=meter)
            best = min(best, time.perf_counter() - t0)
            peak = meter.peak
        rows.append(ProbeRow(n, 1e3 * best, peak))
    return rows


def fit_quadratic(ns, times):
    """Least-squares fit time = a + b*N + c*N^2; returns (a, b, c, r_squared)."""
    ns = np.asarray(ns, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    design = np.stack([np.ones_like(ns), ns, ns ** 2], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, times, rcond=None)
    pred = design @ coeffs
    ss_res = ((times - pred) ** 2).sum()
    ss_tot = ((times - times.mean()) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coeffs[0]), float(coeffs[1]), float(coeffs[2]), float(r2)
