"""The vector-quantization bottleneck.

Nearest-neighbor discretization against a learned codebook, the
straight-through gradient rule, EMA codebook updates, time-jitter
regularization, and codebook-health diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import FeatureSequence, write_features

EMA_SMOOTHING = 1e-5  # lambda in codes = sums / (counts + lambda)


@dataclass
class Codebook:
    """K code vectors plus the EMA accumulators that train them.

    Rows that have never been assigned keep their initialization; every
    other row satisfies codes[i] == ema_sums[i] / (ema_counts[i] + lambda)
    after each update.
    """

    codes: np.ndarray            # (K, D)
    decay: float = 0.99
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None
    ever_assigned: np.ndarray = None

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError("codebook must be a (K, D) matrix with K >= 1")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        k = self.codes.shape[0]
        if self.ema_counts is None:
            self.ema_counts = np.zeros(k)
        if self.ema_sums is None:
            self.ema_sums = np.zeros_like(self.codes)
        if self.ever_assigned is None:
            self.ever_assigned = np.zeros(k, dtype=bool)

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


def init_codebook(samples: np.ndarray, n_codes: int, decay: float = 0.99,
                  rng: np.random.Generator | None = None) -> Codebook:
    """Initialize codes from rows of an encoder-output sample batch.

    Seeding from real activations (rather than random Gaussians) keeps early
    assignments spread out and reduces collapse.  Samples are drawn without
    replacement when the batch is large enough.
    """
    rng = rng or np.random.default_rng()
    samples = np.asarray(samples, dtype=np.float64)
    replace = samples.shape[0] < n_codes
    rows = rng.choice(samples.shape[0], size=n_codes, replace=replace)
    return Codebook(codes=samples[rows].copy(), decay=decay)


@dataclass
class QuantizeResult:
    quantized: np.ndarray      # (T, D), rows are exact codebook rows
    indices: np.ndarray        # (T,) int64
    commitment_loss: float     # (1/T) sum_t ||z_t - quantized_t||^2


def quantize(z: np.ndarray, book: Codebook) -> QuantizeResult:
    """Map each frame to its squared-Euclidean nearest code.

    Ties break toward the lowest code index.  The returned rows are exact
    copies of codebook rows (no arithmetic reconstruction).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"z must be (T, D), got shape {z.shape}")
    if z.shape[0] < 1:
        raise ValueError("need at least one frame")
    if z.shape[1] != book.dim:
        raise ValueError(f"dimension mismatch: z has {z.shape[1]}, codebook {book.dim}")
    indices = nearest_code(z, book.codes)
    quantized = book.codes[indices].copy()
    diff = z - quantized
    commitment = float(np.einsum("td,td->", diff, diff) / z.shape[0])
    return QuantizeResult(quantized=quantized, indices=indices,
                          commitment_loss=commitment)


def nearest_code(z: np.ndarray, codes: np.ndarray, block: int = 2048) -> np.ndarray:
    """Argmin_j ||z_t - codes_j||^2 per row, computed blockwise.

    Uses the expanded quadratic form; np.argmin picks the first (lowest)
    index on exact ties.
    """
    code_sq = np.einsum("kd,kd->k", codes, codes)
    out = np.empty(z.shape[0], dtype=np.int64)
    for start in range(0, z.shape[0], block):
        zb = z[start:start + block]
        d = code_sq[None, :] - 2.0 * (zb @ codes.T)
        # the ||z||^2 term is constant per row and cannot change the argmin
        out[start:start + block] = np.argmin(d, axis=1)
    return out


def straight_through_backward(upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient of quantization under the straight-through estimator.

    The discretization is treated as the identity: the upstream gradient
    with respect to the quantized sequence is returned unchanged as the
    gradient with respect to the continuous input.  The codebook receives
    no gradient from this path (it trains via EMA).
    """
    return np.array(upstream_grad, copy=True)


def ema_update(book: Codebook, z: np.ndarray, indices: np.ndarray) -> Codebook:
    """EMA codebook update from one batch of assigned vectors (in place).

    N_i <- decay * N_i + (1 - decay) * count_i
    m_i <- decay * m_i + (1 - decay) * sum of z assigned to i
    codes_i <- m_i / (N_i + lambda)  for rows that have ever been assigned.
    """
    z = np.asarray(z, dtype=np.float64)
    indices = np.asarray(indices)
    k = book.n_codes
    counts = np.bincount(indices, minlength=k).astype(np.float64)
    sums = np.zeros_like(book.ema_sums)
    np.add.at(sums, indices, z)
    g = book.decay
    book.ema_counts = g * book.ema_counts + (1 - g) * counts
    book.ema_sums = g * book.ema_sums + (1 - g) * sums
    book.ever_assigned |= counts > 0
    live = book.ever_assigned
    book.codes[live] = book.ema_sums[live] / (book.ema_counts[live, None] + EMA_SMOOTHING)
    return book


def time_jitter(seq: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each position, independently with probability p, by a neighbor.

    The replacement source is the *original* sequence; left/right is a fair
    coin, and the two boundary positions clamp to their only neighbor.
    Works on index vectors (T,) and on code-vector sequences (T, D).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("replacement probability must lie in [0, 1]")
    seq = np.asarray(seq)
    t_len = seq.shape[0]
    if t_len <= 1 or p == 0.0:
        return seq.copy()
    replace = rng.random(t_len) < p
    step = np.where(rng.random(t_len) < 0.5, -1, 1)
    step[0], step[-1] = 1, -1  # boundary positions have a single neighbor
    source = np.arange(t_len)
    source[replace] += step[replace]
    return seq[source]


def jitter_source_indices(t_len: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Sample the jitter permutation alone (for applying inside a graph)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("replacement probability must lie in [0, 1]")
    source = np.arange(t_len)
    if t_len <= 1 or p == 0.0:
        return source
    replace = rng.random(t_len) < p
    step = np.where(rng.random(t_len) < 0.5, -1, 1)
    step[0], step[-1] = 1, -1
    source[replace] += step[replace]
    return source


def codebook_perplexity(histogram: np.ndarray) -> float:
    """exp(entropy) of the normalized code-usage histogram; range [1, K].

    1.0 means total collapse onto one code; K means uniform usage.
    """
    histogram = np.asarray(histogram, dtype=np.float64)
    total = histogram.sum()
    if histogram.size == 0 or total <= 0:
        raise ValueError("empty histogram")
    probs = histogram / total
    nz = probs[probs > 0]
    entropy = -np.sum(nz * np.log(nz))
    return float(np.exp(entropy))


def export_codebook(path, book: Codebook) -> None:
    """Write the raw (K, D) code matrix as a VQAU float file for inspection."""
    write_features(path, FeatureSequence(frames=book.codes.astype(np.float32),
                                         frame_rate_hz=0.0))
