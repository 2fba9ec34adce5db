"""Error estimates for autocorrelated Monte Carlo output."""
from __future__ import annotations

import numpy as np

MIN_BATCHES = 20


def n_batches(n: int) -> int:
    if n < 2 * MIN_BATCHES:
        return n
    return max(MIN_BATCHES, int(np.sqrt(n)))


def batch_means(values: np.ndarray, nb: int | None = None) -> tuple[float, float]:
    """Mean and batch-means standard error.

    Samples are split into ``nb`` contiguous batches of equal size (the
    remainder is spread over the leading batches); the standard error is the
    spread of batch means divided by sqrt(nb).
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("need a non-empty 1-d sample")
    mean = float(x.mean())
    if x.size == 1:
        return mean, 0.0
    nb = nb or n_batches(x.size)
    bounds = np.linspace(0, x.size, nb + 1).astype(int)
    sums = np.add.reduceat(x, bounds[:-1])
    means = sums / np.diff(bounds)
    return mean, float(means.std(ddof=1) / np.sqrt(nb))


def batch_means_matrix(values: np.ndarray, nb: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise :func:`batch_means` for an (n, m) array."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    mean = x.mean(axis=0)
    if n == 1:
        return mean, np.zeros_like(mean)
    nb = nb or n_batches(n)
    bounds = np.linspace(0, n, nb + 1).astype(int)
    means = np.add.reduceat(x, bounds[:-1], axis=0) / np.diff(bounds)[(...,) + (None,) * (x.ndim - 1)]
    return mean, means.std(axis=0, ddof=1) / np.sqrt(nb)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    if acf[0] <= 0:
        return np.ones(1)
    return acf / acf[0]


def integrated_time(x: np.ndarray) -> float:
    """Integrated autocorrelation time via Geyer's initial monotone sequence."""
    rho = autocorrelation(x)
    if rho.size < 3:
        return 1.0
    m = (rho.size - 1) // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    pos = np.flatnonzero(pairs <= 0)
    cut = pos[0] if pos.size else pairs.size
    pairs = np.minimum.accumulate(pairs[:cut]) if cut else pairs[:1]
    tau = -1.0 + 2.0 * float(pairs.sum())
    return max(tau, 1.0 / x.size)


def effective_sample_size(x: np.ndarray) -> float:
    x = np.asarray(x)
    if np.ptp(x) == 0:
        return float(x.size)
    return float(min(x.size, x.size / integrated_time(x)))


def block_bootstrap_weights(n: int, n_resamples: int, rng: np.random.Generator,
                            nb: int | None = None) -> np.ndarray:
    """Per-sample multiplicities for a non-overlapping block bootstrap.

    Returns an (n_resamples, n) array whose rows sum to n (up to block-size
    rounding) and can be used as weights in weighted means.
    """
    nb = nb or n_batches(n)
    bounds = np.linspace(0, n, nb + 1).astype(int)
    block_of = np.repeat(np.arange(nb), np.diff(bounds))
    counts = rng.multinomial(nb, np.full(nb, 1.0 / nb), size=n_resamples)
    return counts[:, block_of].astype(np.float64)
