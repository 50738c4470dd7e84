"""Low-dose measurement noise for clean sinograms.

Transmission counts are drawn as Poisson(i0 * exp(-line_integral)) plus
zero-mean Gaussian electronic noise, then log-transformed back to line
integrals.  Counts are clamped to 0.1 before the log as a photon-starvation
guard.  All randomness comes from a Philox counter-based generator keyed by
the seed, so streams are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COUNT_FLOOR = 0.1
POISSON_EXACT_LIMIT = 50.0


@dataclass(frozen=True)
class NoiseParams:
    i0: float = 1.0e6
    sigma_e2: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.i0 <= 0:
            raise ValueError("incident intensity must be positive")
        if self.sigma_e2 < 0:
            raise ValueError("electronic noise variance must be non-negative")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def poisson_sample(lam, rng: np.random.Generator) -> np.ndarray:
    """Poisson draws: exact below 50 counts, rounded Gaussian above.

    The exact branch multiplies uniforms until the product drops under
    exp(-lam) (Knuth); the approximate branch rounds N(lam, lam) and clamps
    at zero.  Accepts scalars or arrays; draw order is fixed, so equal
    seeds give identical streams.
    """
    lam = np.asarray(lam, dtype=np.float64)
    scalar = lam.ndim == 0
    lam = np.atleast_1d(lam)
    if np.any(lam <= 0.0):
        raise ValueError("poisson_sample requires positive rates")
    out = np.zeros(lam.shape, dtype=np.float64)

    small = lam < POISSON_EXACT_LIMIT
    if np.any(small):
        target = np.exp(-lam[small])
        prod = np.ones(target.shape)
        count = np.zeros(target.shape, dtype=np.int64)
        active = np.ones(target.shape, dtype=bool)
        while np.any(active):
            prod[active] *= rng.random(int(active.sum()))
            keep = prod > target
            count += active & keep
            active &= keep
        out[small] = count

    big = ~small
    if np.any(big):
        lb = lam[big]
        draws = np.rint(lb + np.sqrt(lb) * rng.standard_normal(lb.shape))
        out[big] = np.maximum(draws, 0.0)

    return out[0] if scalar else out


def apply_noise(clean: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Simulate noisy post-log data from clean line integrals.

    ``clean`` must be non-negative (a negative line integral is physically
    invalid).  Deterministic given ``params.seed``; the output is finite
    because counts are clamped at 0.1 before the log transform.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if np.any(clean < 0.0):
        raise ValueError("clean sinogram has negative line integrals")
    rng = make_rng(params.seed)
    lam = params.i0 * np.exp(-clean)
    counts = poisson_sample(lam, rng)
    if params.sigma_e2 > 0.0:
        counts = counts + np.sqrt(params.sigma_e2) * rng.standard_normal(clean.shape)
    counts = np.maximum(counts, COUNT_FLOOR)
    return -np.log(counts / params.i0)
