"""Synthetic cross-domain ratings with a known latent structure.

Users share a latent factor vector across domains and carry a small
per-domain offset.  Source ratings are a monotone squashing of a bilinear
score; target ratings pass the shared factors through a saturating
nonlinearity first, so the source-to-target relation is not bilinear.
"""

from __future__ import annotations

import numpy as np

from .data import align_domains, ratings_from_triples


def generate(
    m=200,
    n_s=60,
    n_t=60,
    k=4,
    density_s=0.25,
    density_t=0.15,
    offset_scale=0.3,
    noise=0.3,
    gamma_min=1.0,
    gamma_max=5.0,
    integer=True,
    seed=0,
):
    """Return ``(source, target)`` :class:`RatingsDataset` pairs.

    Every user gets at least one rating in each domain.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 1.0, (m, k))
    D_s = rng.normal(0.0, offset_scale, (m, k))
    D_t = rng.normal(0.0, offset_scale, (m, k))
    V_s = rng.normal(0.0, 1.0, (n_s, k)) / np.sqrt(k)
    V_t = rng.normal(0.0, 1.0, (n_t, k)) / np.sqrt(k)

    score_s = (U + D_s) @ V_s.T
    score_t = (np.tanh(1.5 * U) * 2.0 + D_t) @ V_t.T
    score_t = score_t + 0.5 * np.sin(2.0 * score_t)

    def to_rating(score):
        span = gamma_max - gamma_min
        r = gamma_min + span / (1.0 + np.exp(-score))
        r = r + rng.normal(0.0, noise, r.shape)
        if integer:
            r = np.rint(r)
        return np.clip(r, gamma_min, gamma_max)

    R_s, R_t = to_rating(score_s), to_rating(score_t)

    def observe(R, density, prefix):
        obs = rng.random(R.shape) < density
        # make sure each user has at least one observation
        empty = np.flatnonzero(~obs.any(axis=1))
        obs[empty, rng.integers(0, R.shape[1], len(empty))] = True
        us, js = np.nonzero(obs)
        return [(f"u{u}", f"{prefix}{j}", float(R[u, j])) for u, j in zip(us, js)]

    src = ratings_from_triples(observe(R_s, density_s, "s"), gamma_min, gamma_max)
    tgt = ratings_from_triples(observe(R_t, density_t, "t"), gamma_min, gamma_max)
    return src, tgt


def cross_domain(min_ratings=1, **kwargs):
    """Aligned :class:`CrossDomainDataset` from :func:`generate`."""
    src, tgt = generate(**kwargs)
    return align_domains(src, tgt, min_ratings=min_ratings)
