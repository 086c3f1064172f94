"""Reference computations used by self-checks and the test suite.

These deliberately avoid the package's own factorization and filter code so
that agreement with them is meaningful.
"""

from __future__ import annotations

import numpy as np


def scalar_kalman_filter(observations, a, g, q, x0, p0=0.0):
    """Exact posterior means/variances for x' = a x + g W, b = x + q V.

    observations: sequence of scalar observations, one per step.
    Returns (means, variances) arrays aligned with the observations.
    """
    means = np.empty(len(observations))
    variances = np.empty(len(observations))
    x, p = float(x0), float(p0)
    for i, b in enumerate(observations):
        x_pred = a * x
        p_pred = a * a * p + g * g
        gain = p_pred / (p_pred + q * q)
        x = x_pred + gain * (b - x_pred)
        p = (1.0 - gain) * p_pred
        means[i] = x
        variances[i] = p
    return means, variances


def gaussian_bin_probabilities(edges, mean=0.0, std=1.0):
    """P(bin) for a Gaussian over the given bin edges (erf based, no scipy)."""
    from math import erf, sqrt

    z = (np.asarray(edges, dtype=float) - mean) / (std * sqrt(2.0))
    cdf = np.array([0.5 * (1.0 + erf(v)) for v in z])
    probs = np.empty(len(edges) + 1)
    probs[0] = cdf[0]
    probs[1:-1] = np.diff(cdf)
    probs[-1] = 1.0 - cdf[-1]
    return probs


def chi_square_statistic(samples, weights, edges, probabilities):
    """ESS-adjusted chi-square of weighted samples against bin probabilities."""
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    idx = np.searchsorted(edges, np.asarray(samples, dtype=float), side="right")
    observed = np.bincount(idx, weights=weights, minlength=len(probabilities))
    n_eff = 1.0 / np.sum(weights**2)
    return n_eff * np.sum((observed - probabilities) ** 2 / probabilities)


# chi-square quantile at p=0.999 for df = 20 bins - 1, frozen from standard
# tables so the check has no scipy dependency.
CHI2_DF19_P999 = 43.820
