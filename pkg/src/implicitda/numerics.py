"""Dense linear algebra, reproducible RNG streams, and scalar utilities."""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot is non-positive."""

    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix not positive definite: pivot {pivot_index} is {pivot_value:.6g}"
        )


# Pivot acceptance threshold relative to the largest diagonal entry.  Below this
# we fail rather than regularize; any regularization is a caller-level decision.
_PIVOT_RTOL = 1e-13


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular C with C @ C.T = a, for symmetric positive-definite a.

    Implemented in-repo (outer-product form, vectorized over columns); matrices
    here are desk scale (<= 512 x 512) so the O(n^3) dense algorithm is fine.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0 and np.abs(a - a.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    c = np.array(a, dtype=float)  # work in place on a copy
    diag_max = max(c.diagonal().max(initial=0.0), 0.0)
    tol = _PIVOT_RTOL * diag_max
    for j in range(n):
        pivot = c[j, j]
        if not pivot > tol:
            raise NotPositiveDefiniteError(j, float(pivot))
        root = np.sqrt(pivot)
        c[j, j] = root
        if j + 1 < n:
            col = c[j + 1 :, j] / root
            c[j + 1 :, j] = col
            c[j + 1 :, j + 1 :] -= np.outer(col, col)
    return np.tril(c)


def solve_lower(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for lower-triangular L by forward substitution."""
    n = l.shape[0]
    x = np.array(b, dtype=float)
    for i in range(n):
        if i:
            x[i] -= l[i, :i] @ x[:i]
        x[i] /= l[i, i]
    return x


def solve_upper(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve U x = b for upper-triangular U by back substitution."""
    n = u.shape[0]
    x = np.array(b, dtype=float)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] -= u[i, i + 1 :] @ x[i + 1 :]
        x[i] /= u[i, i]
    return x


def invert_lower(l: np.ndarray) -> np.ndarray:
    """Inverse of a lower-triangular matrix (again lower-triangular)."""
    n = l.shape[0]
    inv = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        inv[:, j] = solve_lower(l, e)
    return inv


def spd_solve(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the Cholesky factor of A."""
    return solve_upper(chol_lower.T, solve_lower(chol_lower, b))


def log_sum_exp(logs: np.ndarray) -> float:
    """log(sum(exp(logs))) computed stably; entries may be -inf."""
    logs = np.asarray(logs, dtype=float)
    if logs.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = logs.max()
    if m == -np.inf:
        raise ValueError("all weights zero (every log entry is -inf)")
    return float(m + np.log(np.sum(np.exp(logs - m))))


class RngStream:
    """A counter-based random stream keyed by (seed, stream_id).

    Built on Philox, so identical keys give identical draw sequences and
    distinct stream ids give statistically independent sequences regardless of
    the order in which streams are consumed.  A stream is single-owner: hand it
    whole to one worker, never share it.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def standard_normal(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("requested an empty standard-normal vector (n must be >= 1)")
        return self._gen.standard_normal(n)

    def uniform(self) -> float:
        return float(self._gen.random())

    def multinomial_index(self, probabilities: np.ndarray, size: int) -> np.ndarray:
        return self._gen.choice(len(probabilities), size=size, p=probabilities)


def standard_normal_vector(rng: RngStream, n: int) -> np.ndarray:
    """n i.i.d. N(0,1) draws from the stream; reproducible under a fixed key."""
    return rng.standard_normal(n)


def derive_stream(seed: int, *labels) -> RngStream:
    """Derive a substream from a master seed and a label tuple.

    Labels (ints or strings) are hashed into the 64-bit stream id, so streams
    keyed by e.g. (experiment, step, particle) are reproducible independently
    of execution order.
    """
    h = hashlib.blake2b(digest_size=8)
    for label in labels:
        if isinstance(label, str):
            h.update(b"s" + label.encode("utf-8"))
        else:
            h.update(b"i" + struct.pack("<q", int(label)))
        h.update(b"\x00")
    stream_id = int.from_bytes(h.digest(), "little")
    return RngStream(seed, stream_id)


def finite_difference_jacobian_det(map_fn, point: np.ndarray, step: float) -> float:
    """|det| of the central-difference Jacobian of a vector map at ``point``.

    Test oracle; a singular difference matrix yields 0, not an error.
    """
    point = np.asarray(point, dtype=float)
    n = point.size
    jac = np.empty((n, n))
    for j in range(n):
        dp = np.zeros(n)
        dp[j] = step
        jac[:, j] = (np.asarray(map_fn(point + dp)) - np.asarray(map_fn(point - dp))) / (
            2.0 * step
        )
    return float(abs(np.linalg.det(jac)))
