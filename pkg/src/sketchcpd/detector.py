"""Streaming GLR change-point detectors on sketches.

Three state machines share one calling convention, ``step(...) -> (statistic,
Alarm)``, plus a block ``scan`` used by the Monte Carlo driver:

* :class:`FixedSketchDetector` - whitened windowed GLR for a fixed projection.
* :class:`MissingDataDetector` - windowed GLR when a different subset of
  coordinates is observed at each time.
* :class:`CusumBaseline` - per-coordinate one-sided CUSUM against a prescribed
  mean, summed across coordinates; ignores the sketch covariance.

``glr_direct`` and ``glr_timevarying_pinv`` evaluate the same statistics by
brute force (explicit solves / pseudo-inverses) and serve as oracles.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import SpdFactor, solve_lower
from .projections import ObservationMask, ProjectionMatrix

PINV_RTOL = 1e-10


@dataclass(frozen=True)
class Alarm:
    """Outcome of one detector step (or of a whole run).

    ``khat`` is the maximizing window start; ``reason`` is ``"alarm"``,
    ``"running"``, ``"cap"`` or ``"exhausted"``.
    """

    time: int
    statistic: float
    khat: int
    fired: bool
    reason: str = "running"

    def csv_row(self) -> str:
        return f"{self.time},{self.statistic!r},{self.khat},{int(self.fired)}"


def _check_window_threshold(window: int, threshold: float) -> None:
    if int(window) != window or window < 1:
        raise ValueError(f"window must be a positive integer, got {window}")
    if threshold != threshold:
        raise ValueError("threshold is NaN")


class FixedSketchDetector:
    """Windowed GLR for sketches ``y_t = A x_t`` with a fixed ``A``.

    Sketches are whitened with the Cholesky factor ``L`` of ``A A^T``
    (``z = L^{-1} y``), after which the statistic is

        max_{max(0, t-w) <= k < t}  ||S_t - S_k||^2 / (2 (t - k)),

    with ``S`` the running sum of ``z``. The ring keeps the last ``w + 1``
    running sums, so a step costs ``O(w M)``.
    """

    def __init__(self, whitener: ProjectionMatrix | SpdFactor | np.ndarray, window: int, threshold: float) -> None:
        if isinstance(whitener, ProjectionMatrix):
            whitener = whitener.factor
        elif not isinstance(whitener, SpdFactor):
            whitener = ProjectionMatrix(whitener).factor
        _check_window_threshold(window, threshold)
        self.whitener = whitener
        self.window = int(window)
        self.threshold = float(threshold)
        self.reset()

    @property
    def dim(self) -> int:
        return self.whitener.dim

    def reset(self) -> None:
        self.t = 0
        self._ring = np.zeros((self.window + 1, self.dim))

    def ring_entries(self) -> np.ndarray:
        """Running sums ``S_k`` for ``k = max(0, t-w) .. t`` in time order."""
        ks = range(max(0, self.t - self.window), self.t + 1)
        return np.array([self._ring[k % (self.window + 1)] for k in ks])

    def whiten(self, Y: np.ndarray) -> np.ndarray:
        """Whiten a single sketch or a (T, M) block of sketches."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape[-1] != self.dim:
            raise ValueError(f"sketch dimension {Y.shape[-1]} does not match M={self.dim}")
        return solve_lower(self.whitener, Y.T).T

    def step(self, y: np.ndarray) -> tuple[float, Alarm]:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"expected a sketch of length {self.dim}, got shape {y.shape}")
        return self.step_whitened(self.whiten(y))

    def step_whitened(self, z: np.ndarray) -> tuple[float, Alarm]:
        stats, khat = self.scan_whitened(np.asarray(z, dtype=float).reshape(1, -1))
        s = float(stats[0])
        fired = s > self.threshold
        return s, Alarm(self.t, s, int(khat[0]), fired, "alarm" if fired else "running")

    def scan(self, Y: np.ndarray, stop: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        return self.scan_whitened(self.whiten(Y), stop)

    def scan_whitened(self, Z: np.ndarray, stop: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Advance over a (T, M) block; stops after the first statistic above ``stop``.

        Returns the statistics and window starts of the steps actually taken.
        """
        Z = np.ascontiguousarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.dim:
            raise ValueError(f"expected a (T, {self.dim}) block, got shape {Z.shape}")
        stats = np.empty(Z.shape[0])
        khat = np.empty(Z.shape[0], dtype=np.int64)
        n = _kernels.fixed_scan(self._ring, self.t, Z, float(stop), stats, khat)
        self.t += n
        return stats[:n], khat[:n]


class MissingDataDetector:
    """Windowed GLR when only a subset of the ``N`` coordinates is observed.

    With ``P_i(x_i)`` the observation at time ``i`` zero-filled to length ``N``
    and ``V_n(k, t)`` the number of times coordinate ``n`` was seen in
    ``(k, t]``, the statistic is

        max_k  1/2 sum_n [sum_{i=k+1}^t P_i(x_i)]_n^2 / V_n(k, t),

    where never-observed coordinates contribute zero. The last ``w``
    observation sets are kept in a ring; each step accumulates them backwards
    from ``t`` with sparse scratch sums, costing ``O(w M_t)`` rather than
    ``O(w N)``.
    """

    def __init__(self, N: int, window: int, threshold: float, max_observed: int | None = None) -> None:
        _check_window_threshold(window, threshold)
        if N < 1:
            raise ValueError("N must be positive")
        self.N = int(N)
        self.window = int(window)
        self.threshold = float(threshold)
        self.max_observed = self.N if max_observed is None else int(max_observed)
        self.reset()

    def reset(self) -> None:
        w, cap = self.window, self.max_observed
        self.t = 0
        self._obs_idx = np.zeros((w, cap), dtype=np.int64)
        self._obs_val = np.zeros((w, cap))
        self._obs_len = np.zeros(w, dtype=np.int64)
        self._sums = np.zeros(self.N)
        self._cnts = np.zeros(self.N, dtype=np.int64)

    def observation_counts(self, k: int) -> np.ndarray:
        """``V_n(k, t)`` for every coordinate, from the ring (``t - w <= k < t``)."""
        if not max(0, self.t - self.window) <= k < self.t:
            raise ValueError(f"k={k} is outside the current window")
        counts = np.zeros(self.N, dtype=np.int64)
        for i in range(k + 1, self.t + 1):
            s = (i - 1) % self.window
            np.add.at(counts, self._obs_idx[s, : self._obs_len[s]], 1)
        return counts

    def step(self, mask: ObservationMask | Iterable[int], values: Iterable[float]) -> tuple[float, Alarm]:
        idx = mask.observed if isinstance(mask, ObservationMask) else np.asarray(list(mask), dtype=np.int64)
        vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
        if idx.shape != vals.shape:
            raise ValueError(f"{idx.size} observed indices but {vals.size} values")
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise ValueError(f"mask index out of range [0, {self.N})")
        if np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be distinct")
        if idx.size > self.max_observed:
            raise ValueError(f"{idx.size} observations exceed max_observed={self.max_observed}")
        stats, khat = self.scan(idx.reshape(1, -1), vals.reshape(1, -1), np.array([idx.size]))
        s = float(stats[0])
        fired = s > self.threshold
        return s, Alarm(self.t, s, int(khat[0]), fired, "alarm" if fired else "running")

    def step_row(self, row: np.ndarray) -> tuple[float, Alarm]:
        """Step on a full-length row where NaN marks an unobserved coordinate."""
        row = np.asarray(row, dtype=float)
        if row.shape != (self.N,):
            raise ValueError(f"expected a row of length {self.N}, got shape {row.shape}")
        idx = np.flatnonzero(~np.isnan(row))
        return self.step(idx, row[idx])

    def scan(
        self, idx: np.ndarray, vals: np.ndarray, lens: np.ndarray, stop: float = np.inf
    ) -> tuple[np.ndarray, np.ndarray]:
        """Advance over a padded block: row ``j`` observes ``idx[j, :lens[j]]``.

        Indices are trusted here (the Monte Carlo driver generates them); use
        :meth:`step` for validated input.
        """
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        vals = np.ascontiguousarray(vals, dtype=float)
        lens = np.ascontiguousarray(lens, dtype=np.int64)
        T = idx.shape[0]
        stats = np.empty(T)
        khat = np.empty(T, dtype=np.int64)
        n = _kernels.missing_scan(
            self._obs_idx, self._obs_val, self._obs_len, self.t, idx, vals, lens,
            self._sums, self._cnts, float(stop), stats, khat,
        )
        self.t += n
        return stats[:n], khat[:n]


class CusumBaseline:
    """Sum of one-sided CUSUMs tuned to a prescribed post-change mean.

    Each coordinate runs ``s <- max(0, s + (y - r/2) r)``, the log-likelihood
    ratio recursion for ``N(0,1)`` versus ``N(r,1)``; the alarm statistic is
    the sum of the states. Cross-coordinate covariance is ignored by design.
    """

    def __init__(self, reference_mean: np.ndarray | int, threshold: float) -> None:
        ref = np.ones(reference_mean) if np.isscalar(reference_mean) else np.asarray(reference_mean, dtype=float)
        if ref.ndim != 1 or ref.size == 0:
            raise ValueError("reference mean must be a non-empty vector")
        self.reference_mean = ref
        self.threshold = float(threshold)
        self.reset()

    @property
    def dim(self) -> int:
        return self.reference_mean.size

    def reset(self) -> None:
        self.t = 0
        self.states = np.zeros(self.dim)
        self._last_zero = 0

    def step(self, y: np.ndarray) -> tuple[float, Alarm]:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {y.shape}")
        (s,) = self.scan(y.reshape(1, -1))
        s = float(s)
        fired = s > self.threshold
        return s, Alarm(self.t, s, self._last_zero, fired, "alarm" if fired else "running")

    def scan(self, Y: np.ndarray, stop: float = np.inf) -> np.ndarray:
        Y = np.ascontiguousarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != self.dim:
            raise ValueError(f"expected a (T, {self.dim}) block, got shape {Y.shape}")
        stats = np.empty(Y.shape[0])
        n = _kernels.cusum_scan(self.states, self.reference_mean, Y, float(stop), stats)
        zeros = np.flatnonzero(stats[:n] == 0.0)
        if zeros.size:
            self._last_zero = self.t + int(zeros[-1]) + 1
        self.t += n
        return stats[:n]


def run_to_alarm(detector, data_source: Iterable, horizon_cap: int) -> Alarm:
    """Feed ``data_source`` to ``detector.step`` until an alarm or ``horizon_cap`` steps.

    Items that are tuples are unpacked into ``step`` (``(mask, values)`` for the
    missing-data detector). The returned alarm's ``reason`` distinguishes an
    alarm, reaching the cap, and running out of data.
    """
    if horizon_cap < 1:
        raise ValueError("horizon_cap must be at least 1")
    last = Alarm(detector.t, 0.0, detector.t, False, "exhausted")
    for item in data_source:
        _, alarm = detector.step(*item) if isinstance(item, tuple) else detector.step(item)
        if alarm.fired:
            return alarm
        last = alarm
        if detector.t >= horizon_cap:
            return Alarm(alarm.time, alarm.statistic, alarm.khat, False, "cap")
    return Alarm(last.time, last.statistic, last.khat, False, "exhausted")


# ---------------------------------------------------------------------------
# brute-force oracles


def glr_direct(A: ProjectionMatrix | np.ndarray, ys: np.ndarray, k: int) -> float:
    """``(t-k)/2 * ybar^T (A A^T)^{-1} ybar`` for the window ``(k, t]`` of ``ys``.

    ``ys`` holds ``y_1 .. y_t`` as rows; ``k`` counts how many leading rows
    are excluded. Solves with a general LU solve, independently of the
    Cholesky whitening used by the detector.
    """
    A = A.entries if isinstance(A, ProjectionMatrix) else np.asarray(A, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    t = ys.shape[0]
    if not 0 <= k < t:
        raise ValueError(f"need 0 <= k < t={t}, got k={k}")
    ybar = ys[k:].mean(axis=0)
    return 0.5 * (t - k) * float(ybar @ np.linalg.solve(A @ A.T, ybar))


def glr_direct_max(A, ys: np.ndarray, window: int) -> tuple[float, int]:
    """Max of :func:`glr_direct` over ``max(0, t-w) <= k < t``; returns (value, argmax)."""
    t = len(ys)
    best, arg = 0.0, t - 1
    for k in range(t - 1, max(0, t - window) - 1, -1):
        v = glr_direct(A, ys, k)
        if v > best:
            best, arg = v, k
    return best, arg


def glr_timevarying_pinv(A_list, y_list) -> float:
    """GLR for time-varying projections over the window covered by the lists.

    ``1/2 q^T B q`` with ``q = sum_i A_i^T (A_i A_i^T)^{-1} y_i`` and ``B`` the
    pseudo-inverse (singular values below ``1e-10 * sigma_max`` dropped) of
    ``sum_i A_i^T (A_i A_i^T)^{-1} A_i``. Costs ``O(N^3)``; meant for small ``N``.
    """
    A_list = [a.entries if isinstance(a, ProjectionMatrix) else np.atleast_2d(np.asarray(a, dtype=float)) for a in A_list]
    if len(A_list) != len(y_list) or not A_list:
        raise ValueError("need equally many (non-zero) projections and sketches")
    N = A_list[0].shape[1]
    q = np.zeros(N)
    G = np.zeros((N, N))
    for A, y in zip(A_list, y_list):
        if A.shape[0] == 0:
            continue
        C = A @ A.T
        q += A.T @ np.linalg.solve(C, np.asarray(y, dtype=float))
        G += A.T @ np.linalg.solve(C, A)
    B = np.linalg.pinv(G, rcond=PINV_RTOL, hermitian=True)
    return 0.5 * float(q @ B @ q)


class TimeVaryingGLRDetector:
    """Exact windowed GLR for arbitrary per-step projections via pseudo-inverses.

    Each step re-evaluates :func:`glr_timevarying_pinv` for every window start,
    so it is only practical for small ``N`` and ``w``.
    """

    def __init__(self, window: int, threshold: float) -> None:
        _check_window_threshold(window, threshold)
        self.window = int(window)
        self.threshold = float(threshold)
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self._hist: deque = deque(maxlen=self.window)

    def step(self, A, y) -> tuple[float, Alarm]:
        self.t += 1
        self._hist.append((A, np.asarray(y, dtype=float)))
        items = list(self._hist)
        best, arg = 0.0, self.t - 1
        for j in range(len(items)):
            k = self.t - len(items) + j
            v = glr_timevarying_pinv([a for a, _ in items[j:]], [y for _, y in items[j:]])
            if v > best:
                best, arg = v, k
        fired = best > self.threshold
        return best, Alarm(self.t, best, arg, fired, "alarm" if fired else "running")
