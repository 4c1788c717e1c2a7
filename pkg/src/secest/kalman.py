"""Kalman filtering, fixed-gain filtering and the associated covariance recursions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .process_model import spectral_radius


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class FilterState:
    """Running linear estimator.

    ``K`` is None for the optimal (time-varying gain) filter, otherwise the
    constant gain used by :func:`fixed_gain_step`.
    """

    x_hat: np.ndarray
    P: np.ndarray
    K: np.ndarray | None = None
    t: int = 0

    def predicted_cov(self, model) -> np.ndarray:
        return _sym(model.A @ self.P @ model.A.T + model.Q)


@dataclass(frozen=True)
class SteadyState:
    P_pred: np.ndarray
    K_ss: np.ndarray
    Sigma_z: np.ndarray
    P_filt: np.ndarray  # (I - K_ss C) P_pred

    def to_dict(self) -> dict:
        return {
            "P_pred": self.P_pred.tolist(),
            "K_ss": self.K_ss.tolist(),
            "Sigma_z": self.Sigma_z.tolist(),
            "P_filt": self.P_filt.tolist(),
        }


def kalman_gain(P_pred: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """P C' (C P C' + R)^-1.

    A singular innovation covariance is tolerated only when P C' vanishes
    (the gain is then zero); otherwise LinAlgError is raised.
    """
    PCt = P_pred @ C.T
    S = C @ PCt + R
    try:
        return np.linalg.solve(S, PCt.T).T
    except np.linalg.LinAlgError:
        if np.allclose(PCt, 0.0, atol=1e-15):
            return np.zeros_like(PCt)
        raise


def kf_step(state: FilterState, model, y: np.ndarray) -> tuple[FilterState, np.ndarray]:
    """One optimal Kalman update; returns the new state and the innovation."""
    A, C = model.A, model.C
    y = np.asarray(y, dtype=float)
    if y.shape != (C.shape[0],):
        raise ValueError(f"observation must have length {C.shape[0]}")
    x_pred = A @ state.x_hat
    P_pred = _sym(A @ state.P @ A.T + model.Q)
    K = kalman_gain(P_pred, C, model.R)
    z = y - C @ x_pred
    x_new = x_pred + K @ z
    P_new = _sym((np.eye(A.shape[0]) - K @ C) @ P_pred)
    return FilterState(x_new, P_new, None, state.t + 1), z


def riccati_fixed_point(model, tol: float = 1e-10, max_iter: int = 100_000) -> SteadyState:
    """Iterate P <- A (P - P C'(C P C' + R)^-1 C P) A' + Q from P = Q until stationary."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, Q, C, R = model.A, model.Q, model.C, model.R
    I = np.eye(A.shape[0])
    P = np.array(Q, dtype=float)
    for _ in range(max_iter):
        K = kalman_gain(P, C, R)
        P_next = _sym(A @ ((I - K @ C) @ P) @ A.T + Q)
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Riccati iteration did not converge (is (A, C) detectable?)")
    K = kalman_gain(P, C, R)
    return SteadyState(P, K, _sym(C @ P @ C.T + R), _sym((I - K @ C) @ P))


def fixed_gain_step(state: FilterState, model, y: np.ndarray) -> FilterState:
    """x <- A x + K (y - C A x) with the state's constant gain."""
    if state.K is None:
        raise ValueError("fixed_gain_step needs a constant gain K")
    y = np.asarray(y, dtype=float)
    if y.shape != (model.C.shape[0],) or state.K.shape != (model.A.shape[0], model.C.shape[0]):
        raise ValueError("dimension mismatch between gain, model and observation")
    x_pred = model.A @ state.x_hat
    x_new = x_pred + state.K @ (y - model.C @ x_pred)
    return replace(state, x_hat=x_new, t=state.t + 1)


def error_cov_step(P_prev: np.ndarray, K: np.ndarray, model) -> np.ndarray:
    """Error covariance of a linear filter run with an arbitrary gain K."""
    A = model.A
    return gain_update_cov(A @ P_prev @ A.T + model.Q, K, model.C, model.R)


def gain_update_cov(P_pred, K, C, R, I=None) -> np.ndarray:
    """(I - K C) P_pred (I - K C)' + K R K', symmetrised."""
    I_KC = (np.eye(P_pred.shape[0]) if I is None else I) - K @ C
    P = I_KC @ P_pred @ I_KC.T + K @ R @ K.T
    return 0.5 * (P + P.T)


def limiting_cov(
    K: np.ndarray, model, tol: float = 1e-13, max_iter: int = 1_000_000
) -> tuple[np.ndarray, float]:
    """Fixed point P(K) of :func:`error_cov_step` for a constant gain; returns (P, trace)."""
    P = np.zeros((model.A.shape[0],) * 2)
    for _ in range(max_iter):
        P_next = error_cov_step(P, K, model)
        if np.max(np.abs(P_next - P)) < tol:
            return P_next, float(np.trace(P_next))
        P = P_next
    raise RuntimeError("covariance recursion did not converge; gain is infeasible")


def gain_feasible(K: np.ndarray, C: np.ndarray, delta: float) -> bool:
    return spectral_radius(np.eye(K.shape[0]) - K @ C) <= 1.0 - delta


def column_mask(N: int, k: int, sensors: Sequence[int]) -> np.ndarray:
    sensors = list(sensors)
    if not sensors:
        raise ValueError("sensor subset must be non-empty")
    mask = np.zeros(N * k, dtype=bool)
    for s in sensors:
        if not 0 <= s < N:
            raise ValueError(f"sensor {s} out of range for N={N}")
        mask[s * k : (s + 1) * k] = True
    return mask


def restrict_gain(K: np.ndarray, subset: Sequence[int], k: int) -> np.ndarray:
    """Zero the k columns of every sensor outside ``subset``."""
    N = K.shape[1] // k
    return K * column_mask(N, k, subset)


class OptimalFilterBank:
    """Several optimal Kalman filters, each on its own sensor subset, stepped together.

    The gain sequence of an optimal filter does not depend on the data, so it is
    precomputed until the covariance settles and then held constant. Gains are
    stored at full width with zero columns for unused rows, so every filter
    consumes the full observation vector.
    """

    def __init__(self, model, subsets, P0=None, tol: float = 1e-14, max_iter: int = 100_000):
        self.model = model
        self.subsets = [tuple(s) for s in subsets]
        q, m = model.q, model.m
        F = len(self.subsets)
        if P0 is None:
            P0 = np.zeros((q, q))
        schedules = []
        for sub in self.subsets:
            sys = model.subsystem(sub)
            P = np.array(P0, dtype=float)
            gains = []
            for _ in range(max_iter):
                P_pred = _sym(sys.A @ P @ sys.A.T + sys.Q)
                K = kalman_gain(P_pred, sys.C, sys.R)
                P_new = _sym((np.eye(q) - K @ sys.C) @ P_pred)
                full = np.zeros((q, m))
                full[:, sys.rows] = K
                gains.append(full)
                if np.max(np.abs(P_new - P)) < tol:
                    break
                P = P_new
            schedules.append(gains)
        self.n_transient = max(len(g) for g in schedules)
        # gains[t] has shape (F, q, m); the last entry is reused forever.
        self.gains = np.empty((self.n_transient, F, q, m))
        for f, g in enumerate(schedules):
            for t in range(self.n_transient):
                self.gains[t, f] = g[min(t, len(g) - 1)]

    def reset(self, x0=None) -> None:
        F, q = len(self.subsets), self.model.q
        self._x = np.zeros((F, q)) if x0 is None else np.array(x0, dtype=float)
        self._t = 0

    def step(self, y: np.ndarray) -> np.ndarray:
        """Advance every filter by one observation; returns the (F, q) estimates."""
        if not hasattr(self, "_x"):
            self.reset()
        A, C = self.model.A, self.model.C
        G = self.gains[min(self._t, self.n_transient - 1)]
        x = self._x
        innov = np.asarray(y, dtype=float) - x @ (C @ A).T
        self._x = x @ A.T + np.einsum("fqm,fm->fq", G, innov)
        self._t += 1
        return self._x.copy()

    def run(self, Y: np.ndarray, x0=None) -> np.ndarray:
        """Filter a (T, m) observation block; returns estimates of shape (T, F, q)."""
        A, C = self.model.A, self.model.C
        T = Y.shape[0]
        F = len(self.subsets)
        x = np.zeros((F, A.shape[0])) if x0 is None else np.array(x0, dtype=float)
        out = np.empty((T, F, A.shape[0]))
        CA = C @ A
        last = self.n_transient - 1
        for t in range(T):
            G = self.gains[min(t, last)]
            innov = Y[t] - x @ CA.T
            x = x @ A.T + np.einsum("fqm,fm->fq", G, innov)
            out[t] = x
        return out
