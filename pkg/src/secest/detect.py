"""Attack detection: the subset-anomaly detector, threshold learning, and chi^2 / safe-sensor baselines.

For every size-n0 subset B two optimal Kalman filters run side by side, one
on the rows of B and one on the rows of its complement. Under no attack
e_B(t) = x_B(t) - x_Bc(t) is zero mean with a steady covariance P_B that is
estimated offline. The detector sums e' P_B^-1 e over a window of J slots,
takes the maximum over B, and alarms when it exceeds eta; the maximising
subset localises the attack.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kalman import OptimalFilterBank, kalman_gain, riccati_fixed_point
from .process_model import SystemModel, simulate
from .sec import subset_list

COND_LIMIT = 1e10
SINGULAR_LIMIT = 1e14


def complement(B: Sequence[int], N: int) -> tuple[int, ...]:
    return tuple(i for i in range(N) if i not in set(B))


class SubsetFilterBank:
    """Optimal Kalman filters on B and on B^c for every subset B, stepped together."""

    def __init__(self, model: SystemModel, subsets=None):
        self.model = model
        self.subsets = [tuple(B) for B in (subsets or subset_list(model.N, model.n0))]
        comps = [complement(B, model.N) for B in self.subsets]
        self.bank = OptimalFilterBank(model, self.subsets + comps)
        self.F = len(self.subsets)

    def anomalies(self, Y: np.ndarray) -> np.ndarray:
        """e_B(t) for a (T, m) observation block, shape (T, F, q)."""
        est = self.bank.run(np.atleast_2d(Y))
        return est[:, : self.F] - est[:, self.F :]

    def reset(self) -> None:
        self.bank.reset()

    def step(self, y: np.ndarray) -> np.ndarray:
        est = self.bank.step(y)
        return est[: self.F] - est[self.F :]


def _regularise(P: np.ndarray) -> tuple[np.ndarray, bool]:
    """Add eps I (eps = 1e-8 trace / q) when ill conditioned; flag matrices that stay singular."""
    P = 0.5 * (P + P.T)
    if np.linalg.cond(P) > COND_LIMIT:
        q = P.shape[0]
        P = P + 1e-8 * np.trace(P) / q * np.eye(q)
    return P, bool(np.linalg.cond(P) < SINGULAR_LIMIT and np.trace(P) > 0)


@dataclass(frozen=True, eq=False)
class SubsetCovarianceTable:
    subsets: tuple
    P_bar: np.ndarray  # (F, q, q)
    P_inv: np.ndarray  # (F, q, q); zero for excluded subsets
    valid: np.ndarray  # (F,) bool
    burn_in: int
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "subsets": [list(B) for B in self.subsets],
            "P_bar": self.P_bar.tolist(),
            "valid": self.valid.tolist(),
            "burn_in": self.burn_in,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetCovarianceTable":
        P_bar = np.array(d["P_bar"], dtype=float)
        valid = np.array(d["valid"], dtype=bool)
        P_inv = np.zeros_like(P_bar)
        for i in np.flatnonzero(valid):
            P_inv[i] = np.linalg.inv(P_bar[i])
        return cls(tuple(tuple(B) for B in d["subsets"]), P_bar, P_inv, valid,
                   int(d["burn_in"]), int(d["sample_count"]))


def table_cache_key(model: SystemModel, seed: int, horizon: int) -> str:
    digest = hashlib.sha256(model.to_json().encode()).hexdigest()[:16]
    return f"{digest}-{seed}-{horizon}"


def precompute_subset_covariances(
    model: SystemModel,
    horizon: int = 101_000,
    burn_in: int = 1_000,
    seed: int = 0,
    cache_dir: str | Path | None = None,
) -> SubsetCovarianceTable:
    """Average e_B e_B' over an attack-free simulation after ``burn_in`` slots."""
    if horizon - burn_in < 1000 * model.q:
        raise ValueError(f"need horizon - burn_in >= {1000 * model.q} samples")
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"subset_cov_{table_cache_key(model, seed, horizon)}.json"
        if path.exists():
            return SubsetCovarianceTable.from_dict(json.loads(path.read_text()))
    traj = simulate(model, horizon, seed=seed)
    bank = SubsetFilterBank(model)
    E = bank.anomalies(traj.observations)[burn_in:]
    n = len(E)
    P_bar = np.einsum("tfi,tfj->fij", E, E) / n
    P_inv = np.zeros_like(P_bar)
    valid = np.zeros(bank.F, dtype=bool)
    for i in range(bank.F):
        P_bar[i], valid[i] = _regularise(P_bar[i])
        if valid[i]:
            P_inv[i] = np.linalg.inv(P_bar[i])
        else:
            warnings.warn(f"anomaly covariance of subset {bank.subsets[i]} is singular; excluded")
    table = SubsetCovarianceTable(tuple(bank.subsets), P_bar, P_inv, valid, burn_in, n)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(table.to_dict()))
    return table


def quadratic_forms(E: np.ndarray, table: SubsetCovarianceTable) -> np.ndarray:
    """e' P^-1 e per slot and subset; excluded subsets read -inf so they never win the max."""
    Qf = np.einsum("...fi,fij,...fj->...f", E, table.P_inv, E)
    return np.where(table.valid, Qf, -np.inf)


def windowed_sum(x: np.ndarray, J: int) -> np.ndarray:
    """Sum over the trailing J slots along axis 0; the first J-1 slots are NaN (window not warm)."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if len(x) >= J:
        c = np.cumsum(np.where(np.isfinite(x), x, 0.0), axis=0)
        out[J - 1] = c[J - 1]
        out[J:] = c[J:] - c[:-J]
        if not np.all(np.isfinite(x)):
            out[J - 1 :] = np.where(np.isfinite(x[J - 1 :]), out[J - 1 :], -np.inf)
    return out


def detect_statistics(
    model: SystemModel, table: SubsetCovarianceTable, Y: np.ndarray, J: int
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed DETECT statistic and argmax subset index for every slot of a stream."""
    bank = SubsetFilterBank(model, table.subsets)
    W = windowed_sum(quadratic_forms(bank.anomalies(Y), table), J)
    stat = np.full(len(Y), np.nan)
    loc = np.full(len(Y), -1)
    if len(Y) >= J:
        stat[J - 1 :] = W[J - 1 :].max(axis=1)
        loc[J - 1 :] = W[J - 1 :].argmax(axis=1)
    return stat, loc


@dataclass
class DetectorState:
    J: int
    eta: float
    window: deque = field(default_factory=deque)  # per-slot arrays of e' P^-1 e over subsets
    alarms: list = field(default_factory=list)  # (t, statistic, localized subset)
    t: int = 0


class Detect:
    """Streaming DETECT: one call per received observation."""

    def __init__(self, model: SystemModel, table: SubsetCovarianceTable | None, J: int = 10,
                 eta: float = 0.0, l: float = math.inf):
        if table is None:
            raise ValueError("subset covariance table must be precomputed first")
        if J < 1:
            raise ValueError("J must be >= 1")
        if not 0.0 <= eta <= l:
            raise ValueError("eta must lie in [0, l]")
        self.model = model
        self.table = table
        self.bank = SubsetFilterBank(model, table.subsets)
        self.state = DetectorState(J=J, eta=float(eta), window=deque(maxlen=J))

    def step(self, y: np.ndarray):
        """Returns (alarm, localized subset or None, statistic); alarm is None until the window is warm."""
        return detect_step(self.state, self.table, self.bank.step(y))


def detect_step(state: DetectorState, table: SubsetCovarianceTable, e: np.ndarray):
    """Push this slot's anomaly vectors (F, q) and decide."""
    state.t += 1
    state.window.append(quadratic_forms(e, table))
    if len(state.window) < state.J:
        return None, None, float("nan")
    W = np.sum(state.window, axis=0)
    i = int(np.argmax(W))
    stat = float(W[i])
    if stat > state.eta:
        B = tuple(table.subsets[i])
        state.alarms.append((state.t, stat, B))
        return True, B, stat
    return False, None, stat


# chi^2 detector on the fused innovation


def optimal_innovations(model: SystemModel, Y: np.ndarray) -> np.ndarray:
    """Innovations y(t) - C A x(t-1) of the optimal all-sensor Kalman filter started at zero."""
    bank = OptimalFilterBank(model, [tuple(range(model.N))])
    X = bank.run(Y)[:, 0]
    prev = np.vstack([np.zeros(model.q), X[:-1]])
    return Y - prev @ (model.C @ model.A).T


def chi2_statistics(Z: np.ndarray, Sigma_z: np.ndarray, J: int) -> np.ndarray:
    Si = np.linalg.inv(Sigma_z)
    return windowed_sum(np.einsum("ti,ij,tj->t", Z, Si, Z), J)


def chi2_detector(window: np.ndarray, Sigma_z: np.ndarray, J: int, eta: float) -> bool:
    """Alarm iff sum z' Sigma_z^-1 z over the last J innovations is >= eta."""
    Z = np.atleast_2d(np.asarray(window, dtype=float))[-J:]
    if len(Z) < J:
        raise ValueError(f"window holds {len(Z)} innovations, need J={J}")
    try:
        stat = float(np.einsum("ti,ij,tj->", Z, np.linalg.inv(Sigma_z), Z))
    except np.linalg.LinAlgError as exc:
        raise ValueError("Sigma_z is singular") from exc
    return stat >= eta


# safe-sensor detector / estimator


class SafeFilter:
    """Kalman filter that trusts a safe sensor set and screens the rest with a windowed chi^2 test.

    Each slot the safe rows update the prediction first; the remaining rows
    are tested through their innovation conditioned on the safe rows and are
    folded in only while the window statistic stays at or below ``eta``.
    """

    def __init__(self, model: SystemModel, safe_set: Sequence[int], J: int = 10,
                 eta: float = math.inf, x0=None, P0=None):
        if not safe_set:
            raise ValueError("safe set must be non-empty")
        self.model = model
        self.safe = model.sensor_rows(safe_set)
        self.unsafe = np.setdiff1d(np.arange(model.m), self.safe)
        self.J = J
        self.eta = float(eta)
        self.x = np.zeros(model.q) if x0 is None else np.array(x0, dtype=float)
        self.P = np.zeros((model.q, model.q)) if P0 is None else np.array(P0, dtype=float)
        self.window = deque(maxlen=J)

    def step(self, y: np.ndarray):
        """Returns (alarm or None before the window is warm, statistic, estimate)."""
        m = self.model
        A, C, R = m.A, m.C, m.R
        s, u = self.safe, self.unsafe
        x_pred = A @ self.x
        P_pred = A @ self.P @ A.T + m.Q
        z = np.asarray(y, dtype=float) - C @ x_pred
        S = C @ P_pred @ C.T + R
        Ks = kalman_gain(P_pred, C[s], R[np.ix_(s, s)])
        x_s = x_pred + Ks @ z[s]
        P_s = P_pred - Ks @ C[s] @ P_pred
        if len(u) == 0:
            self.x, self.P = x_s, 0.5 * (P_s + P_s.T)
            return False, 0.0, self.x
        # innovation of the unsafe rows given the safe ones
        L = np.linalg.solve(S[np.ix_(s, s)], S[np.ix_(s, u)]).T
        r = z[u] - L @ z[s]
        S_r = S[np.ix_(u, u)] - L @ S[np.ix_(s, u)]
        self.window.append(float(r @ np.linalg.solve(S_r, r)))
        warm = len(self.window) == self.J
        stat = float(sum(self.window)) if warm else float("nan")
        alarm = warm and stat > self.eta
        if alarm:
            self.x, P = x_s, P_s
        else:
            K = kalman_gain(P_pred, C, R)
            self.x = x_pred + K @ z
            P = P_pred - K @ C @ P_pred
        self.P = 0.5 * (P + P.T)
        return (alarm if warm else None), stat, self.x


def safe_statistics(model: SystemModel, safe_set, Y: np.ndarray, J: int) -> np.ndarray:
    """SAFE window statistics for a stream with the unsafe rows always accepted.

    Decisions at a threshold eta are ``stat > eta``; the estimate itself is not
    needed for ROC points, so the screening feedback is left out here.
    """
    f = SafeFilter(model, safe_set, J=J)
    return np.array([f.step(y)[1] for y in Y])


def safe_detector_step(f: SafeFilter, y: np.ndarray):
    """One SAFE slot: (decision, estimate)."""
    alarm, _, x = f.step(y)
    return alarm, x


# threshold learning


def _default_gain(stats: np.ndarray, alpha: float, eta0: float) -> float:
    """Robbins-Monro gain 1 / f(eta*) from a pilot density estimate around the target quantile."""
    h = min(0.5 * alpha, 0.5 * (1 - alpha), 0.02)
    lo, hi = np.quantile(stats, [1 - alpha - h, 1 - alpha + h])
    dens = 2 * h / max(hi - lo, 1e-12)
    return 1.0 / dens


@dataclass
class LearnState:
    eta: float
    N: int = 0
    alpha: float = 0.05
    a: Callable[[int], float] = lambda tau: 1.0 / tau
    l: float = math.inf
    tau: int = 0
    trace: list = field(default_factory=list)


def learn_step(state: LearnState, statistic: float) -> bool:
    """eta <- [eta + a(tau) (I[alarm] - alpha)] clipped to [0, l]; returns the alarm."""
    state.tau += 1
    alarm = bool(statistic > state.eta)
    state.N += alarm
    state.eta = float(min(max(state.eta + state.a(state.tau) * (alarm - state.alpha), 0.0), state.l))
    state.trace.append(state.eta)
    return alarm


def learn_eta(
    stats: np.ndarray,
    alpha: float,
    a: Callable[[int], float] | None = None,
    eta0: float | None = None,
    l: float = math.inf,
    n_pilot: int = 2000,
) -> LearnState:
    """Run the threshold recursion over a stream of attack-free statistics.

    Without an explicit schedule, a(tau) = c / (n_pilot + tau) with c = 1 / f(eta),
    f the statistic's density near its (1 - alpha) quantile estimated from the
    first ``n_pilot`` samples, which also supply eta(0).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    stats = np.asarray(stats, dtype=float)
    stats = stats[np.isfinite(stats)]
    pilot = stats[:n_pilot]
    if eta0 is None:
        eta0 = float(np.quantile(pilot, 1 - alpha)) if alpha < 1 else 0.0
    if a is None:
        # the pilot already carries n_pilot samples of information, so the steps start there
        c = _default_gain(pilot, alpha, eta0) if alpha < 1 else 1.0
        offset = len(pilot)
        a = lambda tau: c / (offset + tau)  # noqa: E731
    state = LearnState(eta=float(min(max(eta0, 0.0), l)), alpha=alpha, a=a, l=l)
    for s in stats:
        learn_step(state, s)
    return state


def learn_threshold(
    model: SystemModel,
    table: SubsetCovarianceTable,
    J: int,
    alpha: float,
    a: Callable[[int], float] | None = None,
    horizon: int = 100_000,
    seed: int = 0,
    l: float = math.inf,
) -> float:
    """Tune DETECT's eta on a fresh attack-free stream so the per-slot trigger rate approaches alpha."""
    traj = simulate(model, horizon, seed=seed)
    stats, _ = detect_statistics(model, table, traj.observations, J)
    return learn_eta(stats, alpha, a=a, l=l).eta


def alarm_rate(stats: np.ndarray, eta: float) -> float:
    """Fraction of warm slots whose statistic exceeds eta."""
    stats = np.asarray(stats, dtype=float)
    stats = stats[~np.isnan(stats)]
    return float(np.mean(stats > eta)) if len(stats) else 0.0


def steady_innovation_cov(model: SystemModel) -> np.ndarray:
    return riccati_fixed_point(model).Sigma_z
