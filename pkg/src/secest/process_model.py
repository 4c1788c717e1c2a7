"""Linear Gaussian plant with N sensors: random instance generation and simulation.

    x(t+1) = A x(t) + w(t),   w ~ N(0, Q)
    y(t)   = C x(t) + v(t),   v ~ N(0, R)

``C`` stacks the per-sensor observation blocks; sensor ``i`` (0-based) owns
rows ``i*k .. (i+1)*k - 1`` of ``C``, ``R`` and ``y``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PSD_TOL = 1e-9


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    M = np.atleast_2d(M)
    if M.shape == (1, 1):
        return abs(float(M[0, 0]))
    if M.shape == (2, 2):
        # closed form; this sits on the per-slot hot path of the gain learner
        a, b, c, d = float(M[0, 0]), float(M[0, 1]), float(M[1, 0]), float(M[1, 1])
        half_tr = 0.5 * (a + d)
        disc = half_tr * half_tr - (a * d - b * c)
        if disc >= 0.0:
            r = disc**0.5
            return max(abs(half_tr + r), abs(half_tr - r))
        return (a * d - b * c) ** 0.5
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def psd_factor(M: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == M`` for a symmetric PSD ``M``.

    Cholesky when possible; otherwise a symmetric square root with negative
    eigenvalues clipped, which is exact for singular (e.g. zero) covariances.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (M + M.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def _check_psd(name: str, M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12, rtol=0.0):
        raise ValueError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -PSD_TOL:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class Subsystem:
    """The plant seen through a subset of the sensors (rows of C and blocks of R)."""

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    rows: np.ndarray


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    N: int
    k: int
    n0: int

    def __post_init__(self):
        for name in ("A", "Q", "C", "R"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.N < 1 or self.k < 1:
            raise ValueError("N and k must be positive")
        if not 1 <= self.n0 < self.N:
            raise ValueError(f"need 1 <= n0 < N, got n0={self.n0}, N={self.N}")
        q = self.A.shape[0]
        if self.A.shape != (q, q):
            raise ValueError("A must be square")
        if self.Q.shape != (q, q):
            raise ValueError(f"Q must be {q}x{q}")
        if self.C.shape != (self.m, q):
            raise ValueError(f"C must be {self.m}x{q}, got {self.C.shape}")
        if self.R.shape != (self.m, self.m):
            raise ValueError(f"R must be {self.m}x{self.m}")
        _check_psd("Q", self.Q)
        _check_psd("R", self.R)
        if spectral_radius(self.A) >= 1.0:
            raise ValueError("A must have spectral radius < 1")
        object.__setattr__(self, "_rows_cache", {})

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        """Stacked observation dimension k*N."""
        return self.k * self.N

    def sensor_rows(self, sensors: Iterable[int]) -> np.ndarray:
        """Row indices of C/R/y owned by the given sensors, in sensor order (read-only)."""
        key = tuple(sorted(set(int(s) for s in sensors)))
        rows = self._rows_cache.get(key)
        if rows is None:
            for s in key:
                if not 0 <= s < self.N:
                    raise ValueError(f"sensor index {s} out of range for N={self.N}")
            rows = np.array([s * self.k + j for s in key for j in range(self.k)], dtype=int)
            rows.setflags(write=False)
            self._rows_cache[key] = rows
        return rows

    def row_mask(self, sensors: Iterable[int]) -> np.ndarray:
        """Boolean mask over the m observation rows selecting ``sensors``."""
        mask = np.zeros(self.m, dtype=bool)
        mask[self.sensor_rows(sensors)] = True
        return mask

    def subsystem(self, sensors: Iterable[int]) -> Subsystem:
        rows = self.sensor_rows(sensors)
        return Subsystem(
            self.A, self.Q, self.C[rows], self.R[np.ix_(rows, rows)], rows
        )

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "N": self.N,
            "k": self.k,
            "n0": self.n0,
            "A": self.A.tolist(),
            "Q": self.Q.tolist(),
            "C": self.C.tolist(),
            "R": self.R.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemModel":
        model = cls(
            A=np.array(d["A"], dtype=float),
            Q=np.array(d["Q"], dtype=float),
            C=np.array(d["C"], dtype=float),
            R=np.array(d["R"], dtype=float),
            N=int(d["N"]),
            k=int(d["k"]),
            n0=int(d["n0"]),
        )
        if "q" in d and int(d["q"]) != model.q:
            raise ValueError(f"q={d['q']} does not match A of size {model.q}")
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SystemModel":
        return cls.from_dict(json.loads(text))


def random_row_stochastic(q: int, rng: np.random.Generator) -> np.ndarray:
    """Rows uniform on the probability simplex (normalised exponential variates)."""
    E = rng.exponential(size=(q, q))
    return E / E.sum(axis=1, keepdims=True)


def generate_random_system(
    q: int,
    N: int,
    k: int,
    n0: int,
    seed: int,
    noise_scale: float = 0.1,
    a_scale: float = 0.5,
) -> SystemModel:
    """Random instance: A = a_scale * stochastic, Q^(1/2) = R^(1/2) = noise_scale * Z.

    Z has i.i.d. U[-1, 1] entries and C has i.i.d. U[0, 1] entries. The draws
    happen in the order A, Q, C, R from a single generator seeded by ``seed``.
    """
    for name, v in (("q", q), ("N", N), ("k", k), ("n0", n0)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if n0 >= N:
        raise ValueError(f"n0 must be smaller than N (n0={n0}, N={N})")
    rng = np.random.default_rng(seed)
    m = k * N
    A = a_scale * random_row_stochastic(q, rng)
    Gq = noise_scale * rng.uniform(-1.0, 1.0, size=(q, q))
    C = rng.uniform(0.0, 1.0, size=(m, q))
    Gr = noise_scale * rng.uniform(-1.0, 1.0, size=(m, m))
    return SystemModel(A=A, Q=Gq @ Gq.T, C=C, R=Gr @ Gr.T, N=N, k=k, n0=n0)


@dataclass
class StateTrajectory:
    """States x(0..T-1) and observations y(0..T-1) as (T, q) and (T, m) arrays."""

    states: np.ndarray
    observations: np.ndarray
    seed: int | None = None
    horizon: int = field(init=False)

    def __post_init__(self):
        if len(self.states) != len(self.observations):
            raise ValueError("states and observations must have equal length")
        self.horizon = len(self.states)

    def to_csv(self, path: str | Path) -> None:
        q = self.states.shape[1]
        m = self.observations.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(q)] + [f"y_{j + 1}" for j in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.horizon):
                w.writerow(
                    [t]
                    + [repr(float(v)) for v in self.states[t]]
                    + [repr(float(v)) for v in self.observations[t]]
                )


def sample_noise(
    model: SystemModel, horizon: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (w, v) for ``horizon`` slots; per slot, process noise precedes observation noise."""
    q, m = model.q, model.m
    Z = rng.standard_normal(size=(horizon, q + m))
    w = Z[:, :q] @ psd_factor(model.Q).T
    v = Z[:, q:] @ psd_factor(model.R).T
    return w, v


def simulate(
    model: SystemModel,
    horizon: int,
    seed: int | None = None,
    x0: Sequence[float] | np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> StateTrajectory:
    """Simulate ``horizon`` slots starting from x(0) = x0 (default zero)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if x0 is None:
        x = np.zeros(model.q)
    else:
        x = np.asarray(x0, dtype=float).reshape(-1)
        if x.shape != (model.q,):
            raise ValueError(f"x0 must have length {model.q}, got {x.shape[0]}")
    if rng is None:
        rng = np.random.default_rng(seed)
    w, v = sample_noise(model, horizon, rng)
    A = model.A
    states = np.empty((horizon, model.q))
    for t in range(horizon):
        states[t] = x
        x = A @ x + w[t]
    observations = states @ model.C.T + v
    return StateTrajectory(states, observations, seed)


def lyapunov_fixed_point(A, Q, tol=1e-12, max_iter=100_000) -> np.ndarray:
    """Fixed point of P -> A P A' + Q by direct iteration."""
    P = np.zeros_like(np.atleast_2d(Q), dtype=float)
    for _ in range(max_iter):
        P_next = A @ P @ A.T + Q
        if np.max(np.abs(P_next - P)) < tol:
            return 0.5 * (P_next + P_next.T)
        P = P_next
    raise RuntimeError("Lyapunov iteration did not converge")
