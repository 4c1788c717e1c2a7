"""False-data-injection attacks on the sensor reports.

The attacker rewrites the innovation of the compromised sensors about a
reference prediction ``C A x_ref``: ``z~ = T z + b``.  With ``T = -I`` and
``b = 0`` this is the sign-flip attack ``y~ = y + 2 C_a A x_ref - 2 y_a``.
Benign rows are passed through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kalman import FilterState, kf_step
from .process_model import SystemModel

MODES = ("none", "static", "switching")
KNOWLEDGE = ("K", "NK")


@dataclass(frozen=True)
class AttackSpec:
    mode: str = "none"
    attacked_set: tuple[int, ...] = ()
    T_switch: int = 20
    knowledge: str = "K"
    Tmat: np.ndarray | None = None  # None means -I
    Sigma_b: np.ndarray | None = None  # None means 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.knowledge not in KNOWLEDGE:
            raise ValueError(f"knowledge must be one of {KNOWLEDGE}")
        if self.T_switch < 1:
            raise ValueError("T_switch must be >= 1")
        object.__setattr__(self, "attacked_set", tuple(sorted(int(i) for i in self.attacked_set)))
        if self.mode == "static" and not self.attacked_set:
            raise ValueError("static attack needs a non-empty attacked_set")
        for name in ("Tmat", "Sigma_b"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_2d(np.asarray(v, dtype=float)))
        if self.Sigma_b is not None and np.linalg.eigvalsh(self.Sigma_b).min() < -1e-9:
            raise ValueError("Sigma_b must be positive semidefinite")

    def validate(self, model: SystemModel) -> None:
        m = model.m
        if len(self.attacked_set) > model.n0:
            raise ValueError(
                f"attacked set {self.attacked_set} exceeds n0={model.n0}"
            )
        if any(not 0 <= i < model.N for i in self.attacked_set):
            raise ValueError("attacked sensor index out of range")
        for name in ("Tmat", "Sigma_b"):
            v = getattr(self, name)
            if v is not None and v.shape != (m, m):
                raise ValueError(f"{name} must be {m}x{m}")

    def transform(self, m: int) -> np.ndarray:
        return -np.eye(m) if self.Tmat is None else self.Tmat

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "attacked_set": list(self.attacked_set),
            "T_switch": self.T_switch,
            "knowledge": self.knowledge,
            "Tmat": None if self.Tmat is None else self.Tmat.tolist(),
            "Sigma_b": None if self.Sigma_b is None else self.Sigma_b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(
            mode=d.get("mode", "none"),
            attacked_set=tuple(d.get("attacked_set", ())),
            T_switch=int(d.get("T_switch", 20)),
            knowledge=d.get("knowledge", "K"),
            Tmat=d.get("Tmat"),
            Sigma_b=d.get("Sigma_b"),
        )


def transform_innovation(
    z: np.ndarray, spec: AttackSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """z~ = T z + b with b ~ N(0, Sigma_b); Sigma_b = 0 consumes no randomness."""
    z = np.asarray(z, dtype=float)
    zt = spec.transform(z.shape[0]) @ z
    if spec.Sigma_b is not None and np.any(spec.Sigma_b):
        if rng is None:
            raise ValueError("a generator is needed to draw b when Sigma_b != 0")
        zt = zt + rng.multivariate_normal(np.zeros(z.shape[0]), spec.Sigma_b, method="eigh")
    return zt


def stealth_transform(Sigma_z: np.ndarray, rows) -> np.ndarray:
    """Covariance-preserving sign flip confined to ``rows``.

    The attacked block is reflected about its conditional mean given the
    benign block, z~_a = 2 E[z_a | z_b] - z_a, so T Sigma_z T' = Sigma_z while
    benign rows pass through. With every row attacked this is T = -I.
    """
    Sigma_z = np.asarray(Sigma_z, dtype=float)
    m = Sigma_z.shape[0]
    a = np.zeros(m, dtype=bool)
    a[np.asarray(rows, dtype=int)] = True
    b = ~a
    T = np.eye(m)
    T[np.ix_(a, a)] = -np.eye(int(a.sum()))
    if b.any():
        gain = np.linalg.solve(Sigma_z[np.ix_(b, b)], Sigma_z[np.ix_(b, a)]).T
        T[np.ix_(a, b)] = 2.0 * gain
    return T


def corrupt_observation(
    y: np.ndarray,
    x_hat_ref: np.ndarray,
    model: SystemModel,
    spec: AttackSpec,
    attacked_set: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Received observation when ``attacked_set`` rewrites its innovation about ``x_hat_ref``."""
    y = np.asarray(y, dtype=float)
    if spec.mode == "none":
        return y
    if attacked_set is None:
        attacked_set = spec.attacked_set
    if len(attacked_set) > model.n0:
        raise ValueError(f"attacked set {tuple(attacked_set)} exceeds n0={model.n0}")
    if len(attacked_set) == 0:
        return y
    y_pred = model.C @ (model.A @ x_hat_ref)
    z_tilde = transform_innovation(y - y_pred, spec, rng)
    rows = model.sensor_rows(attacked_set)
    out = y.copy()
    out[rows] = y_pred[rows] + z_tilde[rows]
    return out


def sensor_weights(N: int) -> np.ndarray:
    """Attack propensity of sensor i (1-based) proportional to 1/i^2, normalised."""
    w = 1.0 / np.arange(1, N + 1) ** 2
    return w / w.sum()


def draw_weighted_subset(N: int, size: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Sequential weighted draws without replacement, renormalising after each draw."""
    w = 1.0 / np.arange(1, N + 1) ** 2
    chosen = []
    for _ in range(size):
        p = w / w.sum()
        i = int(rng.choice(N, p=p))
        chosen.append(i)
        w = w.copy()
        w[i] = 0.0
    return tuple(sorted(chosen))


@dataclass
class AttackerState:
    current_set: tuple[int, ...] = ()
    proxy_filter: FilterState | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    draws: list = field(default_factory=list)  # (t, subset) at every schedule draw


def advance_schedule(
    state: AttackerState, t: int, spec: AttackSpec, model: SystemModel
) -> tuple[int, ...]:
    """Attacked subset for slot ``t`` (1-based); switching draws happen at t = 1, T+1, 2T+1, ..."""
    if spec.mode == "none":
        state.current_set = ()
    elif spec.mode == "static":
        state.current_set = spec.attacked_set
    elif (t - 1) % spec.T_switch == 0:
        state.current_set = draw_weighted_subset(model.N, model.n0, state.rng)
        state.draws.append((t, state.current_set))
    return state.current_set


class Attacker:
    """Drives an :class:`AttackSpec` slot by slot.

    In K mode the caller supplies the estimator's previous estimate as the
    reference. In NK mode the attacker runs its own optimal Kalman filter on
    the received (corrupted) observations and uses it as the reference.
    """

    def __init__(self, spec: AttackSpec, model: SystemModel, seed=None, P0=None, x0=None):
        spec.validate(model)
        self.spec = spec
        self.model = model
        self.rng = np.random.default_rng(seed)
        proxy = None
        if spec.knowledge == "NK":
            q = model.q
            proxy = FilterState(
                np.zeros(q) if x0 is None else np.asarray(x0, dtype=float),
                np.zeros((q, q)) if P0 is None else np.asarray(P0, dtype=float),
            )
        self.state = AttackerState(proxy_filter=proxy, rng=self.rng)
        self.t = 0

    def begin_slot(self) -> tuple[int, ...]:
        self.t += 1
        return advance_schedule(self.state, self.t, self.spec, self.model)

    def reference(self, x_hat_prev: np.ndarray | None) -> np.ndarray:
        if self.spec.knowledge == "NK":
            return self.state.proxy_filter.x_hat
        if x_hat_prev is None:
            raise ValueError("K-mode attacker needs the estimator's previous estimate")
        return x_hat_prev

    def corrupt(self, y: np.ndarray, x_hat_prev: np.ndarray | None = None) -> np.ndarray:
        """Corrupt the slot's observation; call :meth:`begin_slot` first."""
        if self.spec.mode == "none":
            y_rx = np.asarray(y, dtype=float)
        else:
            ref = self.reference(x_hat_prev)
            y_rx = corrupt_observation(
                y, ref, self.model, self.spec, self.state.current_set, self.rng
            )
        if self.state.proxy_filter is not None:
            self.state.proxy_filter, _ = kf_step(self.state.proxy_filter, self.model, y_rx)
        return y_rx
