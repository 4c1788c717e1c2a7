"""SEC / SEC-L: a Kalman-like filter whose gain is learned online by SPSA.

Each slot the gain K is perturbed to K +/- d(t) Delta, every size-n0 sensor
subset B produces an estimate from its own columns of the perturbed gain and
another from the complementary columns, and the worst subset disagreement
plus lambda * trace(P) is the cost whose two-sided difference drives the
gain update. lambda itself follows a slower projected ascent on the
covariance constraint trace(P) <= P_bar.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kalman import error_cov_step, riccati_fixed_point
from .process_model import SystemModel, spectral_radius

Schedule = Callable[[int], float]

MAX_HISTORY = 2000


def _sched_a(t):
    return 1.0 / (2.0 * t)


def _sched_b(t):
    return 1.0 / (t * (1.0 + math.log(t)))


def _sched_d(t):
    return 0.1 / t**0.1


def _zero(t):
    return 0.0


def series_diverges(f: Schedule, horizon: int = 10**6) -> bool:
    """Numerical proxy for sum f(t) = inf: the last decade still carries >= 1% of the first ten terms."""
    head = sum(f(t) for t in range(1, 11))
    t = np.arange(horizon // 10, horizon + 1)
    tail = float(sum(f(int(s)) for s in t[:: max(1, len(t) // 20000)])) * max(1, len(t) // 20000)
    return head > 0 and tail >= 0.01 * head


def series_converges(f: Schedule, horizon: int = 10**6) -> bool:
    return not series_diverges(f, horizon)


@dataclass(frozen=True)
class StepSchedules:
    """Step sizes a(t) (gain), b(t) (multiplier) and perturbation size d(t); t >= 1."""

    a: Schedule = _sched_a
    b: Schedule = _sched_b
    d: Schedule = _sched_d

    @classmethod
    def fixed_lambda(cls, a: Schedule = _sched_a, d: Schedule = _sched_d) -> "StepSchedules":
        return cls(a=a, b=_zero, d=d)

    @property
    def lambda_fixed(self) -> bool:
        return self.b is _zero

    def validate(self, horizon: int = 10**6) -> None:
        """Check the step-size conditions numerically; raises ValueError on failure."""
        a, b, d = self.a, self.b, self.d
        if any(a(t) <= 0 or d(t) <= 0 or b(t) < 0 for t in (1, 10, 1000, horizon)):
            raise ValueError("a and d must be positive and b nonnegative")
        if not series_diverges(a, horizon):
            raise ValueError("sum a(t) must diverge")
        if not series_converges(lambda t: a(t) ** 2, horizon):
            raise ValueError("sum a(t)^2 must converge")
        if d(horizon) >= d(1) * 0.5:
            raise ValueError("d(t) must decay to 0")
        ratios = [a(t) ** 2 / d(t) ** 2 for t in (10, 1000, horizon)]
        if ratios[-1] > 10 * max(ratios[0], 1e-12):
            raise ValueError("a(t)^2 / d(t)^2 must stay bounded")
        if not self.lambda_fixed:
            if not series_diverges(b, horizon):
                raise ValueError("sum b(t) must diverge")
            if not series_converges(lambda t: b(t) ** 2, horizon):
                raise ValueError("sum b(t)^2 must converge")
            if b(horizon) / a(horizon) >= b(10) / a(10):
                raise ValueError("b(t)/a(t) must decrease to 0")


def subset_list(N: int, n0: int) -> list[tuple[int, ...]]:
    """All size-n0 subsets of range(N) in lexicographic order."""
    return list(itertools.combinations(range(N), n0))


def subset_signs(model: SystemModel, subsets) -> np.ndarray:
    """(n_subsets, m) array: +1 on rows of B, -1 on rows of its complement."""
    S = -np.ones((len(subsets), model.m))
    for i, B in enumerate(subsets):
        S[i, model.sensor_rows(B)] = 1.0
    return S


@dataclass
class ProxyEstimates:
    """Subset estimates for the perturbed gains, each of shape (n_subsets, q)."""

    subsets: list
    plus_B: np.ndarray
    plus_Bc: np.ndarray
    minus_B: np.ndarray
    minus_Bc: np.ndarray


def perturb(K: np.ndarray, d_t: float, rng: np.random.Generator):
    """Two-sided simultaneous perturbation with Rademacher directions."""
    Delta = rng.integers(0, 2, size=K.shape) * 2.0 - 1.0
    return K + d_t * Delta, K - d_t * Delta, Delta


def subset_anomaly_cost(est_B: np.ndarray, est_Bc: np.ndarray, subsets: Sequence) -> tuple[float, tuple]:
    """max_B ||x_B - x_Bc||^2 and the maximising subset (first one on ties)."""
    if len(est_B) != len(subsets) or len(est_Bc) != len(subsets):
        raise ValueError("need one estimate pair per subset")
    diff = np.asarray(est_B) - np.asarray(est_Bc)
    vals = np.einsum("ij,ij->i", diff, diff)
    i = int(np.argmax(vals))
    return float(vals[i]), tuple(subsets[i])


def _masked_proxies(x_prev, y, K, model, subsets, observed_mask=None):
    A, C = model.A, model.C
    x_pred = A @ x_prev
    z = y - C @ x_pred
    if observed_mask is not None:
        z = z * observed_mask
    out_B = np.empty((len(subsets), model.q))
    out_Bc = np.empty((len(subsets), model.q))
    for i, B in enumerate(subsets):
        mask = model.row_mask(B)
        out_B[i] = x_pred + K @ (z * mask)
        out_Bc[i] = x_pred + K @ (z * ~mask)
    return out_B, out_Bc


def sec_l_proxies(x_hat_prev, y, K_plus, K_minus, model, subsets=None, observed_mask=None) -> ProxyEstimates:
    """One-step proxies A x(t-1) + K_B (y - C A x(t-1)) from the common previous estimate."""
    if subsets is None:
        subsets = subset_list(model.N, model.n0)
    pB, pBc = _masked_proxies(x_hat_prev, y, K_plus, model, subsets, observed_mask)
    mB, mBc = _masked_proxies(x_hat_prev, y, K_minus, model, subsets, observed_mask)
    return ProxyEstimates(list(subsets), pB, pBc, mB, mBc)


def sec_full_history_proxies(
    observations, K_plus, K_minus, model, subsets=None, x0=None, max_history: int = MAX_HISTORY
) -> ProxyEstimates:
    """Replay the constant-gain recursion over y(1..t) for every subset and sign."""
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    if len(Y) > max_history:
        raise ValueError(f"history of {len(Y)} slots exceeds the cap of {max_history}")
    if subsets is None:
        subsets = subset_list(model.N, model.n0)
    A, C = model.A, model.C
    x0 = np.zeros(model.q) if x0 is None else np.asarray(x0, dtype=float)
    signs = subset_signs(model, subsets)
    out = []
    for K in (K_plus, K_minus):
        # (2 * n_subsets, q, m) gains: rows of B first, then complements
        masks = np.concatenate([signs > 0, signs < 0])
        G = K[None, :, :] * masks[:, None, :]
        x = np.tile(x0, (len(masks), 1))
        for y in Y:
            x_pred = x @ A.T
            x = x_pred + np.einsum("fqm,fm->fq", G, y - x_pred @ C.T)
        out.append((x[: len(subsets)], x[len(subsets) :]))
    return ProxyEstimates(list(subsets), out[0][0], out[0][1], out[1][0], out[1][1])


def default_delta(K: np.ndarray, C: np.ndarray, cap: float = 0.05) -> float:
    """0.05, shrunk to half the stability margin of K when K itself sits closer to the boundary."""
    margin = 1.0 - spectral_radius(np.eye(K.shape[0]) - K @ C)
    if margin <= 0:
        raise ValueError("gain does not stabilise I - K C")
    return min(cap, 0.5 * margin)


def project_gain(K_tilde, K_prev, C, delta: float, n_bisect: int = 50) -> np.ndarray:
    """Pull K_tilde back along the segment to the feasible K_prev until rho(I - K C) <= 1 - delta."""
    I = np.eye(K_tilde.shape[0])
    limit = 1.0 - delta
    if spectral_radius(I - K_tilde @ C) <= limit:
        return K_tilde
    if spectral_radius(I - K_prev @ C) > limit + 1e-12:
        raise ValueError("previous gain is infeasible; cannot project")
    lo, hi = 0.0, 1.0  # lo is always feasible
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if spectral_radius(I - (mid * K_tilde + (1 - mid) * K_prev) @ C) <= limit:
            lo = mid
        else:
            hi = mid
    return lo * K_tilde + (1 - lo) * K_prev


def spsa_gradient(c_plus: float, c_minus: float, d_t: float, Delta: np.ndarray) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient estimate; Delta entries are +/-1."""
    return (c_plus - c_minus) / (2.0 * d_t) / Delta


def spsa_update(
    K, c_plus, c_minus, a_t, d_t, Delta, l, delta_spectral, model, columns=None
) -> np.ndarray:
    """Clamped SPSA step on K followed by projection onto the spectral feasible set.

    ``columns`` (boolean over the m columns) restricts the update; other
    columns keep their current value.
    """
    step = a_t * spsa_gradient(c_plus, c_minus, d_t, Delta)
    if columns is not None:
        step = step * columns
    K_tilde = np.clip(K - step, -l, l)
    return project_gain(K_tilde, K, model.C, delta_spectral)


def lambda_update(lam, trace_P, P_bar, b_t, l) -> float:
    return float(min(max(lam + b_t * (trace_P - P_bar), 0.0), l))


@dataclass
class SecState:
    K: np.ndarray
    lam: float
    P: np.ndarray
    x_hat: np.ndarray
    l: float = 10.0
    delta_spectral: float = 0.05
    P_bar: float = 0.0
    t: int = 0
    nu: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # received observations, full-history SEC only
    proxies: ProxyEstimates | None = None
    delta: np.ndarray | None = None


@dataclass
class SlotRecord:
    t: int
    x_hat: np.ndarray
    trace_P: float
    lam: float
    anomaly_max: float
    argmax_subset: tuple
    spectral_radius: float


SLOT_COLUMNS = ("t", "mse_instant", "trace_P", "lambda", "anomaly_max", "argmax_subset", "spectral_radius")


def write_slot_records(records: Sequence[SlotRecord], path, states=None) -> None:
    """Per-slot CSV; mse_instant needs the true states and is left blank without them."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SLOT_COLUMNS)
        for i, r in enumerate(records):
            mse = "" if states is None else repr(float(np.sum((np.asarray(states[i]) - r.x_hat) ** 2)))
            w.writerow([r.t, mse, repr(r.trace_P), repr(r.lam), repr(r.anomaly_max),
                        " ".join(map(str, r.argmax_subset)), repr(r.spectral_radius)])


class SecEstimator:
    """SEC (``mode="sec"``) or SEC-L (``mode="sec_l"``) over a stream of received observations.

    Defaults start from the steady Kalman gain with P at the steady filtered
    covariance, so a zero gain step size reproduces the fixed-gain Kalman
    filter exactly.
    """

    def __init__(
        self,
        model: SystemModel,
        mode: str = "sec_l",
        lam0: float = 1.0,
        schedules: StepSchedules | None = None,
        P_bar: float = 0.0,
        l: float = 10.0,
        delta: float | None = None,
        seed=None,
        K0=None,
        P0=None,
        x0=None,
        max_history: int = MAX_HISTORY,
    ):
        if mode not in ("sec", "sec_l"):
            raise ValueError("mode must be 'sec' or 'sec_l'")
        self.model = model
        self.mode = mode
        self.schedules = schedules or StepSchedules()
        self.rng = np.random.default_rng(seed)
        self.max_history = max_history
        self.subsets = subset_list(model.N, model.n0)
        self.signs = subset_signs(model, self.subsets)
        self._I = np.eye(model.q)
        ss = None
        if K0 is None or P0 is None:
            ss = riccati_fixed_point(model)
        K = np.array(ss.K_ss if K0 is None else K0, dtype=float)
        if delta is None:
            delta = default_delta(K, model.C)
        if spectral_radius(np.eye(model.q) - K @ model.C) > 1.0 - delta + 1e-12:
            raise ValueError("initial gain violates the spectral-radius constraint")
        if not 0.0 <= lam0 <= l:
            raise ValueError("lambda(0) must lie in [0, l]")
        self.state = SecState(
            K=K,
            lam=float(lam0),
            P=np.array(ss.P_filt if P0 is None else P0, dtype=float),
            x_hat=np.zeros(model.q) if x0 is None else np.array(x0, dtype=float),
            l=l,
            delta_spectral=delta,
            P_bar=P_bar,
        )

    def _anomalies(self, x_prev, y, Kp, Km, obs_mask):
        st = self.state
        if self.mode == "sec":
            st.history.append(y * obs_mask if obs_mask is not None else y)
            prox = sec_full_history_proxies(
                st.history, Kp, Km, self.model, self.subsets, max_history=self.max_history
            )
            st.proxies = prox
            cp, Bp = subset_anomaly_cost(prox.plus_B, prox.plus_Bc, self.subsets)
            cm, _ = subset_anomaly_cost(prox.minus_B, prox.minus_Bc, self.subsets)
            return cp, cm, Bp
        # x_B - x_Bc = K (s_B * z) for SEC-L, so only the signed innovation is needed
        A, C = self.model.A, self.model.C
        z = y - C @ (A @ x_prev)
        if obs_mask is not None:
            z = z * obs_mask
        Z = self.signs * z  # (n_sub, m)
        Dp = Z @ Kp.T
        Dm = Z @ Km.T
        vp = np.einsum("ij,ij->i", Dp, Dp)
        vm = np.einsum("ij,ij->i", Dm, Dm)
        i = int(np.argmax(vp))
        return float(vp[i]), float(vm.max()), self.subsets[i]

    def step(self, y: np.ndarray, observed: Sequence[int] | None = None) -> SlotRecord:
        """Run one slot on the received observation ``y``.

        ``observed`` lists the sensors whose packets arrived (default: all).
        """
        st = self.state
        model = self.model
        A, C = model.A, model.C
        st.t += 1
        t = st.t
        x_prev = st.x_hat
        if observed is None:
            obs_mask = None
            key = None
        else:
            key = tuple(sorted(observed))
            if not key:
                # nothing arrived: pure prediction, gain and multiplier frozen
                st.x_hat = A @ x_prev
                st.P = error_cov_step(st.P, np.zeros_like(st.K), model)
                return SlotRecord(t, st.x_hat, float(np.trace(st.P)), st.lam, float("nan"), (),
                                  spectral_radius(np.eye(model.q) - st.K @ C))
            obs_mask = model.row_mask(key)
            if len(key) == model.N:
                obs_mask = None
        y = np.asarray(y, dtype=float)
        K_eff = st.K if obs_mask is None else st.K * obs_mask
        x_pred = A @ x_prev
        z = y - C @ x_pred
        if obs_mask is not None:
            z = z * obs_mask
        st.x_hat = x_pred + K_eff @ z

        d_t = self.schedules.d(t)
        Kp, Km, Delta = perturb(st.K, d_t, self.rng)
        st.delta = Delta
        if obs_mask is not None:
            Kp_eff, Km_eff = Kp * obs_mask, Km * obs_mask
        else:
            Kp_eff, Km_eff = Kp, Km
        an_p, an_m, argmax_B = self._anomalies(x_prev, y, Kp_eff, Km_eff, obs_mask)

        # P_t, P_t^+ and P_t^- in one batched evaluation of the fixed-gain recursion
        P_pred = A @ st.P @ A.T + model.Q
        I = self._I
        Ks = np.stack([K_eff, Kp_eff, Km_eff])
        IKC = I - Ks @ C
        Ps = IKC @ P_pred @ IKC.transpose(0, 2, 1) + Ks @ model.R @ Ks.transpose(0, 2, 1)
        traces = np.einsum("kii->k", Ps)
        P_new = 0.5 * (Ps[0] + Ps[0].T)
        c_plus = an_p + st.lam * float(traces[1])
        c_minus = an_m + st.lam * float(traces[2])

        if key is None:
            a_t = self.schedules.a(t)
        else:
            st.nu[key] = st.nu.get(key, 0) + 1
            a_t = self.schedules.a(st.nu[key])
        st.K = spsa_update(st.K, c_plus, c_minus, a_t, d_t, Delta, st.l, st.delta_spectral,
                           model, columns=obs_mask)
        st.P = P_new
        trace_P = float(traces[0])
        st.lam = lambda_update(st.lam, trace_P, st.P_bar, self.schedules.b(t), st.l)
        return SlotRecord(t, st.x_hat, trace_P, st.lam, an_p, argmax_B,
                          spectral_radius(I - st.K @ C))
