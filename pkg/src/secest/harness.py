"""Experiment orchestration: estimator and detector comparisons on seeded instances, with CSV/JSON reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .attack import Attacker, AttackSpec
from .detect import (
    SafeFilter,
    alarm_rate,
    chi2_statistics,
    detect_statistics,
    learn_eta,
    optimal_innovations,
    precompute_subset_covariances,
    safe_statistics,
)
from .kalman import kalman_gain, riccati_fixed_point
from .process_model import SystemModel, generate_random_system, sample_noise
from .sec import MAX_HISTORY, SecEstimator, StepSchedules

ESTIMATORS = ("SEC", "SEC_L", "KALMAN_BLIND", "GENIE", "SAFE")
DETECTORS = ("DETECT", "CHI2", "SAFE")


class ConfigError(ValueError):
    pass


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent named streams per replicate: 0 plant, 1 attack, 2 learner, 3 packet loss
    return np.random.default_rng([int(seed), stream])


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def resolve_system(d: dict | SystemModel) -> SystemModel:
    if isinstance(d, SystemModel):
        return d
    if "A" in d:
        return SystemModel.from_dict(d)
    try:
        return generate_random_system(int(d["q"]), int(d["N"]), int(d["k"]), int(d["n0"]),
                                      int(d.get("seed", 0)))
    except KeyError as exc:
        raise ConfigError(f"system config is missing {exc}") from exc


@dataclass
class ExperimentConfig:
    system: SystemModel
    attack: AttackSpec = field(default_factory=AttackSpec)
    estimators: list = field(default_factory=list)  # dicts: {"name", "label", "lambda"|"xi", "safe_set", "knowledge"}
    detectors: list = field(default_factory=list)  # dicts: {"name", "J", "safe_set"}
    horizon: int = 20_000
    burn_in: int = 1_000
    seeds: list = field(default_factory=lambda: [0])
    packet_loss: list | None = None
    delta: float | None = None
    l: float = 10.0
    alpha_grid: list = field(default_factory=lambda: [0.05])
    xi_list: list = field(default_factory=list)
    trace_stride: int = 100
    table_horizon: int = 101_000
    learn_horizon: int = 100_000
    roc_horizon: int = 50_000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.horizon <= self.burn_in:
            raise ConfigError("horizon must exceed burn_in")
        if not self.estimators and not self.detectors:
            raise ConfigError("configure at least one estimator or detector")
        try:
            self.attack.validate(self.system)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for e in self.estimators:
            if e.get("name") not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e.get('name')!r}")
            if "xi" in e and e["xi"] is not None and not e["xi"] > 1:
                raise ConfigError("xi must exceed 1 in the constrained mode")
            if e["name"] == "SAFE":
                if not e.get("safe_set"):
                    raise ConfigError("SAFE needs a non-empty safe_set")
                if self.packet_loss is not None:
                    raise ConfigError("SAFE does not support packet loss")
            if e["name"] == "SEC" and self.horizon > MAX_HISTORY:
                raise ConfigError(f"full-history SEC is capped at {MAX_HISTORY} slots")
            if e.get("knowledge", "K") not in ("K", "NK"):
                raise ConfigError("knowledge must be 'K' or 'NK'")
        for d in self.detectors:
            if d.get("name") not in DETECTORS:
                raise ConfigError(f"unknown detector {d.get('name')!r}")
            if d["name"] == "SAFE" and not d.get("safe_set"):
                raise ConfigError("SAFE needs a non-empty safe_set")
        if self.packet_loss is not None:
            p = np.asarray(self.packet_loss, dtype=float)
            if p.shape != (self.system.N,) or np.any((p < 0) | (p > 1)):
                raise ConfigError("packet_loss must list N probabilities in [0, 1]")
        if any(not 0 < a <= 1 for a in self.alpha_grid):
            raise ConfigError("alpha values must lie in (0, 1]")
        if any(not x > 1 for x in self.xi_list):
            raise ConfigError("every xi must exceed 1")

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "attack": self.attack.to_dict(),
            "estimators": self.estimators,
            "detectors": self.detectors,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "seeds": list(self.seeds),
            "packet_loss": self.packet_loss,
            "delta": self.delta,
            "l": self.l,
            "alpha_grid": list(self.alpha_grid),
            "xi_list": list(self.xi_list),
            "trace_stride": self.trace_stride,
            "table_horizon": self.table_horizon,
            "learn_horizon": self.learn_horizon,
            "roc_horizon": self.roc_horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "system" not in d:
            raise ConfigError("config needs a 'system' entry")
        try:
            kw = {k: d[k] for k in (
                "estimators", "detectors", "horizon", "burn_in", "seeds", "packet_loss", "delta",
                "l", "alpha_grid", "xi_list", "trace_stride", "table_horizon", "learn_horizon",
                "roc_horizon") if k in d}
            attack = AttackSpec.from_dict(d.get("attack", {}))
            system = resolve_system(d["system"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(system=system, attack=attack, **kw)


@dataclass
class MetricsReport:
    run_id: str
    config: dict
    mse_trace: dict = field(default_factory=dict)  # label -> (seed-index, t) running average, strided
    mse: dict = field(default_factory=dict)  # label -> per-seed post-burn-in average MSE
    lambda_trace: dict = field(default_factory=dict)  # label -> strided lambda(t) of the first seed
    trace_P: dict = field(default_factory=dict)  # label -> per-seed average trace(P_t) over the last half
    roc: dict = field(default_factory=dict)  # detector -> list of {alpha, eta, P_F, P_d}
    localization: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    wall_clock: float = 0.0

    def mse_db(self, label: str) -> list[float]:
        return [to_db(v) for v in self.mse[label]]

    def summary(self) -> dict:
        out = {"run_id": self.run_id, "wall_clock": self.wall_clock, "estimators": {}, "detectors": {}}
        for label, vals in self.mse.items():
            v = np.asarray(vals)
            out["estimators"][label] = {
                "mse": list(map(float, v)),
                "mse_db": [to_db(float(x)) for x in v],
                "mean": float(v.mean()),
                "std": float(v.std()),
            }
            if label in self.trace_P:
                out["estimators"][label]["trace_P"] = list(map(float, self.trace_P[label]))
        for name, pts in self.roc.items():
            out["detectors"][name] = pts
        if self.localization:
            out["localization"] = self.localization
        if self.sweep:
            out["sweep"] = self.sweep
        return out


# estimators


class _KalmanRows:
    """Optimal time-varying Kalman filter that uses a chosen set of observation rows each slot."""

    def __init__(self, model: SystemModel):
        self.model = model
        self.x = np.zeros(model.q)
        self.P = np.zeros((model.q, model.q))
        self._blocks = {}
        self._last = None  # (rows key, P before the update, K, P after) for reuse once P settles

    def update(self, y: np.ndarray, rows: np.ndarray) -> np.ndarray:
        m = self.model
        x_pred = m.A @ self.x
        if not len(rows):
            self.x = x_pred
            P = m.A @ self.P @ m.A.T + m.Q
            self.P = 0.5 * (P + P.T)
            self._last = None
            return self.x
        key = rows.tobytes()
        if key not in self._blocks:
            self._blocks[key] = (m.C[rows], m.R[np.ix_(rows, rows)])
        C, R = self._blocks[key]
        last = self._last
        if last is not None and last[0] == key and np.array_equal(last[1], self.P):
            K, P_next = last[2], last[3]
        else:
            P_pred = m.A @ self.P @ m.A.T + m.Q
            K = kalman_gain(P_pred, C, R)
            P = P_pred - K @ C @ P_pred
            P_next = 0.5 * (P + P.T)
            self._last = (key, self.P, K, P_next)
        self.x = x_pred + K @ (y[rows] - C @ x_pred)
        self.P = P_next
        return self.x


class _Runner:
    """One estimator together with the attacker it faces."""

    def __init__(self, spec: dict, cfg: ExperimentConfig, seed: int, P_bar_kalman: float):
        model = cfg.system
        self.name = spec["name"]
        knowledge = spec.get("knowledge", cfg.attack.knowledge)
        attack = replace(cfg.attack, knowledge=knowledge)
        # every runner gets the same attacker stream, so schedules and b draws match
        self.attacker = Attacker(attack, model, seed=_rng(seed, 1))
        self.model = model
        self.all_rows = np.arange(model.m)
        self.sec = None
        if self.name in ("SEC", "SEC_L"):
            sched = StepSchedules()
            P_bar = 0.0
            lam0 = spec.get("lambda", spec.get("lambda_fixed", 1.0))
            if spec.get("xi") is not None:
                P_bar = float(spec["xi"]) * P_bar_kalman
                lam0 = spec.get("lambda0", 1.0)
            else:
                sched = StepSchedules.fixed_lambda()
            self.sec = SecEstimator(model, mode=self.name.lower(), lam0=lam0, schedules=sched,
                                    P_bar=P_bar, l=cfg.l, delta=cfg.delta, seed=_rng(seed, 2))
        elif self.name == "SAFE":
            safe = spec["safe_set"]
            n_unsafe = model.m - len(model.sensor_rows(safe))
            eta = float(chi2.ppf(1 - spec.get("alpha", 0.05), spec.get("J", 10) * n_unsafe))
            self.safe = SafeFilter(model, safe, J=spec.get("J", 10), eta=eta)
        else:
            self.kf = _KalmanRows(model)
        self.x_hat = np.zeros(model.q)
        self.lam = []
        self.trP = []

    def step(self, y: np.ndarray, observed: np.ndarray | None) -> np.ndarray:
        current = self.attacker.begin_slot()
        y_rx = self.attacker.corrupt(y, self.x_hat)
        if self.sec is not None:
            sensors = None if observed is None else np.flatnonzero(observed).tolist()
            rec = self.sec.step(y_rx, sensors)
            self.lam.append(rec.lam)
            self.trP.append(rec.trace_P)
            self.x_hat = rec.x_hat
        elif self.name == "SAFE":
            _, _, self.x_hat = self.safe.step(y_rx)
        else:
            m = self.model
            use = np.ones(m.N, dtype=bool) if observed is None else observed.copy()
            if self.name == "GENIE":
                use[list(current)] = False
            rows = self.all_rows if use.all() else m.sensor_rows(np.flatnonzero(use))
            self.x_hat = self.kf.update(y_rx, rows)
        return self.x_hat


def _label(spec: dict, cfg: ExperimentConfig) -> str:
    if "label" in spec:
        return spec["label"]
    lab = spec["name"]
    if spec.get("xi") is not None:
        lab += f"(xi={spec['xi']:g})"
    if cfg.attack.mode != "none":
        lab += "-" + spec.get("knowledge", cfg.attack.knowledge)
    return lab


def _run_id(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def run_estimation_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Run every configured estimator on each replicate seed and collect MSE metrics.

    Per seed the plant trajectory, attack schedule and packet-loss pattern are
    shared by all estimators; in K mode each estimator faces an attacker that
    references its own previous estimate.
    """
    t_start = time.perf_counter()
    model = cfg.system
    ss = riccati_fixed_point(model)
    P_bar_kalman = float(np.trace(ss.P_filt))
    labels = [_label(e, cfg) for e in cfg.estimators]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"estimator labels must be unique, got {labels}")
    report = MetricsReport(_run_id(cfg), cfg.to_dict())
    H, burn = cfg.horizon, cfg.burn_in
    stride = max(1, cfg.trace_stride)
    for lab in labels:
        report.mse[lab] = []
        report.mse_trace[lab] = []
    for si, seed in enumerate(cfg.seeds):
        w, v = sample_noise(model, H, _rng(seed, 0))
        X = np.empty((H, model.q))
        x = np.zeros(model.q)
        for t in range(H):
            X[t] = x
            x = model.A @ x + w[t]
        Y = X @ model.C.T + v
        observed = None
        if cfg.packet_loss is not None:
            p = np.asarray(cfg.packet_loss, dtype=float)
            observed = _rng(seed, 3).random((H, model.N)) >= p
        runners = [_Runner(e, cfg, seed, P_bar_kalman) for e in cfg.estimators]
        err = np.empty((len(runners), H))
        for t in range(H):
            obs_t = None if observed is None else observed[t]
            for i, r in enumerate(runners):
                d = X[t] - r.step(Y[t], obs_t)
                err[i, t] = d @ d
        running = np.cumsum(err, axis=1) / np.arange(1, H + 1)
        for i, (lab, r) in enumerate(zip(labels, runners)):
            report.mse[lab].append(float(err[i, burn:].mean()))
            report.mse_trace[lab].append(running[i, ::stride])
            if r.sec is not None:
                trP = np.asarray(r.trP)
                report.trace_P.setdefault(lab, []).append(float(trP[H // 2 :].mean()))
                if si == 0:
                    report.lambda_trace[lab] = np.asarray(r.lam)
    report.wall_clock = time.perf_counter() - t_start
    return report


def run_constrained_sweep(cfg: ExperimentConfig, xi_list: Sequence[float] | None = None) -> MetricsReport:
    """Two-timescale SEC-L for each xi with P_bar = xi * (limiting MSE of the attack-free Kalman filter)."""
    xi_list = list(xi_list if xi_list is not None else cfg.xi_list)
    if not xi_list or any(not x > 1 for x in xi_list):
        raise ConfigError("xi_list must be non-empty with every xi > 1")
    P_bar_kalman = float(np.trace(riccati_fixed_point(cfg.system).P_filt))
    ests = [{"name": "SEC_L", "xi": float(x), "label": f"SEC_L(xi={x:g})"} for x in xi_list]
    sub = ExperimentConfig(**{**_cfg_kwargs(cfg), "estimators": ests, "detectors": []})
    report = run_estimation_experiment(sub)
    for x, e in zip(xi_list, ests):
        lab = e["label"]
        report.sweep.append({
            "xi": float(x),
            "P_bar": float(x) * P_bar_kalman,
            "mse": float(np.mean(report.mse[lab])),
            "lambda_final": float(report.lambda_trace[lab][-1]),
            "trace_P": float(np.mean(report.trace_P[lab])),
        })
    return report


def _cfg_kwargs(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def attacked_stream(cfg: ExperimentConfig, seed: int, horizon: int):
    """Plant trajectory and the stream the fusion center receives under cfg.attack.

    In K mode the attacker references the fusion center's steady-gain Kalman
    estimate built from the received stream.
    """
    model = cfg.system
    ss = riccati_fixed_point(model)
    w, v = sample_noise(model, horizon, _rng(seed, 0))
    attacker = Attacker(cfg.attack, model, seed=_rng(seed, 1))
    A, C, K = model.A, model.C, ss.K_ss
    x = np.zeros(model.q)
    x_hat = np.zeros(model.q)
    X = np.empty((horizon, model.q))
    Y = np.empty((horizon, model.m))
    sets = []
    for t in range(horizon):
        X[t] = x
        y = C @ x + v[t]
        sets.append(attacker.begin_slot())
        Y[t] = attacker.corrupt(y, x_hat)
        x_hat = A @ x_hat + K @ (Y[t] - C @ (A @ x_hat))
        x = A @ x + w[t]
    return X, Y, sets


def clean_stream(model: SystemModel, seed: int, stream: int, horizon: int) -> np.ndarray:
    w, v = sample_noise(model, horizon, _rng(seed, stream))
    X = np.empty((horizon, model.q))
    x = np.zeros(model.q)
    for t in range(horizon):
        X[t] = x
        x = model.A @ x + w[t]
    return X @ model.C.T + v


def detector_statistics(cfg: ExperimentConfig, det: dict, Y: np.ndarray, table=None, Sigma_z=None):
    J = int(det.get("J", 10))
    name = det["name"]
    if name == "DETECT":
        return detect_statistics(cfg.system, table, Y, J)
    if name == "CHI2":
        return chi2_statistics(optimal_innovations(cfg.system, Y), Sigma_z, J), None
    return safe_statistics(cfg.system, det["safe_set"], Y, J), None


def run_roc(cfg: ExperimentConfig, alpha_grid: Sequence[float] | None = None) -> MetricsReport:
    """Per detector and alpha: LEARN-tuned eta, validation P_F and attacked-stream P_d.

    Streams per seed: 10 tuning, 11 validation, and the attacked stream on the
    plant/attack streams 0 and 1. Rates count triggering slots after burn_in.
    """
    t_start = time.perf_counter()
    alpha_grid = list(alpha_grid if alpha_grid is not None else cfg.alpha_grid)
    if cfg.attack.mode == "none":
        raise ConfigError("ROC needs an attack")
    if not cfg.detectors:
        raise ConfigError("ROC needs at least one detector")
    model = cfg.system
    report = MetricsReport(_run_id(cfg), cfg.to_dict())
    Sigma_z = riccati_fixed_point(model).Sigma_z
    burn = cfg.burn_in
    for seed in cfg.seeds:
        table = None
        if any(d["name"] == "DETECT" for d in cfg.detectors):
            table = precompute_subset_covariances(model, horizon=cfg.table_horizon, seed=int(_rng(seed, 9).integers(2**31)))
        Y_tune = clean_stream(model, seed, 10, cfg.learn_horizon)
        Y_val = clean_stream(model, seed, 11, cfg.roc_horizon)
        _, Y_att, sets = attacked_stream(cfg, seed, cfg.roc_horizon)
        for det in cfg.detectors:
            label = det.get("label", det["name"])
            s_tune, _ = detector_statistics(cfg, det, Y_tune, table, Sigma_z)
            s_val, _ = detector_statistics(cfg, det, Y_val, table, Sigma_z)
            s_att, loc = detector_statistics(cfg, det, Y_att, table, Sigma_z)
            pts = report.roc.setdefault(label, [])
            for alpha in alpha_grid:
                eta = learn_eta(s_tune[burn:], alpha).eta
                pts.append({
                    "seed": int(seed),
                    "alpha": float(alpha),
                    "eta": float(eta),
                    "P_F": alarm_rate(s_val[burn:], eta),
                    "P_d": alarm_rate(s_att[burn:], eta),
                })
                if loc is not None:
                    alarms = s_att[burn:] > eta
                    truth = np.array([table.subsets.index(tuple(S)) if len(S) == model.n0 else -1
                                      for S in sets[burn:]])
                    hit = (loc[burn:] == truth)[alarms]
                    report.localization.setdefault(label, []).append(
                        {"seed": int(seed), "alpha": float(alpha),
                         "accuracy": float(hit.mean()) if hit.size else float("nan")})
    report.wall_clock = time.perf_counter() - t_start
    return report


# reporting


def _fmt(v) -> str:
    return repr(float(v))


def export_report(report: MetricsReport, path_prefix: str | Path) -> list[Path]:
    """Write <prefix>metrics.csv, <prefix>config.json and <prefix>summary.json."""
    prefix = str(path_prefix)
    paths = [Path(prefix + "metrics.csv"), Path(prefix + "config.json"), Path(prefix + "summary.json")]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["run_id", "estimator_or_detector", "metric", "t_or_alpha", "value"])
    stride = int(report.config.get("trace_stride", 1)) or 1
    for lab in sorted(report.mse):
        for si, val in enumerate(report.mse[lab]):
            wr.writerow([report.run_id, lab, f"mse_seed{si}", "", _fmt(val)])
            wr.writerow([report.run_id, lab, f"mse_db_seed{si}", "", _fmt(to_db(val))])
        for si, tr in enumerate(report.mse_trace.get(lab, [])):
            for j, val in enumerate(tr):
                wr.writerow([report.run_id, lab, f"running_mse_seed{si}", j * stride + 1, _fmt(val)])
    for lab in sorted(report.lambda_trace):
        for t, val in enumerate(report.lambda_trace[lab][::stride]):
            wr.writerow([report.run_id, lab, "lambda", t * stride + 1, _fmt(val)])
    for lab in sorted(report.roc):
        for pt in report.roc[lab]:
            for key in ("eta", "P_F", "P_d"):
                wr.writerow([report.run_id, lab, f"{key}_seed{pt['seed']}", _fmt(pt["alpha"]), _fmt(pt[key])])
    for row in report.sweep:
        for key in ("mse", "lambda_final", "trace_P"):
            wr.writerow([report.run_id, "SEC_L", key, _fmt(row["xi"]), _fmt(row[key])])
    try:
        for p in paths:
            p.parent.mkdir(parents=True, exist_ok=True)
        paths[0].write_text(buf.getvalue())
        paths[1].write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
        paths[2].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"could not write report under {prefix!r}: {exc}") from exc
    return paths
