"""Target motion prediction from an observation buffer.

A per-axis polynomial is fitted over a sliding window by ridge-regularized
least squares (the ridge acts on non-constant coefficients only). Forecast
speed is capped: once the fitted velocity would exceed the bound, the track
continues at the bound along the last direction (constant-velocity tail).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import TargetTrack


@dataclass
class TargetObservation:
    t: float
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class PredictionModel:
    degree: int
    coeffs: np.ndarray = field(repr=False)   # (degree+1, 3), power basis in (t - t_ref)
    t_ref: float
    window: tuple[float, float]
    horizon: float
    v_max: float
    residual_rms: float = 0.0

    def position(self, t: float) -> np.ndarray:
        s = t - self.t_ref
        powers = s ** np.arange(self.degree + 1)
        return powers @ self.coeffs

    def velocity(self, t: float) -> np.ndarray:
        s = t - self.t_ref
        k = np.arange(1, self.degree + 1)
        powers = k * s ** (k - 1)
        return powers @ self.coeffs[1:]


class HistoryBuffer:
    """Single-writer observation buffer with a bounded time span."""

    def __init__(self, span: float = 4.0):
        self.span = span
        self._obs: list[TargetObservation] = []

    def push(self, t: float, position) -> None:
        if self._obs and t <= self._obs[-1].t:
            raise ValueError("observation timestamps must be strictly increasing")
        self._obs.append(TargetObservation(float(t), position))
        cutoff = t - self.span
        while self._obs and self._obs[0].t < cutoff:
            self._obs.pop(0)

    def snapshot(self) -> list[TargetObservation]:
        return list(self._obs)

    def __len__(self):
        return len(self._obs)


def fit(history: list[TargetObservation], degree: int = 3,
        ridge: float = 1e-4, window: float = 2.0, horizon: float = 3.0,
        v_max: float = 2.5) -> PredictionModel:
    """Fit the prediction polynomial to the trailing `window` seconds."""
    if not history:
        raise ValueError("empty observation history")
    t_last = history[-1].t
    obs = [o for o in history if o.t >= t_last - window]
    times = np.array([o.t for o in obs])
    pts = np.stack([o.position for o in obs])

    if len(obs) == 1:
        coeffs = pts[:1].copy()
        return PredictionModel(0, coeffs, t_last, (times[0], t_last),
                               horizon, v_max, 0.0)

    deg = min(degree, len(obs) - 1)
    coeffs, rms = _ridge_polyfit(times - t_last, pts, deg, ridge)
    if coeffs is None:       # rank-deficient even with the ridge
        deg = 1
        coeffs, rms = _ridge_polyfit(times - t_last, pts, deg, ridge)
        if coeffs is None:
            coeffs = np.vstack([pts[-1], np.zeros(3)])
            rms = 0.0
    return PredictionModel(deg, coeffs, t_last, (float(times[0]), t_last),
                           horizon, v_max, rms)


def _ridge_polyfit(s: np.ndarray, y: np.ndarray, degree: int, ridge: float):
    basis = s[:, None] ** np.arange(degree + 1)[None, :]
    damp = np.eye(degree + 1)
    damp[0, 0] = 0.0          # constant term unregularized
    lhs = basis.T @ basis + ridge * damp
    try:
        coeffs = np.linalg.solve(lhs, basis.T @ y)
    except np.linalg.LinAlgError:
        return None, 0.0
    if not np.isfinite(coeffs).all():
        return None, 0.0
    resid = basis @ coeffs - y
    return coeffs, float(np.sqrt((resid ** 2).mean()))


def _saturation_time(model: PredictionModel, t_end: float,
                     probe_dt: float = 0.01) -> float | None:
    """First forecast time at which fitted speed exceeds the bound."""
    if model.degree == 0:
        return None
    s = np.arange(0.0, t_end - model.t_ref + probe_dt, probe_dt)
    k = np.arange(1, model.degree + 1)
    dbasis = k[None, :] * s[:, None] ** (k - 1)[None, :]
    speeds = np.linalg.norm(dbasis @ model.coeffs[1:], axis=1)
    over = np.nonzero(speeds > model.v_max)[0]
    if over.size == 0:
        return None
    return float(model.t_ref + s[over[0]])


def predict_track(model: PredictionModel, times) -> TargetTrack:
    """Evaluate the model at the given times (must be >= the fit anchor).

    Beyond the speed bound or the validity horizon the track continues at
    the capped constant velocity; such tracks are flagged extrapolated.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return TargetTrack(np.zeros((0, 3)))
    t_max = float(times.max())
    horizon_end = model.t_ref + model.horizon
    t_sat = _saturation_time(model, min(t_max, horizon_end))
    if t_sat is None and t_max > horizon_end:
        t_sat = horizon_end

    out = np.zeros((times.size, 3))
    extrapolated = False
    if t_sat is None:
        for i, t in enumerate(times):
            out[i] = model.position(float(t))
    else:
        p_sat = model.position(t_sat)
        v_sat = model.velocity(t_sat)
        speed = np.linalg.norm(v_sat)
        if speed > model.v_max:
            v_sat = v_sat / speed * model.v_max
        for i, t in enumerate(times):
            if t <= t_sat:
                out[i] = model.position(float(t))
            else:
                out[i] = p_sat + v_sat * (t - t_sat)
                extrapolated = True
    return TargetTrack(out, extrapolated=extrapolated)
