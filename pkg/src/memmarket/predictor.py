"""ARIMA forecasting of producer free memory.

Estimation is conditional sum of squares: residuals before the first usable
observation are taken as zero and the parameters minimise the sum of squared
one-step errors by damped Gauss-Newton. Every model carries a constant: the
mean for ``d = 0`` and a drift for ``d = 1``, so a ``(0, 1, 0)`` model with
zero constant is the plain random walk.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .units import MS_PER_DAY, InvalidArgument

log = logging.getLogger(__name__)

MAX_P, MAX_D, MAX_Q = 3, 1, 2


class FitFailed(RuntimeError):
    pass


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class ArimaOrder:
    p: int = 0
    d: int = 0
    q: int = 0

    def __post_init__(self):
        if not (0 <= self.p <= MAX_P and 0 <= self.d <= MAX_D and 0 <= self.q <= MAX_Q):
            raise InvalidArgument(f"order {self.as_tuple()} outside grid bounds")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.p, self.d, self.q)


DEFAULT_GRID = tuple(ArimaOrder(p, d, q) for p, d, q in
                     itertools.product(range(MAX_P + 1), range(MAX_D + 1), range(MAX_Q + 1)))


@dataclass(frozen=True)
class TimeSeries:
    start: int
    step: int
    values: tuple[float, ...]

    def __post_init__(self):
        if self.step <= 0:
            raise InvalidArgument("time series step must be positive")
        if not all(math.isfinite(v) for v in self.values):
            raise InvalidArgument("time series values must be finite")

    def __len__(self):
        return len(self.values)

    @property
    def span(self) -> int:
        return len(self.values) * self.step

    @property
    def end(self) -> int:
        """Timestamp of the last observation."""
        return self.start + (len(self.values) - 1) * self.step


@dataclass(frozen=True)
class ArimaModel:
    order: ArimaOrder
    intercept: float = 0.0
    ar: tuple[float, ...] = ()
    ma: tuple[float, ...] = ()
    sigma2: float = 0.0
    fitted_at: Optional[int] = None

    def __post_init__(self):
        if len(self.ar) != self.order.p or len(self.ma) != self.order.q:
            raise InvalidArgument("coefficient count does not match order")
        if not all(math.isfinite(v) for v in (self.intercept, self.sigma2, *self.ar, *self.ma)):
            raise InvalidArgument("non-finite coefficient")

    def to_json(self) -> str:
        return json.dumps({
            "order": list(self.order.as_tuple()),
            "coeffs": {"ar": list(self.ar), "ma": list(self.ma)},
            "intercept": self.intercept,
            "sigma2": self.sigma2,
            "fitted_at": self.fitted_at,
        })

    @classmethod
    def from_json(cls, text: str) -> "ArimaModel":
        obj = json.loads(text)
        return cls(ArimaOrder(*obj["order"]), obj["intercept"], tuple(obj["coeffs"]["ar"]),
                   tuple(obj["coeffs"]["ma"]), obj["sigma2"], obj.get("fitted_at"))


def naive_model(d: int = 1) -> ArimaModel:
    return ArimaModel(ArimaOrder(0, d, 0))


def difference(values: Sequence[float], d: int) -> np.ndarray:
    y = np.asarray(values, dtype=float)
    if d < 0:
        raise InvalidArgument("negative differencing order")
    if len(y) <= d:
        raise InsufficientHistory(f"need more than {d} observations to difference {d} times")
    return np.diff(y, n=d) if d else y.copy()


def _css_residuals(w: np.ndarray, c: float, phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    p = len(phi)
    x = w[p:] - c
    for i in range(1, p + 1):
        x = x - phi[i - 1] * w[p - i:len(w) - i]
    if len(theta):
        return lfilter([1.0], np.r_[1.0, theta], x)
    return x


def _lagged(e: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(e)
    out[k:] = e[:-k]
    return out


def _jacobian(w, c, phi, theta, e) -> np.ndarray:
    p, q = len(phi), len(theta)
    cols = [-np.ones(len(w) - p)]
    for i in range(1, p + 1):
        cols.append(-w[p - i:len(w) - i])
    for j in range(1, q + 1):
        cols.append(-_lagged(e, j))
    J = np.column_stack(cols)
    if q:
        J = lfilter([1.0], np.r_[1.0, theta], J, axis=0)
    return J


def _unpack(params, p, q):
    return params[0], params[1:1 + p], params[1 + p:1 + p + q]


def _initial_params(w: np.ndarray, p: int, q: int) -> np.ndarray:
    # exact CSS solution when q == 0
    if p:
        X = np.column_stack([np.ones(len(w) - p)] + [w[p - i:len(w) - i] for i in range(1, p + 1)])
        beta, *_ = np.linalg.lstsq(X, w[p:], rcond=None)
        start = list(beta)
    else:
        start = [float(np.mean(w))]
    return np.array(start + [0.0] * q, dtype=float)


def fit(series: Sequence[float], order: ArimaOrder, max_iter: int = 200, tol: float = 1e-8,
        fitted_at: Optional[int] = None, check_stability: bool = True) -> ArimaModel:
    """Fit an ARIMA model by conditional least squares.

    Raises FitFailed when Gauss-Newton does not settle within ``max_iter``
    iterations or when the fitted model's forecasts blow up.
    """
    y = np.asarray(series, dtype=float)
    w = difference(y, order.d)
    p, q = order.p, order.q
    if len(w) < 10 * (p + q + 1):
        raise InsufficientHistory(
            f"order {order.as_tuple()} needs {10 * (p + q + 1)} differenced points, got {len(w)}")

    params = _initial_params(w, p, q)
    e = _css_residuals(w, *_unpack(params, p, q))
    sse = float(e @ e)
    if q:
        converged = False
        for _ in range(max_iter):
            c, phi, theta = _unpack(params, p, q)
            J = _jacobian(w, c, phi, theta, e)
            delta, *_ = np.linalg.lstsq(J, -e, rcond=None)
            alpha = 1.0
            improved = False
            for _ in range(40):
                cand = params + alpha * delta
                with np.errstate(over="ignore", invalid="ignore"):
                    e_c = _css_residuals(w, *_unpack(cand, p, q))
                    sse_c = float(e_c @ e_c)
                if np.isfinite(sse_c) and sse_c <= sse:
                    improved = True
                    break
                alpha /= 2
            if not improved:
                # no descent direction left: at a (local) minimum
                converged = True
                break
            rel = (sse - sse_c) / max(sse, 1e-300)
            params, e, sse = cand, e_c, sse_c
            if rel < tol:
                converged = True
                break
        if not converged:
            raise FitFailed(f"CSS did not converge in {max_iter} iterations")

    c, phi, theta = _unpack(params, p, q)
    model = ArimaModel(order, float(c), tuple(float(v) for v in phi),
                       tuple(float(v) for v in theta), sse / max(len(e), 1), fitted_at)
    if check_stability:
        horizon = min(len(y), 100)
        bound = 10 * max(float(np.max(np.abs(y))), 1e-12)
        fc = forecast(model, y, horizon)
        if not np.all(np.isfinite(fc)) or np.max(np.abs(fc)) > bound:
            raise FitFailed("fitted model produces exploding forecasts")
    return model


def one_step_predictions(model: ArimaModel, series: Sequence[float]) -> np.ndarray:
    """In-sample one-step-ahead level predictions for ``series[p + d:]``."""
    y = np.asarray(series, dtype=float)
    o = model.order
    w = difference(y, o.d)
    e = _css_residuals(w, model.intercept, np.array(model.ar), np.array(model.ma))
    w_hat = w[o.p:] - e
    if o.d:
        return y[o.p:-1] + w_hat
    return w_hat


def forecast(model: ArimaModel, last_observations: Sequence[float], h: int) -> np.ndarray:
    """Recursive point forecast ``h`` steps past the end of ``last_observations``."""
    if h < 1:
        raise InvalidArgument("forecast horizon must be at least 1")
    o = model.order
    y = np.asarray(last_observations, dtype=float)
    if len(y) < max(o.p, o.q) + o.d or len(y) <= o.d:
        raise InsufficientHistory(f"need {max(o.p, o.q) + o.d} trailing observations")
    w = difference(y, o.d)
    phi, theta = np.array(model.ar), np.array(model.ma)
    if len(w) > o.p:
        e = np.r_[np.zeros(o.p), _css_residuals(w, model.intercept, phi, theta)]
    else:
        e = np.zeros(len(w))
    w_hist, e_hist = list(w), list(e)
    out = []
    for _ in range(h):
        nxt = model.intercept
        for i in range(1, o.p + 1):
            nxt += phi[i - 1] * w_hist[-i]
        for j in range(1, o.q + 1):
            if j <= len(e_hist):
                nxt += theta[j - 1] * e_hist[-j]
        w_hist.append(nxt)
        e_hist.append(0.0)
        out.append(nxt)
    out = np.array(out)
    if o.d:
        return y[-1] + np.cumsum(out)
    return out


def holdout_mse(series: Sequence[float], order: ArimaOrder, holdout: float = 0.2,
                **fit_kw) -> float:
    y = np.asarray(series, dtype=float)
    n_test = max(1, int(round(len(y) * holdout)))
    head = y[:-n_test]
    model = fit(head, order, **fit_kw)
    preds = one_step_predictions(model, y)
    # predictions are aligned to y[p + d:]; keep the holdout tail
    err = y[-n_test:] - preds[-n_test:]
    return float(np.mean(err * err))


def grid_search(series: Sequence[float], grid: Iterable[ArimaOrder] = DEFAULT_GRID,
                holdout: float = 0.2, rel_tie: float = 1e-9) -> ArimaOrder:
    """Order with minimal rolling one-step MSE over the trailing holdout.

    Near-equal MSEs are broken by fewest parameters, then smallest ``p``.
    """
    scores = []
    for order in grid:
        try:
            mse = holdout_mse(series, order, holdout)
        except (FitFailed, InsufficientHistory, np.linalg.LinAlgError) as exc:
            log.debug("order %s skipped: %s", order.as_tuple(), exc)
            continue
        if math.isfinite(mse):
            scores.append((mse, order))
    if not scores:
        return ArimaOrder(0, 1, 0)
    best = min(s for s, _ in scores)
    tied = [o for s, o in scores if s <= best * (1 + rel_tie) + 1e-300]
    return min(tied, key=lambda o: (o.p + o.q, o.p, o.d, o.q))


def overprediction_rate(predicted: Sequence[float], actual: Sequence[float],
                        margin: float = 0.04) -> float:
    """Fraction of intervals where the predicted free memory exceeds the actual by ``margin``."""
    pr = np.asarray(predicted, dtype=float)
    ac = np.asarray(actual, dtype=float)
    if len(pr) == 0:
        return 0.0
    return float(np.mean(pr > ac * (1 + margin)))


class ArimaForecaster(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit` and :func:`forecast`.

    ``fit`` takes the series as ``y`` (``X`` is ignored); ``predict`` returns
    the next ``steps`` values after the training series.
    """

    def __init__(self, order=(1, 0, 0), max_iter=200, tol=1e-8):
        self.order = order
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X=None, y=None):
        y = _as_series(X, y)
        self.model_ = fit(y, ArimaOrder(*self.order), self.max_iter, self.tol)
        self.y_ = y
        self.intercept_ = self.model_.intercept
        self.ar_coef_ = np.array(self.model_.ar)
        self.ma_coef_ = np.array(self.model_.ma)
        self.sigma2_ = self.model_.sigma2
        return self

    def predict(self, X=None, steps: int = 1):
        check_is_fitted(self, "model_")
        if X is not None:
            steps = len(X)
        return forecast(self.model_, self.y_, steps)


class AutoArimaForecaster(ArimaForecaster):
    """Chooses the order by holdout grid search, then refits on the full series."""

    def __init__(self, grid=None, holdout=0.2, max_iter=200, tol=1e-8):
        self.grid = grid
        self.holdout = holdout
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X=None, y=None):
        y = _as_series(X, y)
        grid = DEFAULT_GRID if self.grid is None else [ArimaOrder(*g) for g in self.grid]
        self.order_ = grid_search(y, grid, self.holdout)
        try:
            self.model_ = fit(y, self.order_, self.max_iter, self.tol)
        except (FitFailed, InsufficientHistory):
            self.order_ = ArimaOrder(0, 1, 0)
            self.model_ = naive_model()
        self.y_ = y
        self.intercept_ = self.model_.intercept
        self.ar_coef_ = np.array(self.model_.ar)
        self.ma_coef_ = np.array(self.model_.ma)
        self.sigma2_ = self.model_.sigma2
        return self


def _as_series(X, y) -> np.ndarray:
    data = y if y is not None else X
    if data is None:
        raise InvalidArgument("no series given")
    return check_array(np.asarray(data, dtype=float).reshape(-1), ensure_2d=False)


@dataclass
class AvailabilityPredictor:
    """Per-producer minimum-free-memory forecaster with daily order tuning."""

    grid: tuple[ArimaOrder, ...] = DEFAULT_GRID
    retune_every: int = MS_PER_DAY
    min_history: int = MS_PER_DAY
    fit_window: int = 2 * MS_PER_DAY
    model: Optional[ArimaModel] = None
    last_tune: Optional[int] = None
    tune_events: list = field(default_factory=list)

    def _window(self, history: TimeSeries) -> np.ndarray:
        keep = max(2, self.fit_window // history.step)
        return np.asarray(history.values[-keep:], dtype=float)

    def maybe_retune(self, history: TimeSeries, now: int) -> bool:
        if history.span < self.min_history:
            return False
        if self.last_tune is not None and now - self.last_tune <= self.retune_every:
            return False
        y = self._window(history)
        order = grid_search(y, self.grid)
        try:
            self.model = fit(y, order, fitted_at=now)
        except (FitFailed, InsufficientHistory):
            self.model = naive_model()
        self.last_tune = now
        self.tune_events.append((now, self.model.order.as_tuple()))
        return True

    def predict_min_free(self, history: TimeSeries, lease: int, now: int) -> float:
        if len(history) == 0:
            return 0.0
        self.maybe_retune(history, now)
        steps = max(1, -(-lease // history.step))
        model = self.model if self.model is not None else naive_model()
        y = np.asarray(history.values, dtype=float)
        try:
            fc = forecast(model, y[-max(64, 4 * (model.order.p + model.order.q + 1)):], steps)
        except InsufficientHistory:
            fc = np.array([y[-1]])
        return max(0.0, float(np.min(fc)))
