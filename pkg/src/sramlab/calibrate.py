"""Fit the initial mismatch distribution to start-of-test quality targets.

With noise fixed to ``sigma = 1``, the one-probability of a fresh cell is
``Phi(m)``. Every start metric is then an expectation over ``m ~ N(mu, s)``:

* HW: ``Phi(mu / sqrt(s**2 + 1))`` (closed form)
* WCHD against the first read-out: ``E[2 p (1 - p)] * (W - 1) / W`` (the
  reference itself is one of the W read-outs)
* stable ratio over W read-outs: ``E[p**W + (1 - p)**W]``
* noise entropy over W read-outs: ``E[log2 W - log2 max(K, W - K)]``,
  ``K ~ Binomial(W, p)``

Per-cell terms are tabulated once on a fixed grid of ``m``; a parameter pair
only changes the Gaussian weights, so the 2-D fit is cheap. Fitting is a
coarse grid search followed by least-squares refinement.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, stats
from scipy.special import ndtr, ndtri

from .bits import DEFAULT_N
from .metrics import (
    DEFAULT_WINDOW,
    SampleSet,
    hamming_weights,
    noise_min_entropy,
    one_probability,
    stable_cell_ratio,
    wchd,
)
from .model import DevicePopulation, ModelParams, run_cycles

# cells with |m| beyond this are treated as never flipping
_EDGE = 8.5
_STEP = 0.005
_NARROW = 0.5


class CalibrationError(RuntimeError):
    def __init__(self, message: str, params: ModelParams | None, residuals: dict):
        super().__init__(f"{message}; best residuals {residuals}")
        self.params = params
        self.residuals = residuals


@dataclass(frozen=True)
class StartTargets:
    fhw: float = 0.627
    wchd: float = 0.0249
    stable_ratio: float = 0.859
    noise_entropy: float = 0.0305
    window: int = DEFAULT_WINDOW

    def as_array(self) -> np.ndarray:
        return np.array([self.fhw, self.wchd, self.stable_ratio, self.noise_entropy])


# acceptance band for the seeded simulation check
DEFAULT_TOLERANCE = StartTargets(fhw=0.015, wchd=0.004, stable_ratio=0.015, noise_entropy=0.005)


@dataclass(frozen=True)
class CalibrationResult:
    params: ModelParams
    predicted: StartTargets
    simulated: StartTargets | None
    residuals: dict

    def to_dict(self) -> dict:
        return {
            "model": self.params.to_dict(),
            "predicted": asdict(self.predicted),
            "simulated": asdict(self.simulated) if self.simulated else None,
            "residuals": self.residuals,
        }


@lru_cache(maxsize=8)
def _cell_table(window: int):
    m = np.arange(-_EDGE, _EDGE + _STEP / 2, _STEP)
    p = ndtr(m)
    k = np.arange(window + 1)
    h = np.log2(window) - np.log2(np.maximum(k, window - k))
    pmf = stats.binom.pmf(k[None, :], window, p[:, None])
    ne = pmf @ h
    stable = p**window + (1 - p) ** window
    flip = 2 * p * (1 - p)
    return m, stable, flip, ne


def start_metrics(mu: float, s: float, window: int = DEFAULT_WINDOW) -> StartTargets:
    """Expected epoch-0 metrics of a fresh device with ``m ~ N(mu, s)``, sigma = 1."""
    if s < _NARROW:
        # narrow spread: Gauss-Hermite nodes with interpolated per-cell terms
        m, stable, flip, ne = _cell_table(window)
        z, wz = np.polynomial.hermite_e.hermegauss(64)
        wz = wz / wz.sum()
        x = mu + s * z
        return StartTargets(
            fhw=float(ndtr(mu / math.sqrt(s * s + 1))),
            wchd=float(wz @ np.interp(x, m, flip, left=0.0, right=0.0)) * (window - 1) / window,
            stable_ratio=float(wz @ np.interp(x, m, stable, left=1.0, right=1.0)),
            noise_entropy=float(wz @ np.interp(x, m, ne, left=0.0, right=0.0)),
            window=window,
        )
    m, stable, flip, ne = _cell_table(window)
    # trapezoid over the grid with Gaussian density; tails outside the grid are stable
    w = stats.norm.pdf(m, mu, s) * _STEP
    w[0] *= 0.5
    w[-1] *= 0.5
    tail = ndtr((-_EDGE - mu) / s) + ndtr((mu - _EDGE) / s)
    return StartTargets(
        fhw=float(ndtr(mu / math.sqrt(s * s + 1))),
        wchd=float(w @ flip) * (window - 1) / window,
        stable_ratio=float(w @ stable + tail),
        noise_entropy=float(w @ ne),
        window=window,
    )


def _residual_vector(x, targets: StartTargets) -> np.ndarray:
    got = start_metrics(x[0], x[1], targets.window).as_array()
    tgt = targets.as_array()
    return (got - tgt) / np.maximum(np.abs(tgt), 1e-6)


def fit_start(targets: StartTargets = StartTargets()) -> tuple[float, float, np.ndarray]:
    """Least-squares (mu_m, s_m) over relative residuals; returns the residual vector too."""
    if not 0 < targets.fhw < 1:
        raise CalibrationError("HW target must lie strictly between 0 and 1", None, {})
    # grid: s_m on a log scale, mu_m tied to the closed-form HW target
    best = None
    z = ndtri(targets.fhw)
    for s in np.geomspace(0.5, 200, 60):
        for mu_scale in (0.9, 1.0, 1.1):
            mu = mu_scale * z * math.sqrt(s * s + 1)
            r = _residual_vector((mu, s), targets)
            cost = float(r @ r)
            if best is None or cost < best[0]:
                best = (cost, mu, s)
    sol = optimize.least_squares(_residual_vector, [best[1], best[2]], args=(targets,),
                                 bounds=([-np.inf, 1e-3], [np.inf, np.inf]), xtol=1e-12, ftol=1e-12)
    return float(sol.x[0]), float(sol.x[1]), sol.fun


def simulate_start(params: ModelParams, devices: int = 16, n: int = DEFAULT_N, window: int = DEFAULT_WINDOW,
                   seed: int = 0) -> StartTargets:
    """Device-averaged metrics of the first ``window`` power-ups of fresh,
    non-aging devices (the quantity the start fit predicts)."""
    params = params.with_(delta=0.0, trap_count=0.0)
    vals = []
    for i in range(devices):
        dev = DevicePopulation(params, n, seed, index=i)
        ss = SampleSet(dev.device_id, 0, n, run_cycles(dev, window))
        p = one_probability(ss)
        d = wchd(ss.pattern(0), ss)
        vals.append((hamming_weights(ss).mean(), d.mean(),
                     stable_cell_ratio(p), noise_min_entropy(p)))
    a = np.mean(vals, axis=0)
    return StartTargets(float(a[0]), float(a[1]), float(a[2]), float(a[3]), window)


def _named(a: np.ndarray) -> dict:
    return {k: float(v) for k, v in zip(("fhw", "wchd", "stable_ratio", "noise_entropy"), a)}


def calibrate(targets: StartTargets = StartTargets(), base: ModelParams = ModelParams(), *,
              check: bool = True, devices: int = 16, n: int = DEFAULT_N, seed: int = 0,
              tolerance: StartTargets = DEFAULT_TOLERANCE) -> CalibrationResult:
    """Fit ``(mu_m, s_m)``; aging parameters are taken from ``base`` unchanged.

    With ``check`` a seeded simulation must land within ``tolerance`` of every
    target, otherwise :class:`CalibrationError` is raised with its residuals.
    A stable-ratio target of 1 selects the noiseless limit (``sigma = 0``).
    """
    if targets.stable_ratio >= 1.0:
        # only a noiseless cell is stable with certainty; WCHD and noise entropy are then 0
        z = float(ndtri(targets.fhw))
        params = base.with_(mu_m=z * base.s_m, sigma=0.0)
        predicted = StartTargets(targets.fhw, 0.0, 1.0, 0.0, targets.window)
        targets = predicted
    else:
        mu, s, _ = fit_start(targets)
        params = base.with_(mu_m=mu, s_m=s, sigma=1.0)
        predicted = start_metrics(mu, s, targets.window)
    residuals = {"predicted": _named(predicted.as_array() - targets.as_array())}
    simulated = None
    if check:
        simulated = simulate_start(params, devices, n, targets.window, seed)
        diff = simulated.as_array() - targets.as_array()
        residuals["simulated"] = _named(diff)
        if (np.abs(diff) > tolerance.as_array()).any():
            raise CalibrationError("simulated start state outside tolerance", params, residuals)
    return CalibrationResult(params, predicted, simulated, residuals)
