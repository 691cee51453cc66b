"""Monotone upper envelope of prediction error against NLL, and the Chebyshev tail bound."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from trajood.errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Envelope:
    """phi(L) = a * exp(b * (L - loc) / scale) + c, or a running-max step function when ``isotonic``."""

    a: float
    b: float
    c: float
    loc: float
    scale: float
    isotonic: bool = False
    knots: tuple = ()
    levels: tuple = ()

    def __call__(self, L):
        L = np.asarray(L, dtype=np.float64)
        if self.isotonic:
            knots, levels = np.asarray(self.knots), np.asarray(self.levels)
            idx = np.searchsorted(knots, L, side="right") - 1
            return np.where(idx < 0, levels[0], levels[np.clip(idx, 0, len(levels) - 1)])
        u = np.clip(self.b * (L - self.loc) / self.scale, None, 700.0)
        return self.a * np.exp(u) + self.c

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "loc": self.loc, "scale": self.scale,
                "isotonic": self.isotonic, "knots": list(self.knots), "levels": list(self.levels)}


def running_max_hull(L, e) -> tuple[np.ndarray, np.ndarray]:
    """Points sorted by L with the cumulative maximum of e."""
    order = np.argsort(L, kind="stable")
    return np.asarray(L)[order], np.maximum.accumulate(np.asarray(e)[order])


def fit_monotone_envelope(L_values, errors, tol: float = 1e-6) -> Envelope:
    """Least-squares exponential fit to the running-max hull, shifted up to cover every point.

    a, b >= 0 keeps phi non-decreasing. Falls back to the step envelope of the
    hull itself when the fit fails or is degenerate.
    """
    L = np.asarray(L_values, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if L.shape != e.shape or L.ndim != 1:
        raise ValidationError("L_values and errors must be 1-D of equal length")
    if len(L) < 10:
        raise ValidationError("envelope fitting needs at least 10 calibration pairs")
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(e))):
        raise ValidationError("non-finite calibration pairs")
    Ls, M = running_max_hull(L, e)
    loc, scale = float(Ls[0]), float(np.ptp(Ls))
    if scale > 0 and np.ptp(M) > 0:
        u = (Ls - loc) / scale
        x0 = [max(np.ptp(M), 1e-6), 1.0, float(M[0])]
        try:
            fit = least_squares(lambda p: p[0] * np.exp(p[1] * u) + p[2] - M, x0,
                                bounds=([0.0, 0.0, -np.inf], [np.inf, 50.0, np.inf]))
            a, b, c = (float(v) for v in fit.x)
            if fit.success and np.all(np.isfinite(fit.x)):
                phi = a * np.exp(b * (L - loc) / scale) + c
                c += max(0.0, float(np.max(e - phi))) + tol / 2
                return Envelope(a, b, c, loc, scale)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("exponential envelope fit failed (%s); using step envelope", exc)
    log.warning("degenerate calibration data; using isotonic step envelope")
    return Envelope(0.0, 0.0, float(M[-1]), loc, scale or 1.0, isotonic=True,
                    knots=tuple(Ls.tolist()), levels=tuple(M.tolist()))


def chebyshev_bound(L_typ: float, sigma2: float, alpha: float) -> float:
    """Upper bound on P(|L - L_typ| >= alpha) for an NLL with variance sigma2."""
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    if sigma2 < 0:
        raise ValidationError("variance must be non-negative")
    return min(1.0, sigma2 / alpha**2)


def violation_rate(env: Envelope, L_typ: float, alpha: float, errors) -> float:
    """Fraction of errors above phi(L_typ + alpha)."""
    return float(np.mean(np.asarray(errors) > env(L_typ + alpha)))
