"""Training-dynamics analysis: generalized logistic fits of relative
validation accuracy, growth-rate phase boundaries, and embedding-space
centroid diagnostics.

The curve family is f(x) = a + (d - a) / (1 + c * exp(-b * x)) with lower
asymptote a, upper asymptote d, growth rate b > 0, and c = exp(b * x0)
placing the inflection point x0 where growth peaks at b * (d - a) / 4.
The boundary between the flat early phase and fast-growth phase (and the
symmetric boundary into the late plateau) is where f' crosses a fraction
of that maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FitError


@dataclass(frozen=True)
class LogisticFit:
    a: float          # lower asymptote
    b: float          # growth rate
    c: float          # horizontal placement, c = exp(b * x0)
    d: float          # upper asymptote
    x0: float         # inflection point, ln(c) / b
    residual: float   # sum of squared errors at the optimum

    @property
    def degenerate(self) -> bool:
        """Flat data collapses the asymptotes onto each other."""
        return abs(self.d - self.a) < 1e-6

    def __call__(self, x) -> np.ndarray:
        return logistic_value(self, x)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_value(fit: LogisticFit, x) -> np.ndarray:
    z = fit.b * (np.asarray(x, dtype=np.float64) - fit.x0)
    return fit.a + (fit.d - fit.a) * _sigmoid(z)


def logistic_derivative(fit: LogisticFit, x):
    """f'(x), always positive, peaking at b * (d - a) / 4 on the inflection.

    Evaluated as b * (d - a) * e / (1 + e)^2 with e = exp(-|b (x - x0)|),
    which never cancels to zero while e is representable.
    """
    z = fit.b * (np.asarray(x, dtype=np.float64) - fit.x0)
    e = np.exp(-np.abs(z))
    out = fit.b * (fit.d - fit.a) * e / (1.0 + e) ** 2
    return float(out) if out.ndim == 0 else out


def _gauss_newton(xs, ys, theta0, max_iter=200):
    """Damped (Levenberg-style) least squares in (a, d, log b, x0)."""
    theta = np.asarray(theta0, dtype=np.float64).copy()

    def residuals(th):
        a, d, logb, x0 = th
        s = _sigmoid(math.exp(logb) * (xs - x0))
        return a + (d - a) * s - ys, s

    r, s = residuals(theta)
    sse = float(r @ r)
    mu = 1e-3
    converged = False
    for _ in range(max_iter):
        a, d, logb, x0 = theta
        b = math.exp(logb)
        sp = s * (1.0 - s)
        jac = np.stack([
            1.0 - s,                      # d/da
            s,                            # d/dd
            (d - a) * sp * (xs - x0) * b,  # d/dlogb
            -(d - a) * sp * b,            # d/dx0
        ], axis=1)
        g = jac.T @ r
        if np.max(np.abs(g)) < 1e-12:
            converged = True
            break
        jtj = jac.T @ jac
        accepted = False
        for _ in range(60):
            try:
                delta = np.linalg.solve(
                    jtj + mu * np.diag(np.diag(jtj)) + 1e-14 * np.eye(4), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = theta + delta
            trial[2] = min(max(trial[2], -30.0), 30.0)
            r_try, s_try = residuals(trial)
            sse_try = float(r_try @ r_try)
            if sse_try <= sse:
                improvement = sse - sse_try
                theta, r, s, sse = trial, r_try, s_try, sse_try
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                if improvement < 1e-16 * (1.0 + sse) and np.max(np.abs(delta)) < 1e-10:
                    converged = True
                break
            mu *= 10.0
        if not accepted or converged:
            converged = converged or accepted
            break
    return theta, sse, converged


def fit_logistic(xs, ys) -> LogisticFit:
    """Multi-start damped Gauss-Newton fit of the four-parameter logistic.

    Starts span a = min(ys), d = max(ys), inflection guesses across the x
    range, and growth rates bracketing the endpoint slope; the best
    converged start wins. Raises FitError (carrying the best residual) if
    no start converges.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise ContractError(f"xs and ys must be matching vectors, got {xs.shape}, {ys.shape}")
    if xs.size < 5:
        raise ContractError(f"need at least 5 points, got {xs.size}")
    if not np.all(np.diff(xs) > 0):
        raise ContractError("xs must be strictly increasing")

    a0 = float(ys.min())
    d0 = float(ys.max())
    span_y = max(d0 - a0, 1e-9)
    span_x = float(xs[-1] - xs[0])
    slope = (ys[-1] - ys[0]) / span_x
    b_base = min(max(4.0 * abs(slope) / span_y, 1e-3 / span_x), 1e3)
    quantiles = (0.25, 0.5, 0.75)
    best = None
    best_sse = math.inf
    converged_any = False
    for qx in quantiles:
        x0 = float(xs[0] + qx * span_x)
        for mult in (0.25, 1.0, 4.0, 16.0):
            theta0 = (a0, d0, math.log(b_base * mult), x0)
            theta, sse, ok = _gauss_newton(xs, ys, theta0)
            converged_any = converged_any or ok
            if ok and sse < best_sse:
                best, best_sse = theta, sse
    if best is None:
        raise FitError("logistic fit did not converge from any start",
                       residual=best_sse)
    a, d, logb, x0 = best
    if d < a:  # canonical orientation: rising curve, d above a
        a, d, x0 = d, a, x0
    b = math.exp(logb)
    c = math.exp(min(b * x0, 700.0))
    return LogisticFit(a=float(a), b=float(b), c=float(c), d=float(d),
                       x0=float(x0), residual=float(best_sse))


@dataclass(frozen=True)
class PhaseBoundaries:
    """Where the fitted growth rate crosses `fraction` of its maximum."""

    learn_x: float      # real crossing before the inflection
    gen_x: float        # real crossing after the inflection
    learn_epoch: int    # ceil of learn_x
    gen_epoch: int      # ceil of gen_x
    fraction: float


def phase_boundaries(fit: LogisticFit, fraction: float = 0.2) -> PhaseBoundaries:
    """Solve f'(x) = fraction * max f' in closed form.

    With u = c * exp(-b x) the condition u / (1 + u)^2 = fraction / 4 gives
    u^2 - (4 / fraction - 2) u + 1 = 0; the two roots are reciprocal, so
    the crossings sit symmetrically around x0. Integer epochs round up.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must be in (0, 1), got {fraction}")
    if fit.degenerate:
        raise ContractError("phase boundaries are undefined for a flat fit")
    q = 4.0 / fraction - 2.0
    root = math.sqrt(q * q - 4.0)
    u_big = (q + root) / 2.0
    offset = math.log(u_big) / fit.b
    return PhaseBoundaries(
        learn_x=fit.x0 - offset,
        gen_x=fit.x0 + offset,
        learn_epoch=math.ceil(fit.x0 - offset),
        gen_epoch=math.ceil(fit.x0 + offset),
        fraction=fraction,
    )


def centroid_distances(support_emb: np.ndarray, support_labels,
                       query_emb: np.ndarray) -> tuple[np.ndarray, int]:
    """Euclidean distance from a query embedding to each class centroid.

    Returns (distances indexed by class, argmin class). Every class in
    [0, max_label] must have at least one support.
    """
    support_emb = np.asarray(support_emb, dtype=np.float64)
    query_emb = np.asarray(query_emb, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    if support_emb.ndim != 2 or labels.shape != (support_emb.shape[0],):
        raise ContractError(
            f"bad shapes: supports {support_emb.shape}, labels {labels.shape}")
    if query_emb.shape != (support_emb.shape[1],):
        raise ContractError(
            f"query shape {query_emb.shape} does not match dim {support_emb.shape[1]}")
    n_classes = int(labels.max()) + 1
    dists = np.empty(n_classes)
    for cls in range(n_classes):
        members = support_emb[labels == cls]
        if members.size == 0:
            raise ContractError(f"class {cls} has no supports")
        dists[cls] = np.linalg.norm(query_emb - members.mean(axis=0))
    return dists, int(dists.argmin())
