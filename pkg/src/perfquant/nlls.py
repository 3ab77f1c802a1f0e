"""Non-linear least-squares estimation of 2CXM parameters.

Levenberg-Marquardt with a forward-difference Jacobian, run on many
independent problems at once (pixels x multi-start seeds). Box bounds are
imposed through a logistic reparameterisation so the optimiser works on an
unconstrained vector.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_curves, grid_indices
from .exceptions import ConvergenceError, DegenerateDataError, GridError, ValidationError
from .model import PARAM_NAMES, KineticParams, SampledCurve, simulate_batch

LAMBDA0 = 1e-3
LAMBDA_MAX = 1e16
FD_STEP = np.sqrt(np.finfo(float).eps)


@dataclass(frozen=True)
class FitBounds:
    """Box bounds for (Fp, vp, ve, PS, delay) in boundary units."""

    lower: tuple = (0.01, 0.001, 0.001, 0.0, 0.0)
    upper: tuple = (10.0, 0.5, 0.8, 5.0, 10.0)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (5,) or hi.shape != (5,):
            raise ValidationError("bounds need five entries (Fp, vp, ve, PS, delay)")
        if not np.all(lo < hi):
            raise ValidationError(f"lower bounds must be below upper bounds: {lo} vs {hi}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def lo(self):
        return np.asarray(self.lower)

    @property
    def hi(self):
        return np.asarray(self.upper)

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lo) & (theta <= self.hi), axis=-1)

    def to_dict(self):
        return {name: [lo, hi] for name, lo, hi in zip(PARAM_NAMES, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(PARAM_NAMES)
        if unknown:
            raise ValidationError(f"unknown bound keys: {sorted(unknown)}")
        default = cls()
        lo, hi = list(default.lower), list(default.upper)
        for i, name in enumerate(PARAM_NAMES):
            if name in d:
                lo[i], hi[i] = (float(v) for v in d[name])
        return cls(tuple(lo), tuple(hi))


@dataclass
class FitResult:
    params: KineticParams
    rss: float
    converged: bool
    n_iter: int
    start_index: int
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "rss": self.rss,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "start_index": self.start_index,
        }


def to_unbounded(theta, lo, hi):
    frac = (np.asarray(theta, dtype=float) - lo) / (hi - lo)
    return logit(np.clip(frac, 1e-12, 1 - 1e-12))


def to_bounded(u, lo, hi):
    return lo + (hi - lo) * expit(np.asarray(u, dtype=float))


def residuals(p, aif, tissue):
    """``tissue - model(p)`` on the tissue sampling times."""
    idx = _tissue_index(aif, tissue)
    model = simulate_batch(p.as_array()[None, :], aif.values, aif.dt)[0]
    return tissue.values - model[idx]


def rss(p, aif, tissue):
    r = residuals(p, aif, tissue)
    return float(r @ r)


def _tissue_index(aif, tissue):
    if len(tissue) == len(aif) and np.allclose(tissue.times, aif.times, rtol=0, atol=1e-9):
        return np.arange(len(aif))
    try:
        return grid_indices(aif.times, tissue.times)
    except GridError as exc:
        raise GridError(f"tissue and AIF grids do not match: {exc}") from None


def latin_hypercube(n, dim, rng):
    """Jittered Latin hypercube sample in the unit cube."""
    cells = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
    return (cells + rng.uniform(size=(n, dim))) / n


def multistart_points(bounds, n_starts, seed=0, include_center=True, margin=0.01):
    """Starting points in parameter space: bound centre plus Latin-hypercube seeds.

    The centre comes first so that any ``n_starts`` design contains the
    single-start design, which makes best-of-n never worse than best-of-1.
    """
    if n_starts < 1:
        raise ValidationError("n_starts must be at least 1")
    rng = np.random.default_rng(seed)
    n_lhs = n_starts - 1 if include_center else n_starts
    unit = latin_hypercube(n_lhs, 5, rng) if n_lhs else np.empty((0, 5))
    unit = margin + (1 - 2 * margin) * unit
    if include_center:
        unit = np.vstack([np.full((1, 5), 0.5), unit])
    return bounds.lo + unit * (bounds.hi - bounds.lo)


def forward_jacobian(fun, u, f0):
    """Forward-difference Jacobian of ``fun`` at rows ``u``; shape (B, nt, p)."""
    B, p = u.shape
    h = FD_STEP * np.maximum(1.0, np.abs(u))
    shifted = np.repeat(u[None, :, :], p, axis=0)
    for j in range(p):
        shifted[j, :, j] += h[:, j]
    h_exact = shifted[np.arange(p), :, np.arange(p)].T - u
    f = fun(shifted.reshape(p * B, p)).reshape(p, B, -1)
    return np.transpose((f - f0[None]) / h_exact.T[:, :, None], (1, 2, 0))


def levenberg_marquardt(fun, y, u0, max_iter=500, ftol=1e-10, xtol=1e-10,
                        lam0=LAMBDA0, record_history=False):
    """Batched Levenberg-Marquardt on independent least-squares problems.

    Parameters
    ----------
    fun : callable
        Maps parameter rows ``(b, p)`` to model rows ``(b, nt)``; rows are
        independent problems.
    y : ndarray, shape (B, nt)
    u0 : ndarray, shape (B, p)

    Returns
    -------
    u, rss, converged, n_iter, history
        ``history`` holds, per problem, the rss after each accepted step
        when ``record_history`` is set.
    """
    y = np.asarray(y, dtype=float)
    u = np.array(u0, dtype=float)
    B, p = u.shape
    f = fun(u)
    r = y - f
    cost = np.einsum("ij,ij->i", r, r)
    lam = np.full(B, lam0)
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    n_iter = np.zeros(B, dtype=int)
    floor = 1e-30 * np.maximum(np.einsum("ij,ij->i", y, y), 1e-300)
    history = [[c] for c in cost] if record_history else None

    done = cost <= floor
    converged[done] = True
    active[done] = False
    eye = np.eye(p)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        n_iter[idx] += 1
        J = forward_jacobian(fun, u[idx], f[idx])
        JtJ = np.einsum("bij,bik->bjk", J, J)
        g = np.einsum("bij,bi->bj", J, r[idx])
        diag = np.maximum(np.einsum("bjj->bj", JtJ), 1e-30)
        pending = np.arange(idx.size)
        while pending.size:
            rows = idx[pending]
            A = JtJ[pending] + lam[rows][:, None, None] * diag[pending][:, :, None] * eye
            delta = np.linalg.solve(A, g[pending][:, :, None])[:, :, 0]
            u_new = u[rows] + delta
            f_new = fun(u_new)
            r_new = y[rows] - f_new
            cost_new = np.einsum("ij,ij->i", r_new, r_new)
            ok = np.isfinite(cost_new) & (cost_new < cost[rows])
            acc = rows[ok]
            if acc.size:
                small_step = np.all(np.abs(delta[ok]) <= xtol * (np.abs(u[acc]) + xtol), axis=1)
                small_gain = (cost[acc] - cost_new[ok]) <= ftol * cost[acc]
                u[acc], f[acc], r[acc] = u_new[ok], f_new[ok], r_new[ok]
                cost[acc] = cost_new[ok]
                lam[acc] = np.maximum(lam[acc] / 10.0, 1e-12)
                stop = small_step | small_gain | (cost[acc] <= floor[acc])
                converged[acc[stop]] = True
                active[acc[stop]] = False
                if record_history:
                    for i in acc:
                        history[i].append(float(cost[i]))
            rej = rows[~ok]
            lam[rej] *= 10.0
            stuck = lam[rej] > LAMBDA_MAX
            # no descent direction at working precision: a stationary point
            converged[rej[stuck]] = True
            active[rej[stuck]] = False
            pending = pending[~ok][~stuck]
    return u, cost, converged, n_iter, history


class _BatchModel:
    """Maps unconstrained rows to tissue curves for a shared AIF."""

    def __init__(self, aif, idx, bounds, fit_delay, delay):
        self.aif = aif.values
        self.dt = aif.dt
        self.idx = idx
        self.lo = bounds.lo if fit_delay else bounds.lo[:4]
        self.hi = bounds.hi if fit_delay else bounds.hi[:4]
        self.fit_delay = fit_delay
        self.delay = float(delay)

    def theta(self, u):
        theta = to_bounded(u, self.lo, self.hi)
        if not self.fit_delay:
            theta = np.column_stack([theta, np.full(theta.shape[0], self.delay)])
        return theta

    def __call__(self, u):
        return simulate_batch(self.theta(u), self.aif, self.dt)[:, self.idx]


def fit_batch(aif, Y, times=None, bounds=None, n_starts=10, seed=0, fit_delay=True, delay=0.0,
              max_iter=500, include_center=True, starts=None):
    """Fit many tissue curves that share one AIF.

    Parameters
    ----------
    aif : SampledCurve
    Y : ndarray, shape (n_curves, n_times)
        Tissue curves sampled at ``times`` (default: the AIF grid).
    starts : ndarray, shape (n_starts, 5), optional
        Explicit starting points in parameter space; overrides the
        Latin-hypercube design.

    Returns
    -------
    dict with ``theta`` (n_curves, 5), ``rss``, ``converged``, ``n_iter``,
    ``start_index`` and ``all_rss`` (n_curves, n_starts).
    """
    bounds = FitBounds() if bounds is None else bounds
    Y = check_curves(Y)
    idx = np.arange(len(aif)) if times is None else grid_indices(aif.times, times)
    if Y.shape[1] != idx.size:
        raise GridError(f"tissue curves have {Y.shape[1]} samples, expected {idx.size}")
    if np.any(~np.any(Y != 0, axis=1)):
        raise DegenerateDataError("tissue curve is identically zero")
    if not fit_delay and not bounds.lo[4] <= delay <= bounds.hi[4]:
        raise ValidationError("fixed delay lies outside the delay bounds")
    if starts is None:
        starts = multistart_points(bounds, n_starts, seed, include_center)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n_starts = starts.shape[0]
    model = _BatchModel(aif, idx, bounds, fit_delay, delay)
    cols = 5 if fit_delay else 4
    u0 = to_unbounded(starts[:, :cols], model.lo, model.hi)

    n = Y.shape[0]
    U0 = np.tile(u0, (n, 1))
    YY = np.repeat(Y, n_starts, axis=0)
    u, cost, conv, n_iter, _ = levenberg_marquardt(model, YY, U0, max_iter=max_iter)
    cost = cost.reshape(n, n_starts)
    conv = conv.reshape(n, n_starts)
    n_iter = n_iter.reshape(n, n_starts)
    # failed starts never win unless every start failed
    ranked = np.where(conv, cost, np.inf)
    best = np.where(np.any(conv, axis=1), np.argmin(ranked, axis=1), np.argmin(cost, axis=1))
    rows = np.arange(n) * n_starts + best
    theta = model.theta(u[rows])
    return {
        "theta": theta,
        "rss": cost[np.arange(n), best],
        "converged": conv[np.arange(n), best],
        "n_iter": n_iter[np.arange(n), best],
        "start_index": best,
        "all_rss": cost,
        "all_converged": conv,
    }


def fit_nlls(aif, tissue, bounds=None, n_starts=10, seed=0, fit_delay=True, delay=0.0,
             max_iter=500, include_center=True, starts=None):
    """Least-squares 2CXM fit of one tissue curve, best of ``n_starts`` seeds.

    Raises
    ------
    DegenerateDataError
        If the tissue curve is identically zero.
    ConvergenceError
        If no start converged within ``max_iter`` iterations.
    """
    idx = _tissue_index(aif, tissue)
    out = fit_batch(aif, tissue.values[None, :], aif.times[idx], bounds, n_starts, seed,
                    fit_delay, delay, max_iter, include_center, starts)
    if not out["converged"][0]:
        raise ConvergenceError(f"no start converged within {max_iter} iterations")
    return FitResult(
        params=KineticParams.from_array(out["theta"][0]),
        rss=float(out["rss"][0]),
        converged=True,
        n_iter=int(out["n_iter"][0]),
        start_index=int(out["start_index"][0]),
    )


class KineticFitter(TransformerMixin, BaseEstimator):
    """Pixel-wise 2CXM least-squares fitting as a transformer.

    ``transform`` maps tissue curves (rows) to parameter rows
    ``(Fp, vp, ve, PS, delay)``; ``inverse_transform`` simulates curves.

    Parameters
    ----------
    aif : array_like of shape (n_times,)
        Plasma AIF sampled on the same uniform grid as the tissue curves.
    dt : float
        Sampling interval in seconds.
    bounds : FitBounds, optional
    n_starts : int
    fit_delay : bool
        Fit the bolus delay jointly; when False it is fixed at ``delay``.
    delay : float
    seed : int
        Seed of the Latin-hypercube start design.
    max_iter : int
    """

    def __init__(self, aif=None, dt=1.0, bounds=None, n_starts=10, fit_delay=True, delay=0.0,
                 seed=0, max_iter=500):
        self.aif = aif
        self.dt = dt
        self.bounds = bounds
        self.n_starts = n_starts
        self.fit_delay = fit_delay
        self.delay = delay
        self.seed = seed
        self.max_iter = max_iter

    def _aif_curve(self):
        if self.aif is None:
            raise ValidationError("KineticFitter needs an AIF")
        values = np.asarray(self.aif, dtype=float)
        return SampledCurve(np.arange(values.size) * self.dt, values, "aif")

    def fit(self, X, y=None):
        X = check_curves(X)
        aif = self._aif_curve()
        if X.shape[1] != len(aif):
            raise GridError("tissue curves and AIF differ in length")
        out = fit_batch(aif, X, bounds=self.bounds, n_starts=self.n_starts, seed=self.seed,
                        fit_delay=self.fit_delay, delay=self.delay, max_iter=self.max_iter)
        self.params_ = out["theta"]
        self.rss_ = out["rss"]
        self.converged_ = out["converged"]
        self.start_index_ = out["start_index"]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_curves(X, self.n_features_in_)
        if X.shape[0] != self.params_.shape[0]:
            raise ValidationError("transform expects the curves passed to fit")
        return self.params_.copy()

    def fit_transform(self, X, y=None):
        return self.fit(X).params_.copy()

    def inverse_transform(self, P):
        aif = self._aif_curve()
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return simulate_batch(P, aif.values, aif.dt)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(PARAM_NAMES, dtype=object)
