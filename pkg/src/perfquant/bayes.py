"""Bayesian 2CXM inference with Metropolis-Hastings.

Chains run in sampling coordinates ``z = (log Fp, log vp, log ve, log PS,
delay)``. The box prior is flat in these coordinates inside the bounds;
the optional spatial prior is a Gaussian penalty on log-parameter
differences between 4- (or 8-) connected neighbours. Field inference
alternates checkerboard colours, conditioning each pixel on the current
posterior means of its neighbours.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_curves, grid_indices
from .exceptions import ValidationError
from .model import PARAM_NAMES, KineticParams, PhysioConstants, SampledCurve, simulate_batch
from .nlls import FitBounds, fit_batch, residuals

LOG_PARAMS = 4
SPATIAL_DEFAULT = ("Fp", "vp", "ve", "PS")


def default_prior_box():
    """Physiological support: plasma flow up to 5 ml/min/ml (about 8.7 ml/min/g blood flow).

    The floors are positive because the prior is flat in log coordinates.
    """
    return FitBounds(lower=(0.05, 0.005, 0.01, 0.01, 0.0), upper=(5.0, 0.3, 0.6, 3.0, 10.0))


@dataclass(frozen=True)
class PriorSpec:
    """Prior and noise model.

    Attributes
    ----------
    box : FitBounds
        Uniform support (flat in log-parameter coordinates).
    spatial_weight : float
        Precision of the neighbour log-difference penalty.
    noise_sigma : float or None
        Observation noise SD; ``None`` estimates it per pixel from the
        residual of an initial least-squares fit.
    connectivity : {4, 8}
    spatial_params : tuple of str
        Parameters the spatial penalty acts on.
    """

    box: FitBounds = field(default_factory=default_prior_box)
    spatial_weight: float = 5.0
    noise_sigma: float | None = None
    connectivity: int = 4
    spatial_params: tuple = SPATIAL_DEFAULT

    def __post_init__(self):
        if self.spatial_weight < 0:
            raise ValidationError("spatial_weight must be non-negative")
        if self.noise_sigma is not None and not self.noise_sigma > 0:
            raise ValidationError("noise_sigma must be positive when fixed")
        if self.connectivity not in (4, 8):
            raise ValidationError("connectivity must be 4 or 8")
        if np.any(self.box.lo[:LOG_PARAMS] <= 0):
            raise ValidationError("prior box needs positive lower bounds for Fp, vp, ve, PS")
        unknown = set(self.spatial_params) - set(PARAM_NAMES[:LOG_PARAMS])
        if unknown:
            raise ValidationError(f"spatial prior cannot act on {sorted(unknown)}")

    @property
    def spatial_mask(self):
        return np.array([name in self.spatial_params for name in PARAM_NAMES[:LOG_PARAMS]])


@dataclass(frozen=True)
class SamplerSettings:
    n_iter: int = 20000
    burn_in: int = 5000
    thin: int = 5
    n_sweeps: int = 5
    adapt_every: int = 200
    init_starts: int = 4
    init_radius: int = 0
    fit_delay: bool = True

    def __post_init__(self):
        if self.n_iter <= self.burn_in:
            raise ValidationError("n_iter must exceed burn_in")
        if self.thin < 1 or self.n_sweeps < 1 or self.adapt_every < 1:
            raise ValidationError("thin, n_sweeps and adapt_every must be positive")
        if self.n_iter % self.n_sweeps:
            raise ValidationError("n_iter must be divisible by n_sweeps")


@dataclass
class PosteriorSamples:
    """Post burn-in, thinned draws with summaries.

    ``draws`` has one column per entry of ``names``; index by name with
    ``samples["Fp"]``.
    """

    draws: np.ndarray
    names: tuple
    acceptance_rate: float

    def __getitem__(self, name):
        return self.draws[:, self.names.index(name)]

    @property
    def mean(self):
        return self.draws.mean(axis=0)

    @property
    def sd(self):
        return self.draws.std(axis=0, ddof=1)

    def summary(self):
        return {
            name: {"mean": float(m), "sd": float(s)}
            for name, m, s in zip(self.names, self.mean, self.sd)
        } | {"acceptance_rate": float(self.acceptance_rate)}


def log_likelihood(p, aif, tissue, sigma):
    """Gaussian log-likelihood of the tissue curve under parameters ``p``."""
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    r = residuals(p, aif, tissue)
    n = r.size
    return -0.5 * n * math.log(2 * math.pi * sigma * sigma) - float(r @ r) / (2 * sigma * sigma)


def log_prior(p, spec, neighbors=()):
    """Box prior plus the neighbour log-difference penalty (up to a constant)."""
    theta = p.as_array()
    if not spec.box.contains(theta):
        return -math.inf
    if spec.spatial_weight == 0 or len(neighbors) == 0:
        return 0.0
    sel = spec.spatial_mask
    z = np.log(theta[:LOG_PARAMS][sel])
    total = 0.0
    for nb in neighbors:
        d = z - np.log(nb.as_array()[:LOG_PARAMS][sel])
        total += float(d @ d)
    return -0.5 * spec.spatial_weight * total


def metropolis_hastings(log_target, init, proposal_sd, n_iter, burn_in=0, thin=1, seed=None,
                        names=None, proposal=None, adapt=False):
    """Random-walk Metropolis-Hastings.

    Parameters
    ----------
    log_target : callable
        Unnormalised log density; ``-inf`` marks zero density.
    init : array_like
        Starting state; ``log_target(init)`` must be finite.
    proposal_sd : array_like
        Per-coordinate SD of the Gaussian random-walk proposal.
    proposal : callable, optional
        Symmetric proposal ``proposal(rng, x) -> x_new`` replacing the
        Gaussian random walk.
    adapt : bool
        Rescale ``proposal_sd`` during burn-in towards acceptance 0.2-0.4;
        the scale is frozen afterwards.

    Returns
    -------
    PosteriorSamples
    """
    if n_iter <= burn_in:
        raise ValidationError("n_iter must exceed burn_in")
    rng = np.random.default_rng(seed)
    x = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValidationError("log target is not finite at the initial state")
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=float), x.shape).copy()
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.size))

    steps = rng.standard_normal((n_iter, x.size)) if proposal is None else None
    log_u = np.log(rng.uniform(size=n_iter))
    kept = []
    accepted = 0
    window = 0
    for i in range(n_iter):
        cand = x + sd * steps[i] if proposal is None else proposal(rng, x)
        lp_cand = float(log_target(cand))
        delta = lp_cand - lp
        # delta >= 0 is always accepted since log u < 0
        if log_u[i] < delta:
            x, lp = cand, lp_cand
            if i >= burn_in:
                accepted += 1
            window += 1
        if adapt and i < burn_in and (i + 1) % 100 == 0:
            rate = window / 100
            if rate < 0.2:
                sd *= 0.7
            elif rate > 0.4:
                sd *= 1.4
            window = 0
        if i >= burn_in and (i - burn_in) % thin == 0:
            kept.append(x.copy())
    return PosteriorSamples(np.array(kept), names, accepted / (n_iter - burn_in))


def pixel_seeds(seed, n):
    """Independent per-pixel seed sequences derived from one seed."""
    return np.random.SeedSequence(seed).spawn(n)


def _neighbors(pixels, shape, connectivity):
    """Neighbour index lists (into ``pixels``) for pixels inside the mask."""
    lookup = -np.ones(shape, dtype=int)
    lookup[pixels[:, 0], pixels[:, 1]] = np.arange(len(pixels))
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    nbrs = np.full((len(pixels), len(offsets)), -1, dtype=int)
    for k, (dy, dx) in enumerate(offsets):
        yy = pixels[:, 0] + dy
        xx = pixels[:, 1] + dx
        inside = (yy >= 0) & (yy < shape[0]) & (xx >= 0) & (xx < shape[1])
        nbrs[inside, k] = lookup[yy[inside], xx[inside]]
    return nbrs


def _to_z(theta, d):
    z = np.array(theta[:, :d], dtype=float)
    z[:, :LOG_PARAMS] = np.log(z[:, :LOG_PARAMS])
    return z


def _to_theta(z, delay):
    theta = np.empty((z.shape[0], 5))
    theta[:, :LOG_PARAMS] = np.exp(z[:, :LOG_PARAMS])
    theta[:, 4] = z[:, 4] if z.shape[1] > 4 else delay
    return theta


class _FieldSampler:
    """Lock-step random-walk chains for a set of pixels sharing one AIF."""

    HISTORY = 2000
    MIN_HISTORY = 1000

    def __init__(self, aif, idx, Y, sigma, spec, settings, seeds, theta0, nbrs, fixed_delay):
        self.aif = aif.values
        self.dt = aif.dt
        self.idx = idx
        self.Y = Y
        self.inv2s2 = 1.0 / (2.0 * sigma**2)
        self.spec = spec
        self.s = settings
        self.d = 5 if settings.fit_delay else 4
        self.fixed_delay = fixed_delay
        self.rngs = [np.random.default_rng(sd) for sd in seeds]
        self.nbrs = nbrs
        self.z_lo = _to_z(spec.box.lo[None, :], self.d)[0]
        self.z_hi = _to_z(spec.box.hi[None, :], self.d)[0]
        span = self.z_hi - self.z_lo
        z0 = _to_z(theta0, self.d)
        self.z = np.clip(z0, self.z_lo + 1e-3 * span, self.z_hi - 1e-3 * span)
        self.sel = spec.spatial_mask
        n = len(Y)
        self.nb_mean = self.z[:, :LOG_PARAMS].copy()
        base = np.array([0.05] * LOG_PARAMS + [0.2])[: self.d]
        self.chol = np.broadcast_to(np.diag(base), (n, self.d, self.d)).copy()
        self.scale = np.ones(n)
        self.has_cov = np.zeros(n, dtype=bool)
        self.count = np.zeros(n, dtype=int)
        self.window_acc = np.zeros(n, dtype=int)
        self.accepted = np.zeros(n, dtype=int)
        n_keep = len(range(0, settings.n_iter - settings.burn_in, settings.thin))
        self.kept = np.empty((n, n_keep, self.d))
        self.hist = np.empty((n, self.HISTORY, self.d))
        self.lp = self._log_post(np.arange(n), self.z)

    def _spatial(self, rows):
        """Sufficient statistics of the neighbour penalty for ``rows``."""
        nb = self.nbrs[rows]
        present = nb >= 0
        k = present.sum(axis=1).astype(float)
        means = np.where(present[:, :, None], self.nb_mean[np.where(present, nb, 0)], 0.0)
        means = means[:, :, self.sel]
        return k, means.sum(axis=1), np.einsum("bkj,bkj->b", means, means)

    def _log_post(self, rows, z, stats=None):
        inside = np.all((z >= self.z_lo) & (z <= self.z_hi), axis=1)
        out = np.full(len(rows), -np.inf)
        if not np.any(inside):
            return out
        r_in = rows[inside]
        z_in = z[inside]
        theta = _to_theta(z_in, self.fixed_delay[r_in])
        res = self.Y[r_in] - simulate_batch(theta, self.aif, self.dt)[:, self.idx]
        lp = -np.einsum("ij,ij->i", res, res) * self.inv2s2[r_in]
        w = self.spec.spatial_weight
        if w > 0:
            if stats is None:
                stats = self._spatial(rows)
            k, s1, s2 = (v[inside] for v in stats)
            zs = z_in[:, :LOG_PARAMS][:, self.sel]
            pen = k * np.einsum("ij,ij->i", zs, zs) - 2 * np.einsum("ij,ij->i", zs, s1) + s2
            lp = lp - 0.5 * w * pen
        out[inside] = lp
        return out

    def run_block(self, rows, length):
        """Advance the chains in ``rows`` by ``length`` iterations; return their block means."""
        s = self.s
        # each pixel consumes its own stream in a fixed order, independent of batching
        noise = np.empty((length, rows.size, self.d))
        log_u = np.empty((length, rows.size))
        for j, r in enumerate(rows):
            noise[:, j] = self.rngs[r].standard_normal((length, self.d))
            log_u[:, j] = np.log(self.rngs[r].uniform(size=length))
        stats = self._spatial(rows) if self.spec.spatial_weight > 0 else None
        self.lp[rows] = self._log_post(rows, self.z[rows], stats)
        z = self.z[rows]
        lp = self.lp[rows]
        chol = self.chol[rows]
        scale = self.scale[rows]
        block_sum = np.zeros_like(z)
        c = int(self.count[rows[0]])
        for it in range(length):
            step = np.einsum("bij,bj->bi", chol, noise[it]) * scale[:, None]
            cand = z + step
            lp_cand = self._log_post(rows, cand, stats)
            ok = log_u[it] < lp_cand - lp
            z[ok] = cand[ok]
            lp[ok] = lp_cand[ok]
            block_sum += z
            if c < s.burn_in:
                self.window_acc[rows] += ok
                self.hist[rows, c % self.HISTORY] = z
                if (c + 1) % s.adapt_every == 0:
                    self._adapt(rows, c + 1)
                    chol = self.chol[rows]
                    scale = self.scale[rows]
            else:
                self.accepted[rows] += ok
                if (c - s.burn_in) % s.thin == 0:
                    self.kept[rows, (c - s.burn_in) // s.thin] = z
            c += 1
        self.z[rows] = z
        self.lp[rows] = lp
        self.count[rows] = c
        return block_sum / length

    def _adapt(self, rows, n_seen):
        rate = self.window_acc[rows] / self.s.adapt_every
        self.window_acc[rows] = 0
        factor = np.where(rate < 0.2, 0.7, np.where(rate > 0.4, 1.4, 1.0))
        self.scale[rows] *= factor
        if n_seen < self.MIN_HISTORY:
            return
        m = min(n_seen, self.HISTORY)
        scaled = 2.38**2 / self.d
        for r in rows:
            cov = np.cov(self.hist[r, :m].T) * scaled + 1e-10 * np.eye(self.d)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                continue
            self.chol[r] = chol
            if not self.has_cov[r]:
                self.has_cov[r] = True
                self.scale[r] = 1.0


def _median_start(theta, pixels, shape, radius):
    """Local median of per-pixel least-squares estimates inside the mask.

    Single-pixel fits at low SNR have heavy-tailed errors; the median over a
    small window gives the neighbour means a sane starting point.
    """
    grid = np.full((5,) + tuple(shape), np.nan)
    grid[:, pixels[:, 0], pixels[:, 1]] = theta.T
    out = np.empty_like(theta)
    for i, (y, x) in enumerate(pixels):
        win = grid[:, max(y - radius, 0) : y + radius + 1, max(x - radius, 0) : x + radius + 1]
        out[i] = np.nanmedian(win.reshape(5, -1), axis=1)
    return out


def infer_field(aif, tissue_stack, mask, spec=None, seed=0, settings=None, times=None):
    """Posterior inference for every pixel inside ``mask``.

    Parameters
    ----------
    aif : SampledCurve
        Plasma AIF on a uniform grid starting at 0.
    tissue_stack : ndarray, shape (nt, ny, nx)
        Tissue concentration curves.
    mask : ndarray of bool, shape (ny, nx)
    spec : PriorSpec
    seed : int
        Root seed; pixel ``i`` (raster order in the mask) uses
        ``pixel_seeds(seed, n)[i]``.
    settings : SamplerSettings

    Returns
    -------
    dict with ``samples`` (list of PosteriorSamples in raster order),
    ``mean`` and ``sd`` maps of shape (5, ny, nx) in boundary units,
    ``pixels`` (n, 2) and ``sigma`` (n,).
    """
    spec = PriorSpec() if spec is None else spec
    settings = SamplerSettings() if settings is None else settings
    stack = np.asarray(tissue_stack, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if stack.ndim != 3 or stack.shape[1:] != mask.shape:
        raise ValidationError("tissue_stack must have shape (nt, ny, nx) matching the mask")
    pixels = np.argwhere(mask)
    if len(pixels) == 0:
        raise ValidationError("mask is empty")
    Y = check_curves(stack[:, pixels[:, 0], pixels[:, 1]].T)
    seeds = pixel_seeds(seed, len(pixels))
    samples, sigma, z_mean = _infer(aif, Y, pixels, mask.shape, spec, settings, seeds, times)
    names = PARAM_NAMES
    mean = np.zeros((5,) + mask.shape)
    sd = np.zeros((5,) + mask.shape)
    for i, (y, x) in enumerate(pixels):
        mean[:, y, x] = samples[i].mean
        sd[:, y, x] = samples[i].sd
    return {"samples": samples, "mean": mean, "sd": sd, "pixels": pixels, "sigma": sigma,
            "names": names}


def infer_pixel(aif, tissue, spec=None, seed=0, settings=None):
    """Posterior samples for one tissue curve (no spatial neighbours)."""
    spec = PriorSpec() if spec is None else spec
    settings = SamplerSettings() if settings is None else settings
    idx = grid_indices(aif.times, tissue.times)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    samples, _, _ = _infer(aif, tissue.values[None, :], np.zeros((1, 2), dtype=int), (1, 1),
                           spec, settings, [seq], aif.times[idx])
    return samples[0]


def _infer(aif, Y, pixels, shape, spec, settings, seeds, times):
    idx = np.arange(len(aif)) if times is None else grid_indices(aif.times, times)
    if Y.shape[1] != idx.size:
        raise ValidationError("tissue curves and sampling times differ in length")
    init = fit_batch(aif, Y, aif.times[idx], bounds=spec.box, n_starts=settings.init_starts,
                     seed=0, fit_delay=True)
    theta0 = init["theta"]
    if spec.spatial_weight > 0 and settings.init_radius > 0:
        theta0 = _median_start(theta0, pixels, shape, settings.init_radius)
    n_free = 5
    if spec.noise_sigma is None:
        sigma = np.sqrt(init["rss"] / max(idx.size - n_free, 1))
        floor = 1e-6 * np.max(np.abs(Y), axis=1) + 1e-12
        sigma = np.maximum(sigma, floor)
    else:
        sigma = np.full(len(Y), float(spec.noise_sigma))
    nbrs = _neighbors(pixels, shape, spec.connectivity)
    sampler = _FieldSampler(aif, idx, Y, sigma, spec, settings, seeds, theta0, nbrs,
                            theta0[:, 4].copy())
    color = (pixels[:, 0] + pixels[:, 1]) % 2
    groups = [np.flatnonzero(color == c) for c in (0, 1)]
    block = settings.n_iter // settings.n_sweeps
    for _ in range(settings.n_sweeps):
        for rows in groups:
            if rows.size == 0:
                continue
            block_mean = sampler.run_block(rows, block)
            sampler.nb_mean[rows] = block_mean[:, :LOG_PARAMS]
    samples = []
    for i in range(len(Y)):
        z = np.asarray(sampler.kept[i])
        theta = _to_theta(z, np.full(len(z), sampler.fixed_delay[i]))
        rate = sampler.accepted[i] / (settings.n_iter - settings.burn_in)
        samples.append(PosteriorSamples(theta, PARAM_NAMES, float(rate)))
    return samples, sigma, sampler.z


def mbf_map(params_map, constants=PhysioConstants()):
    """Myocardial blood flow (ml/min/g) from a plasma-flow map."""
    return params_map / ((1.0 - constants.hct) * constants.density)


class BayesianKineticFitter(TransformerMixin, BaseEstimator):
    """Posterior-mean 2CXM parameter maps with an optional spatial prior.

    ``fit`` takes a concentration stack ``(nt, ny, nx)`` and a mask;
    ``transform`` returns the posterior-mean parameter rows for the mask
    pixels (raster order).

    Parameters
    ----------
    aif : array_like of shape (n_times,)
    dt : float
    spatial_weight : float
    noise_sigma : float or None
    n_iter, burn_in, thin, n_sweeps : int
    seed : int
    """

    def __init__(self, aif=None, dt=1.0, spatial_weight=5.0, noise_sigma=None, n_iter=20000,
                 burn_in=5000, thin=5, n_sweeps=5, seed=0):
        self.aif = aif
        self.dt = dt
        self.spatial_weight = spatial_weight
        self.noise_sigma = noise_sigma
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.n_sweeps = n_sweeps
        self.seed = seed

    def fit(self, X, y=None, mask=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ValidationError("X must be a (nt, ny, nx) concentration stack")
        mask = np.ones(X.shape[1:], dtype=bool) if mask is None else np.asarray(mask, bool)
        values = np.asarray(self.aif, dtype=float)
        aif = SampledCurve(np.arange(values.size) * self.dt, values, "aif")
        spec = PriorSpec(spatial_weight=self.spatial_weight, noise_sigma=self.noise_sigma)
        settings = SamplerSettings(n_iter=self.n_iter, burn_in=self.burn_in, thin=self.thin,
                                   n_sweeps=self.n_sweeps)
        out = infer_field(aif, X, mask, spec, self.seed, settings)
        self.mean_ = out["mean"]
        self.sd_ = out["sd"]
        self.samples_ = out["samples"]
        self.pixels_ = out["pixels"]
        self.mask_ = mask
        return self

    def transform(self, X=None):
        check_is_fitted(self, "mean_")
        return self.mean_[:, self.pixels_[:, 0], self.pixels_[:, 1]].T

    def fit_transform(self, X, y=None, mask=None):
        return self.fit(X, mask=mask).transform(X)


__all__ = [
    "PriorSpec",
    "SamplerSettings",
    "PosteriorSamples",
    "KineticParams",
    "log_likelihood",
    "log_prior",
    "metropolis_hastings",
    "infer_pixel",
    "infer_field",
    "pixel_seeds",
    "BayesianKineticFitter",
]
