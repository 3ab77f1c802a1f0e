"""Two-compartment exchange model (2CXM) of myocardial tracer kinetics.

The tissue concentration is the convolution of the flow-scaled residue
function with the (delayed) arterial input function::

    C_myo(t) = R_F(t) * C_aif(t - delay)
    R_F(t)   = Fp * (A exp(alpha t) + (1 - A) exp(beta t))

Kinetic parameters cross the API boundary in the customary units
(flows in ml/min/ml, delay in seconds) and are converted to per-second
rates exactly once, in :func:`_rates`.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_times, grid_indices, uniform_step
from .exceptions import DegenerateRootsError, GridError, StepSizeError, ValidationError

PARAM_NAMES = ("Fp", "vp", "ve", "PS", "delay")
ROOT_EPS = 1e-10
ODE_STABILITY = 0.1


@dataclass(frozen=True)
class KineticParams:
    """2CXM parameter vector.

    Attributes
    ----------
    Fp : float
        Plasma flow, ml/min/ml.
    vp, ve : float
        Fractional plasma and interstitial volumes.
    PS : float
        Permeability-surface area product, ml/min/ml.
    delay : float
        Bolus arrival delay in seconds.
    """

    Fp: float
    vp: float
    ve: float
    PS: float
    delay: float = 0.0

    def validate(self):
        if not all(np.isfinite(v) for v in self.as_array()):
            raise ValidationError(f"non-finite kinetic parameter in {self}")
        if self.Fp <= 0:
            raise ValidationError(f"Fp must be positive, got {self.Fp}")
        if not 0 < self.vp < 1 or not 0 < self.ve < 1:
            raise ValidationError(f"volumes must lie in (0, 1): vp={self.vp}, ve={self.ve}")
        if self.vp + self.ve > 1:
            raise ValidationError(f"vp + ve must not exceed 1, got {self.vp + self.ve}")
        if self.PS < 0:
            raise ValidationError(f"PS must be non-negative, got {self.PS}")
        if self.delay < 0:
            raise ValidationError(f"delay must be non-negative, got {self.delay}")
        return self

    @property
    def is_valid(self):
        try:
            self.validate()
        except ValidationError:
            return False
        return True

    def as_array(self):
        return np.array([self.Fp, self.vp, self.ve, self.PS, self.delay], dtype=float)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 4:
            values = np.append(values, 0.0)
        return cls(*(float(v) for v in values))

    def to_dict(self):
        return {
            "Fp_ml_min_ml": self.Fp,
            "vp": self.vp,
            "ve": self.ve,
            "PS_ml_min_ml": self.PS,
            "delay_s": self.delay,
        }

    @classmethod
    def from_dict(cls, d):
        expected = {"Fp_ml_min_ml", "vp", "ve", "PS_ml_min_ml", "delay_s"}
        unknown = set(d) - expected
        if unknown:
            raise ValidationError(f"unknown kinetic parameter keys: {sorted(unknown)}")
        try:
            return cls(
                Fp=float(d["Fp_ml_min_ml"]),
                vp=float(d["vp"]),
                ve=float(d["ve"]),
                PS=float(d["PS_ml_min_ml"]),
                delay=float(d.get("delay_s", 0.0)),
            )
        except KeyError as exc:
            raise ValidationError(f"missing kinetic parameter key {exc}") from None

    def with_delay(self, delay):
        return replace(self, delay=float(delay))


@dataclass(frozen=True)
class SampledCurve:
    """A time series: AIF, tissue concentration or signal intensity."""

    times: np.ndarray
    values: np.ndarray
    kind: str = "tissue"

    def __post_init__(self):
        t = check_times(self.times, "times")
        v = np.asarray(self.values, dtype=float)
        if v.shape != t.shape:
            raise ValidationError(f"times and values differ in length: {t.shape} vs {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("curve values must be finite")
        if self.kind not in ("aif", "tissue", "signal"):
            raise ValidationError(f"unknown curve kind {self.kind!r}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size

    @property
    def dt(self):
        return uniform_step(self.times)

    def with_values(self, values, kind=None):
        return SampledCurve(self.times, values, self.kind if kind is None else kind)


@dataclass(frozen=True)
class PhysioConstants:
    hct: float = 0.45
    density: float = 1.05

    def __post_init__(self):
        if not 0 < self.hct < 1:
            raise ValidationError(f"haematocrit must lie in (0, 1), got {self.hct}")
        if self.density <= 0:
            raise ValidationError(f"density must be positive, got {self.density}")


@dataclass(frozen=True)
class ResidueCoefficients:
    """Exponential rates (1/s) and fast-mode weight of the residue function."""

    alpha: float
    beta: float
    A: float
    confluent: bool = field(default=False)


def _rates(theta):
    """Per-second rates for an array of parameter rows ``(..., >=4)``.

    Returns ``(alpha, beta, A, Fp_per_s, gap)`` where ``alpha`` is the root
    of larger magnitude. ``beta`` is obtained from Vieta's product formula,
    which avoids cancellation when PS is small.
    """
    theta = np.asarray(theta, dtype=float)
    fp = theta[..., 0] / 60.0
    vp = theta[..., 1]
    ve = theta[..., 2]
    ps = theta[..., 3] / 60.0
    x = fp / vp
    y = ps / ve
    z = ps / vp
    b = x + y + z
    # b^2 - 4xy rewritten as a sum of non-negative terms
    disc = np.sqrt((x - y) ** 2 + z * z + 2.0 * z * (x + y))
    alpha = -0.5 * (b + disc)
    beta = (x * y) / alpha
    gap = alpha - beta
    with np.errstate(divide="ignore", invalid="ignore"):
        A = (alpha + y + z) / gap
    return alpha, beta, A, fp, gap


def residue_coefficients(p, allow_confluent=True):
    """Roots of ``s^2 + s(Fp/vp + PS/vp + PS/ve) + (Fp/vp)(PS/ve)`` and weight ``A``.

    Parameters
    ----------
    p : KineticParams
    allow_confluent : bool
        When the two roots coincide (relative gap below 1e-10), return the
        confluent limit instead of raising :class:`DegenerateRootsError`.
        In the confluent limit ``A`` holds the linear-term coefficient
        ``alpha + PS/vp + PS/ve`` of ``exp(alpha t) (1 + A t)``.
    """
    p.validate()
    alpha, beta, A, _, gap = _rates(p.as_array())
    alpha, beta, gap = float(alpha), float(beta), float(gap)
    if abs(gap) < ROOT_EPS * max(abs(alpha), abs(beta)):
        if not allow_confluent:
            raise DegenerateRootsError(f"residue rates coincide: alpha={alpha}, beta={beta}")
        c = (p.PS / 60.0) * (1.0 / p.vp + 1.0 / p.ve)
        return ResidueCoefficients(alpha, alpha, alpha + c, confluent=True)
    return ResidueCoefficients(alpha, beta, float(A))


def residue_function(p, t, allow_confluent=True):
    """Flow-scaled residue function ``Fp (A e^{alpha t} + (1-A) e^{beta t})``.

    The returned value has units of 1/s (plasma flow per second).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("residue function is defined for t >= 0")
    coef = residue_coefficients(p, allow_confluent=allow_confluent)
    fp = p.Fp / 60.0
    if coef.confluent:
        return fp * np.exp(coef.alpha * t) * (1.0 + coef.A * t)
    return fp * (coef.A * np.exp(coef.alpha * t) + (1.0 - coef.A) * np.exp(coef.beta * t))


def apply_delay(aif, tau):
    """Shift a curve right by ``tau`` seconds on its own grid.

    Values are linearly interpolated; samples before the shifted onset are 0.
    """
    if tau < 0:
        raise ValidationError(f"delay must be non-negative, got {tau}")
    if tau == 0:
        return aif
    dt = aif.dt
    shifted = _delay_rows(aif.values[None, :], np.array([tau / dt]))[0]
    return aif.with_values(shifted)


def _delay_rows(values, shift):
    """Shift each row of ``values`` right by ``shift`` samples (fractional)."""
    values = np.asarray(values, dtype=float)
    nt = values.shape[-1]
    shift = np.asarray(shift, dtype=float)
    padded = np.concatenate([np.zeros(values.shape[:-1] + (1,)), values], axis=-1)
    pos = np.arange(nt)[None, :] - shift[:, None]
    i0 = np.floor(pos)
    frac = pos - i0
    i0 = i0.astype(int)
    lo = np.clip(i0, -1, nt - 1) + 1
    hi = np.clip(i0 + 1, -1, nt - 1) + 1
    if values.shape[0] == 1:
        row = padded[0]
        return (1.0 - frac) * row[lo] + frac * row[hi]
    rows = np.arange(values.shape[0])[:, None]
    return (1.0 - frac) * padded[rows, lo] + frac * padded[rows, hi]


def _linear_weights(x):
    """Integrals of ``e^{xv} v`` and ``e^{xv} (1 - v)`` over ``v`` in [0, 1]."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    e = np.exp(xs)
    p_big = (e * (xs - 1.0) + 1.0) / (xs * xs)
    q_big = np.expm1(xs) / xs - p_big
    # Taylor series: sum x^n / (n! (n+2)) and sum x^n / (n! (n+1) (n+2))
    p_small = 1 / 2 + x / 3 + x**2 / 8 + x**3 / 30 + x**4 / 144
    q_small = 1 / 2 + x / 6 + x**2 / 24 + x**3 / 120 + x**4 / 720
    return np.where(small, p_small, p_big), np.where(small, q_small, q_big)


def _exp_convolve(rate, a, dt):
    """Exact convolution of ``exp(rate t)`` with piecewise-linear samples ``a``.

    ``rate`` has shape (B,), ``a`` shape (B, nt) or (nt,). Returns (B, nt).
    """
    rate = np.asarray(rate, dtype=float)
    a = np.broadcast_to(a, rate.shape + (np.shape(a)[-1],))
    x = rate * dt
    P, Q = _linear_weights(x)
    decay = np.exp(x)
    u = dt * (P[:, None] * a[:, :-1] + Q[:, None] * a[:, 1:])
    out = np.empty(a.shape)
    out[:, 0] = 0.0
    c = np.zeros(rate.shape)
    for k in range(u.shape[1]):
        c = decay * c + u[:, k]
        out[:, k + 1] = c
    return out


def simulate_batch(theta, aif_values, dt):
    """Tissue curves for a batch of parameter rows on the AIF grid.

    Parameters
    ----------
    theta : ndarray, shape (B, 5)
        Rows of (Fp, vp, ve, PS, delay) in boundary units. Not validated.
    aif_values : ndarray, shape (nt,)
        AIF samples on a uniform grid starting at t = 0.
    dt : float
        Sampling interval in seconds.

    Returns
    -------
    ndarray, shape (B, nt)
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    aif_values = np.asarray(aif_values, dtype=float)
    delays = theta[:, 4] if theta.shape[1] > 4 else np.zeros(theta.shape[0])
    if np.any(delays != 0):
        a = _delay_rows(aif_values[None, :], delays / dt)
    else:
        a = aif_values[None, :]
    alpha, beta, A, fp, _ = _rates(theta)
    B = theta.shape[0]
    a2 = np.broadcast_to(a, (B, aif_values.size))
    conv = _exp_convolve(np.concatenate([alpha, beta]), np.concatenate([a2, a2]), dt)
    return fp[:, None] * (A[:, None] * conv[:B] + (1.0 - A)[:, None] * conv[B:])


def _trapezoid_convolve(kernel, a, dt):
    full = np.convolve(kernel, a)[: a.size]
    return dt * (full - 0.5 * (kernel[0] * a + kernel * a[0]))


def forward_model(p, aif, times=None, quadrature="linear"):
    """Tissue concentration curve for parameters ``p`` and arterial input ``aif``.

    Parameters
    ----------
    p : KineticParams
    aif : SampledCurve
        Plasma AIF on a uniform grid starting at t = 0.
    times : array_like, optional
        Output times; must lie on the AIF grid. Defaults to the whole grid.
    quadrature : {"linear", "trapezoid"}
        ``"linear"`` integrates each exponential exactly against the linearly
        interpolated AIF. ``"trapezoid"`` applies the trapezoidal rule to
        sampled residue values (second-order accurate in ``dt``).
    """
    p.validate()
    dt = aif.dt
    if abs(aif.times[0]) > 1e-9 * dt:
        raise GridError("AIF grid must start at t = 0")
    idx = np.arange(len(aif)) if times is None else grid_indices(aif.times, times)
    shifted = apply_delay(aif, p.delay).values
    coef = residue_coefficients(p)
    if quadrature == "trapezoid" or coef.confluent:
        kernel = residue_function(p, aif.times - aif.times[0])
        values = _trapezoid_convolve(kernel, shifted, dt)
    elif quadrature == "linear":
        values = simulate_batch(p.as_array()[None, :], aif.values, dt)[0]
    else:
        raise ValidationError(f"unknown quadrature {quadrature!r}")
    return SampledCurve(aif.times[idx], values[idx], "tissue")


def ode_oracle(p, aif, times=None, step=None):
    """Integrate the coupled plasma/interstitial ODEs with classical RK4.

    The delayed AIF is linearly interpolated between samples (including the
    half steps). The default step is the largest integer subdivision of the
    AIF interval with ``step * max|rate| <= 0.1``; an explicit ``step``
    beyond that guard raises :class:`StepSizeError`.
    """
    p.validate()
    dt = aif.dt
    idx = np.arange(len(aif)) if times is None else grid_indices(aif.times, times)
    coef = residue_coefficients(p)
    fastest = max(abs(coef.alpha), abs(coef.beta))
    if step is None:
        substeps = max(1, int(np.ceil(dt * fastest / ODE_STABILITY - 1e-12)))
    else:
        if step * fastest > ODE_STABILITY:
            raise StepSizeError(
                f"step {step} s exceeds the stability guard for rate {fastest:.4g} 1/s"
            )
        substeps = int(round(dt / step))
        if substeps < 1 or abs(substeps * step - dt) > 1e-9 * dt:
            raise StepSizeError("step must divide the AIF sampling interval")
    h = dt / substeps

    fp, ps = p.Fp / 60.0, p.PS / 60.0
    vp, ve = p.vp, p.ve
    a = apply_delay(aif, p.delay).values

    def rhs(cp, ce, ca):
        return (fp * (ca - cp) + ps * (ce - cp)) / vp, ps * (cp - ce) / ve

    cp = ce = 0.0
    out = np.zeros(len(aif))
    out[0] = 0.0
    for k in range(len(aif) - 1):
        a0, a1 = a[k], a[k + 1]
        for j in range(substeps):
            s0 = j / substeps
            s1 = (j + 0.5) / substeps
            s2 = (j + 1) / substeps
            c0 = a0 + (a1 - a0) * s0
            cm = a0 + (a1 - a0) * s1
            c1 = a0 + (a1 - a0) * s2
            k1p, k1e = rhs(cp, ce, c0)
            k2p, k2e = rhs(cp + 0.5 * h * k1p, ce + 0.5 * h * k1e, cm)
            k3p, k3e = rhs(cp + 0.5 * h * k2p, ce + 0.5 * h * k2e, cm)
            k4p, k4e = rhs(cp + h * k3p, ce + h * k3e, c1)
            cp += h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
            ce += h / 6.0 * (k1e + 2 * k2e + 2 * k3e + k4e)
        out[k + 1] = vp * cp + ve * ce
    return SampledCurve(aif.times[idx], out[idx], "tissue")


def to_blood_units(p, c=PhysioConstants()):
    """Blood flow in ml/min/g and blood volume fraction from plasma parameters."""
    fb = p.Fp / ((1.0 - c.hct) * c.density)
    vb = p.vp / (1.0 - c.hct)
    return fb, vb


def from_blood_units(mbf, vb, ve, ps_per_g, delay=0.0, c=PhysioConstants()):
    """Inverse of :func:`to_blood_units`, with PS given per gram of tissue."""
    return KineticParams(
        Fp=mbf * (1.0 - c.hct) * c.density,
        vp=vb * (1.0 - c.hct),
        ve=ve,
        PS=ps_per_g * c.density,
        delay=delay,
    )


def plasma_aif(blood_aif, c=PhysioConstants()):
    """Convert an arterial blood concentration curve to plasma concentration."""
    return blood_aif.with_values(blood_aif.values / (1.0 - c.hct), kind="aif")


def gamma_variate(times, peak=5.0, shape=2.5, scale=4.0, onset=5.0):
    """Gamma-variate bolus ``(t - onset)^shape exp(-(t - onset)/scale)`` scaled to ``peak``."""
    t = np.asarray(times, dtype=float) - onset
    tp = np.where(t > 0, t, 0.0)
    curve = np.where(t > 0, tp**shape * np.exp(-tp / scale), 0.0)
    # the mode of the gamma variate sits at shape * scale
    mode = (shape * scale) ** shape * np.exp(-shape)
    return peak * curve / mode
