"""Synthetic short-axis perfusion phantom with known ground truth.

Geometry: a myocardial annulus around an LV blood pool, an RV blood pool
outside the annulus and a static textured body ellipse. Tissue curves come
from the 2CXM forward model, pass through the relaxivity and signal
equations, then receive Gaussian noise in signal space and a per-frame
translation.
"""

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import ValidationError
from .model import (
    PARAM_NAMES,
    KineticParams,
    PhysioConstants,
    SampledCurve,
    from_blood_units,
    gamma_variate,
    simulate_batch,
    to_blood_units,
)
from .moco import ImageSeries, apply_shifts
from .signal import SequenceParams, T1_from_gd, signal_from_T1

LAYERS = ("endo", "epi", "transmural")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _default_background():
    return ParamsModel.from_params(from_blood_units(1.93, 0.08, 0.18, 0.65, delay=1.5))


class ParamsModel(_Strict):
    """Kinetic parameters in plasma units (flows in ml/min/ml)."""

    Fp_ml_min_ml: float = Field(gt=0)
    vp: float = Field(gt=0, lt=1)
    ve: float = Field(gt=0, lt=1)
    PS_ml_min_ml: float = Field(ge=0)
    delay_s: float = Field(default=0.0, ge=0)

    def to_params(self):
        return KineticParams.from_dict(self.model_dump())

    @classmethod
    def from_params(cls, p):
        return cls(**p.to_dict())


class DefectModel(_Strict):
    """Region of altered kinetics: an angular range of one layer (or both).

    Angles are in degrees, counterclockwise from the anterior RV insertion
    point, the same origin used for segment assignment. Give either
    replacement ``params`` or a ``flow_scale`` applied to the background Fp.
    """

    angle_start_deg: float
    angle_end_deg: float
    layer: Literal["endo", "epi", "transmural"] = "transmural"
    params: ParamsModel | None = None
    flow_scale: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.params is None) == (self.flow_scale is None):
            raise ValueError("give exactly one of params or flow_scale")
        if not 0 < (self.angle_end_deg - self.angle_start_deg) <= 360:
            raise ValueError("angle range must be increasing and span at most 360 degrees")
        return self


class AifModel(_Strict):
    """Gamma-variate blood AIF; ``peak`` is the main-bolus blood concentration."""

    shape: float = Field(default=2.5, gt=0)
    scale_s: float = Field(default=4.0, gt=0)
    onset_s: float = Field(default=5.0, ge=0)
    peak_mmol_L: float = Field(default=5.0, gt=0)
    rv_lead_s: float = Field(default=3.0, ge=0)


class PhantomSpec(_Strict):
    """Full phantom description (JSON-serialisable)."""

    ny: int = Field(default=64, ge=16)
    nx: int = Field(default=64, ge=16)
    center: tuple[float, float] = (32.0, 36.0)
    r_inner: float = Field(default=7.0, gt=0)
    r_outer: float = Field(default=13.0, gt=0)
    rv_radius: float = Field(default=6.0, gt=0)
    rv_angle_deg: float = 180.0
    body_radii: tuple[float, float] = (29.0, 30.0)
    slice_level: Literal["basal", "mid", "apical"] = "mid"
    background: ParamsModel = Field(default_factory=_default_background)
    defects: list[DefectModel] = Field(default_factory=list)
    aif: AifModel = Field(default_factory=AifModel)
    sequence: dict = Field(default_factory=lambda: SequenceParams().to_dict())
    hct: float = Field(default=0.45, gt=0, lt=1)
    density: float = Field(default=1.05, gt=0)
    t10_myo_s: float = Field(default=1.2, gt=0)
    t10_blood_s: float = Field(default=1.8, gt=0)
    t10_body_s: float = Field(default=1.0, gt=0)
    proton_density: float = Field(default=1000.0, gt=0)
    noise_sd: float = Field(default=0.0, ge=0)
    motion: list[tuple[float, float]] | None = None
    nt: int = Field(default=90, ge=10)
    dt: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.r_outer <= self.r_inner:
            raise ValueError("r_outer must exceed r_inner")
        cy, cx = self.center
        if (cy - self.r_outer < 0 or cx - self.r_outer < 0 or cy + self.r_outer >= self.ny
                or cx + self.r_outer >= self.nx):
            raise ValueError("annulus does not fit inside the grid")
        if self.motion is not None and len(self.motion) != self.nt:
            raise ValueError("motion trace needs one (dy, dx) per frame")
        SequenceParams.from_dict(self.sequence)
        times = np.arange(self.nt) * self.dt
        blood = self.blood_aif_values(times)
        if blood[-1] > 0.05 * blood.max():
            raise ValueError("sampling window does not cover the AIF")
        return self

    @property
    def physio(self):
        return PhysioConstants(hct=self.hct, density=self.density)

    @property
    def seq(self):
        return SequenceParams.from_dict(self.sequence)

    @property
    def times(self):
        return np.arange(self.nt) * self.dt

    def blood_aif_values(self, times, lead=0.0):
        a = self.aif
        return gamma_variate(times, a.peak_mmol_L, a.shape, a.scale_s, a.onset_s - lead)


def sinusoidal_motion(nt, amplitude=4.0, period=12.0, dt=1.0, direction=(1.0, 0.3)):
    """Breathing-like translation trace, zero at frame 0, peak ``amplitude`` px."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    phase = np.sin(2 * np.pi * np.arange(nt) * dt / period)
    return [(float(amplitude * phase[i] * d[0]), float(amplitude * phase[i] * d[1]))
            for i in range(nt)]


@dataclass
class Phantom:
    """Generated images plus everything needed to score an analysis of them."""

    series: ImageSeries
    truth: dict
    mask: np.ndarray
    lv_mask: np.ndarray
    rv_mask: np.ndarray
    rv_points: tuple
    concentration: np.ndarray
    aif_blood: SampledCurve
    aif_plasma: SampledCurve
    t10: np.ndarray
    motion: np.ndarray
    spec: PhantomSpec


def polar_coordinates(shape, center):
    """Radius and counterclockwise angle (radians in [0, 2pi)) of each pixel, y pointing down."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    dy = yy - center[0]
    dx = xx - center[1]
    return np.hypot(dy, dx), np.mod(np.arctan2(-dy, dx), 2 * np.pi)


def point_at(center, radius, angle):
    return (center[0] - radius * math.sin(angle), center[1] + radius * math.cos(angle))


def rv_insertion_points(spec):
    """(anterior, inferior) insertion points on the outer myocardial boundary."""
    theta = math.radians(spec.rv_angle_deg)
    half = math.radians(60.0)
    return (point_at(spec.center, spec.r_outer, theta - half),
            point_at(spec.center, spec.r_outer, theta + half))


def _layer_masks(spec, radius):
    mid = 0.5 * (spec.r_inner + spec.r_outer)
    return radius <= mid, radius > mid


def _geometry(spec):
    shape = (spec.ny, spec.nx)
    radius, angle = polar_coordinates(shape, spec.center)
    mask = (radius >= spec.r_inner) & (radius <= spec.r_outer)
    lv = radius < spec.r_inner
    rv_c = point_at(spec.center, spec.r_outer + spec.rv_radius + 1.0, math.radians(spec.rv_angle_deg))
    yy, xx = np.mgrid[0 : spec.ny, 0 : spec.nx].astype(float)
    rv = np.hypot(yy - rv_c[0], xx - rv_c[1]) <= spec.rv_radius
    by, bx = spec.body_radii
    body = ((yy - spec.ny / 2 + 0.5) / by) ** 2 + ((xx - spec.nx / 2 + 0.5) / bx) ** 2 <= 1.0
    return radius, angle, mask, lv, rv & ~mask, body


def _relative_angle(angle, spec):
    anterior = math.radians(spec.rv_angle_deg - 60.0)
    return np.degrees(np.mod(angle - anterior, 2 * np.pi))


def parameter_maps(spec):
    """Ground-truth (5, ny, nx) plasma-unit parameter maps and the myocardial mask."""
    radius, angle, mask, *_ = _geometry(spec)
    base = spec.background.to_params().as_array()
    maps = np.zeros((5, spec.ny, spec.nx))
    maps[:, mask] = base[:, None]
    rel = _relative_angle(angle, spec)
    endo, epi = _layer_masks(spec, radius)
    for d in spec.defects:
        start = d.angle_start_deg % 360.0
        stop = start + (d.angle_end_deg - d.angle_start_deg)
        in_range = ((rel >= start) & (rel < stop)) | ((rel + 360.0 >= start) & (rel + 360.0 < stop))
        layer = {"endo": endo, "epi": epi, "transmural": np.ones_like(mask)}[d.layer]
        region = mask & in_range & layer
        if d.params is not None:
            values = d.params.to_params().as_array()
        else:
            values = base.copy()
            values[0] *= d.flow_scale
        maps[:, region] = values[:, None]
    return maps, mask


def _texture(spec):
    """Smooth deterministic anatomy texture (gives registration something to lock on)."""
    yy, xx = np.mgrid[0 : spec.ny, 0 : spec.nx].astype(float)
    return 1.0 + 0.2 * np.sin(2 * np.pi * yy / 17.0) * np.cos(2 * np.pi * xx / 23.0) \
        + 0.1 * np.cos(2 * np.pi * (xx + yy) / 29.0)


def generate_phantom(spec=None, seed=0):
    """Synthesize the phantom series for ``spec`` with noise drawn from ``seed``."""
    spec = PhantomSpec() if spec is None else spec
    seq = spec.seq
    times = spec.times
    physio = spec.physio
    radius, angle, mask, lv, rv, body = _geometry(spec)
    maps, _ = parameter_maps(spec)

    blood = spec.blood_aif_values(times)
    rv_blood = spec.blood_aif_values(times, spec.aif.rv_lead_s)
    aif_blood = SampledCurve(times, blood, "aif")
    aif_plasma = aif_blood.with_values(blood / (1.0 - physio.hct), kind="aif")

    conc = np.zeros((spec.nt, spec.ny, spec.nx))
    rows = maps[:, mask].T
    unique, inverse = np.unique(rows, axis=0, return_inverse=True)
    curves = simulate_batch(unique, aif_plasma.values, spec.dt)
    conc[:, mask] = curves[inverse.ravel()].T
    conc[:, lv] = blood[:, None]
    conc[:, rv] = rv_blood[:, None]

    t10 = np.full((spec.ny, spec.nx), spec.t10_body_s)
    t10[mask] = spec.t10_myo_s
    t10[lv | rv] = spec.t10_blood_s
    pd = np.where(body | mask | lv | rv, spec.proton_density * _texture(spec), 0.0)
    pd[mask] = spec.proton_density
    pd[lv | rv] = spec.proton_density

    r1 = seq.r1
    T1 = 1.0 / (1.0 / t10[None] + r1 * conc)
    unit = SequenceParams(TR=seq.TR, TSAT=seq.TSAT, alpha=seq.alpha, n=seq.n, r1=r1)
    frames = pd[None] * signal_from_T1(unit, T1)
    rng = np.random.default_rng(seed)
    if spec.noise_sd > 0:
        frames = frames + rng.normal(0.0, spec.noise_sd, frames.shape)
    motion = np.zeros((spec.nt, 2)) if spec.motion is None else np.asarray(spec.motion, float)
    if np.any(motion):
        frames = apply_shifts(frames, motion)

    fb, vb = to_blood_units(KineticParams(*maps), physio)
    truth = {name: maps[i] for i, name in enumerate(PARAM_NAMES)}
    truth["MBF"] = np.where(mask, fb, 0.0)
    truth["vb"] = np.where(mask, vb, 0.0)
    return Phantom(
        series=ImageSeries(frames),
        truth=truth,
        mask=mask,
        lv_mask=lv,
        rv_mask=rv,
        rv_points=rv_insertion_points(spec),
        concentration=conc,
        aif_blood=aif_blood,
        aif_plasma=aif_plasma,
        t10=t10,
        motion=motion,
        spec=spec,
    )


def peak_enhancement(spec):
    """Peak signal rise of background myocardium above its baseline."""
    seq = spec.seq
    p = spec.background.to_params()
    aif = spec.blood_aif_values(spec.times) / (1.0 - spec.hct)
    curve = simulate_batch(p.as_array()[None], aif, spec.dt)[0]
    unit = SequenceParams(TR=seq.TR, TSAT=seq.TSAT, alpha=seq.alpha, n=seq.n, r1=seq.r1)
    s = spec.proton_density * signal_from_T1(unit, T1_from_gd(replace_t10(seq, spec.t10_myo_s), curve))
    return float(np.max(s) - s[0])


def replace_t10(seq, t10):
    return SequenceParams(TR=seq.TR, TSAT=seq.TSAT, alpha=seq.alpha, n=seq.n, r1=seq.r1, T10=t10)


def noise_sd_for_snr(spec, snr_db):
    """Signal-space noise SD giving ``20 log10(peak enhancement / sd) = snr_db``."""
    return peak_enhancement(spec) / 10.0 ** (snr_db / 20.0)


def territory_defect(territory, slice_level="mid", flow_scale=0.6, layer="transmural"):
    """Defect covering one coronary territory of a slice (angles in segment order)."""
    from .analysis import territory_sectors

    sectors, width = territory_sectors(territory, slice_level)
    if not sectors:
        raise ValidationError(f"territory {territory} has no sectors in a {slice_level} slice")
    offset = -45.0 if slice_level == "apical" else 0.0
    start = min(sectors) * width + offset
    stop = (max(sectors) + 1) * width + offset
    if sorted(sectors) != list(range(min(sectors), max(sectors) + 1)):
        raise ValidationError("territory sectors are not contiguous")
    return DefectModel(angle_start_deg=start, angle_end_deg=stop, layer=layer,
                       flow_scale=flow_scale)
