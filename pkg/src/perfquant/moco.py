"""Translation-only motion correction of dynamic image series.

Stage 1 registers the gradient magnitude of the low-rank frames of a robust
PCA decomposition; edges keep their position while blood-pool brightness
changes with the bolus, which raw-intensity correlation cannot tolerate.
Stage 2 repeatedly re-registers the corrected frames to a truncated-PCA
reconstruction of themselves until the update falls below ``refine_tol``
pixels RMS; its updates have zero mean so that stage 1 keeps fixing the
frame of reference. Shifts
are reported as the displacement of each frame relative to the reference:
``frame(y, x) = reference(y - dy, x - dx)``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_stack
from .exceptions import ValidationError
from .rpca import rpca_admm


@dataclass
class ImageSeries:
    """Stack of ``nt`` frames, shape ``(nt, ny, nx)``; ``spacing`` is mm per pixel (dy, dx)."""

    frames: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.frames = check_stack(self.frames)
        self.spacing = tuple(float(v) for v in self.spacing)
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValidationError("spacing must be two positive values")

    @property
    def nt(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    def casorati(self):
        """Matrix with one column per frame, ``(ny * nx, nt)``."""
        return self.frames.reshape(self.nt, -1).T

    @classmethod
    def from_casorati(cls, C, shape, spacing=(1.0, 1.0)):
        C = np.asarray(C, dtype=float)
        return cls(C.T.reshape((C.shape[1],) + tuple(shape)), spacing)

    def with_frames(self, frames):
        return ImageSeries(frames, self.spacing)


@dataclass
class MotionEstimate:
    """Per-frame (dy, dx) displacement in pixels; the reference row is (0, 0)."""

    shifts: np.ndarray
    reference_index: int = 0
    stages: list = field(default_factory=list)

    def __post_init__(self):
        self.shifts = np.asarray(self.shifts, dtype=float).reshape(-1, 2)

    def __add__(self, other):
        return MotionEstimate(self.shifts + other.shifts, self.reference_index)

    def rms(self):
        return float(np.sqrt(np.mean(np.sum(self.shifts**2, axis=1))))

    def rows(self):
        return [(i, float(dy), float(dx)) for i, (dy, dx) in enumerate(self.shifts)]


def shift_image(image, dy, dx):
    """Translate by (dy, dx) with bilinear interpolation and clamped edges."""
    return ndimage.shift(np.asarray(image, dtype=float), (dy, dx), order=1, mode="nearest")


def apply_shifts(frames, shifts):
    """Translate each frame by its own (dy, dx)."""
    frames = np.asarray(frames, dtype=float)
    return np.stack([shift_image(f, dy, dx) for f, (dy, dx) in zip(frames, shifts)])


def _parabolic(cm, c0, cp):
    denom = cm - 2.0 * c0 + cp
    if denom >= 0:
        return 0.0
    offset = float(np.clip(0.5 * (cm - cp) / denom, -0.5, 0.5))
    # FFT round-off makes symmetric neighbours differ slightly; keep integer peaks exact
    return 0.0 if abs(offset) < 1e-9 else offset


def _ncc_shift(moving, reference):
    """Displacement of ``moving`` relative to ``reference`` (circular NCC peak + parabola)."""
    a = moving - moving.mean()
    b = reference - reference.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("flat image: correlation undefined, shift set to zero", stacklevel=3)
        return 0.0, 0.0
    corr = np.fft.ifft2(np.fft.fft2(a) * np.conj(np.fft.fft2(b))).real / (na * nb)
    ny, nx = corr.shape
    iy, ix = np.unravel_index(np.argmax(corr), corr.shape)
    dy = _parabolic(corr[(iy - 1) % ny, ix], corr[iy, ix], corr[(iy + 1) % ny, ix])
    dx = _parabolic(corr[iy, (ix - 1) % nx], corr[iy, ix], corr[iy, (ix + 1) % nx])
    # peaks past the half-way index are negative displacements
    py = iy - ny if iy > ny // 2 else iy
    px = ix - nx if ix > nx // 2 else ix
    return py + dy, px + dx


def gradient_magnitude(image):
    gy, gx = np.gradient(np.asarray(image, dtype=float))
    return np.hypot(gy, gx)


def register_frames(frames, references):
    """Shift of every frame relative to its own reference image."""
    frames = np.asarray(frames, dtype=float)
    references = np.asarray(references, dtype=float)
    if references.ndim == 2:
        references = np.broadcast_to(references, frames.shape)
    return np.array([_ncc_shift(f, r) for f, r in zip(frames, references)])


def register_translation(series, reference_index=0):
    """Translation of each frame relative to frame ``reference_index``."""
    if not 0 <= reference_index < series.nt:
        raise ValidationError("reference_index out of range")
    frames = series.frames
    shifts = register_frames(frames, frames[reference_index])
    shifts[reference_index] = 0.0
    return MotionEstimate(shifts, reference_index)


def pca_reconstruction(frames, variance=0.95):
    """Truncated PCA over frames keeping the leading components that explain ``variance``."""
    if not 0 < variance <= 1:
        raise ValidationError("variance fraction must lie in (0, 1]")
    nt = frames.shape[0]
    X = frames.reshape(nt, -1)
    mean = X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    energy = s**2
    total = energy.sum()
    if total == 0:
        return frames.copy(), 0
    k = int(np.searchsorted(np.cumsum(energy) / total, variance - 1e-12) + 1)
    k = min(k, s.size)
    recon = mean + (U[:, :k] * s[:k]) @ Vt[:k]
    return recon.reshape(frames.shape), k


@dataclass(frozen=True)
class MocoConfig:
    lam: float | None = None
    mu: float | None = None
    tol: float = 1e-7
    max_iter: int = 500
    reference_index: int = 0
    variance: float = 0.95
    max_refinements: int = 10
    refine_tol: float = 0.01


def motion_correct(series, config=None):
    """Two-stage translation correction.

    Returns the corrected series (original frames resampled once with the
    composite shifts) and the composite :class:`MotionEstimate`.
    """
    config = MocoConfig() if config is None else config
    ref = config.reference_index
    if not 0 <= ref < series.nt:
        raise ValidationError("reference_index out of range")
    frames = series.frames

    dec = rpca_admm(series.casorati(), config.lam, config.mu, config.tol, config.max_iter)
    low_rank = dec.L.T.reshape(frames.shape)
    edges = np.stack([gradient_magnitude(f) for f in low_rank])
    stage1 = register_frames(edges, edges[ref])
    stage1 -= stage1[ref]
    corrected = apply_shifts(frames, -stage1)

    stage2 = np.zeros_like(stage1)
    for _ in range(config.max_refinements):
        recon, _ = pca_reconstruction(corrected, config.variance)
        delta = register_frames(corrected, recon)
        # stage 1 fixes the frame of reference; a single noisy frame would bias every shift
        delta -= delta.mean(axis=0)
        delta[ref] = 0.0
        stage2 += delta
        corrected = apply_shifts(frames, -(stage1 + stage2))
        if np.sqrt(np.mean(np.sum(delta**2, axis=1))) < config.refine_tol:
            break

    total = stage1 + stage2
    estimate = MotionEstimate(total, ref, stages=[stage1, stage2])
    return series.with_frames(apply_shifts(frames, -total)), estimate


class MotionCorrector(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`motion_correct` on ``(nt, ny, nx)`` stacks."""

    def __init__(self, lam=None, mu=None, tol=1e-7, max_iter=500, reference_index=0,
                 variance=0.95):
        self.lam = lam
        self.mu = mu
        self.tol = tol
        self.max_iter = max_iter
        self.reference_index = reference_index
        self.variance = variance

    def _config(self):
        return MocoConfig(self.lam, self.mu, self.tol, self.max_iter, self.reference_index,
                          self.variance)

    def fit(self, X, y=None):
        corrected, est = motion_correct(ImageSeries(X), self._config())
        self.shifts_ = est.shifts
        self.corrected_ = corrected.frames
        return self

    def transform(self, X):
        check_is_fitted(self, "shifts_")
        X = check_stack(X)
        if X.shape[0] != self.shifts_.shape[0]:
            raise ValidationError("frame count differs from the fitted series")
        return apply_shifts(X, -self.shifts_)
