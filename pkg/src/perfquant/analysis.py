"""Heart localisation, AHA segmentation, per-vessel statistics and ROC analysis.

Segment labels: AHA numbers 1-16 for the endocardial layer and the same
number plus 16 for the epicardial layer (0 outside the mask). Angles are
counterclockwise in display orientation (y axis pointing down), measured
from the anterior RV insertion point.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError

PATIENT_THRESHOLD = 1.34
VESSEL_THRESHOLD = 1.31
TERRITORIES = ("LAD", "RCA", "LCx")
TERRITORY_SEGMENTS = {
    "LAD": (1, 2, 7, 8, 13, 14),
    "RCA": (3, 4, 9, 10, 15),
    "LCx": (5, 6, 11, 12, 16),
}
LEVELS = {"basal": (1, 6), "mid": (7, 6), "apical": (13, 4)}
EPI_OFFSET = 16


class ComponentCountError(ValidationError):
    """Temporal-variance thresholding did not isolate exactly two blood pools."""


class InsufficientSegmentsError(ValidationError):
    """A territory has too few segments for the lowest-segments statistic."""


@dataclass(frozen=True)
class SegmentModel:
    """One of the 32 layered AHA segments."""

    segment_id: int
    layer: str

    def __post_init__(self):
        if not 1 <= self.segment_id <= 16 or self.layer not in ("endo", "epi"):
            raise ValidationError(f"invalid segment {self.segment_id}/{self.layer}")

    @property
    def slice_level(self):
        if self.segment_id <= 6:
            return "basal"
        return "mid" if self.segment_id <= 12 else "apical"

    @property
    def territory(self):
        return next(t for t, segs in TERRITORY_SEGMENTS.items() if self.segment_id in segs)

    @property
    def label(self):
        return self.segment_id + (EPI_OFFSET if self.layer == "epi" else 0)

    @classmethod
    def from_label(cls, label):
        label = int(label)
        if not 1 <= label <= 2 * EPI_OFFSET:
            raise ValidationError(f"segment label must lie in 1..32, got {label}")
        if label > EPI_OFFSET:
            return cls(label - EPI_OFFSET, "epi")
        return cls(label, "endo")

    @classmethod
    def all(cls):
        return [cls(s, layer) for layer in ("endo", "epi") for s in range(1, 17)]


def territory_of(label):
    return SegmentModel.from_label(label).territory


def territory_sectors(territory, slice_level):
    """Sector indices (0-based, counterclockwise) a territory occupies in a slice, and the sector width."""
    if territory not in TERRITORY_SEGMENTS:
        raise ValidationError(f"unknown territory {territory}")
    first, count = LEVELS[slice_level]
    sectors = [s - first for s in TERRITORY_SEGMENTS[territory] if first <= s < first + count]
    return sectors, 360.0 / count


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle ``[y0, y1) x [x0, x1)``."""

    y0: int
    y1: int
    x0: int
    x1: int

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def contains(self, mask):
        inside = np.zeros_like(mask, dtype=bool)
        inside[self.slices()] = True
        return bool(np.all(inside[mask]))


def bounding_box_temporal_variance(series, threshold_quantile=0.95, margin=16, min_size=20):
    """Box around the two blood pools, found as the highest temporal-SD components.

    Raises :class:`ComponentCountError` unless exactly two components of at
    least ``min_size`` pixels survive the threshold (joint or missing
    ventricles are the expected failure mode).
    """
    frames = series.frames if hasattr(series, "frames") else np.asarray(series, dtype=float)
    if frames.shape[0] < 10:
        raise ValidationError("temporal variance needs at least 10 frames")
    if not 0 < threshold_quantile < 1:
        raise ValidationError("threshold_quantile must lie in (0, 1)")
    sd = frames.std(axis=0)
    hot = (sd >= np.quantile(sd, threshold_quantile)) & (sd > 0)
    labels, n = ndimage.label(hot)
    sizes = ndimage.sum_labels(hot, labels, index=np.arange(1, n + 1)) if n else np.array([])
    large = [i + 1 for i, s in enumerate(sizes) if s >= min_size]
    if len(large) != 2:
        raise ComponentCountError(
            f"expected 2 large high-variance components (RV and LV), found {len(large)}")
    ys, xs = np.nonzero(np.isin(labels, large))
    ny, nx = sd.shape
    return Box(max(int(ys.min()) - margin, 0), min(int(ys.max()) + 1 + margin, ny),
               max(int(xs.min()) - margin, 0), min(int(xs.max()) + 1 + margin, nx))


def _angles(shape, centroid):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    dy = yy - centroid[0]
    dx = xx - centroid[1]
    return np.hypot(dy, dx), np.mod(np.arctan2(-dy, dx), 2 * np.pi)


def ray_extents(mask, centroid, n_rays=720, step=0.25):
    """Inner and outer mask radius along ``n_rays`` equally spaced rays from ``centroid``."""
    ny, nx = mask.shape
    angles = np.arange(n_rays) * (2 * np.pi / n_rays)
    r_max = math.hypot(ny, nx)
    radii = np.arange(0.0, r_max, step)
    ys = np.rint(centroid[0] - np.outer(np.sin(angles), radii)).astype(int)
    xs = np.rint(centroid[1] + np.outer(np.cos(angles), radii)).astype(int)
    valid = (ys >= 0) & (ys < ny) & (xs >= 0) & (xs < nx)
    hit = np.zeros(ys.shape, dtype=bool)
    hit[valid] = mask[ys[valid], xs[valid]]
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    last = hit.shape[1] - 1 - np.argmax(hit[:, ::-1], axis=1)
    r_in = np.where(any_hit, radii[first], np.nan)
    r_out = np.where(any_hit, radii[last], np.nan)
    return angles, r_in, r_out


def layer_image(mask, centroid, n_rays=720):
    """True for endocardial pixels: at or inside the radial midline of their ray."""
    radius, angle = _angles(mask.shape, centroid)
    _, r_in, r_out = ray_extents(mask, centroid, n_rays)
    ray = np.rint(angle / (2 * np.pi) * n_rays).astype(int) % n_rays
    mid = 0.5 * (r_in[ray] + r_out[ray])
    # pixels on rays that miss the mask (discretisation) fall back to their own radius
    mid = np.where(np.isnan(mid), radius, mid)
    return mask & (radius <= mid)


def assign_segments(mask, rv_points, slice_level="mid", centroid=None, origin_offset_deg=0.0):
    """Segment-label image (see module docstring) for one short-axis slice.

    ``rv_points`` are the (anterior, inferior) RV insertion points as (y, x).
    Basal and mid slices get 6 equal sectors, apical slices 4 sectors
    rotated back by 45 degrees. ``centroid`` defaults to the centroid of
    the filled mask (the LV centre).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("myocardial mask is empty")
    if slice_level not in LEVELS:
        raise ValidationError(f"slice_level must be one of {sorted(LEVELS)}")
    (ay, ax), (iy, ix) = (tuple(map(float, p)) for p in rv_points)
    if math.isclose(ay, iy) and math.isclose(ax, ix):
        raise ValidationError("RV insertion points coincide")
    if centroid is None:
        centroid = ndimage.center_of_mass(ndimage.binary_fill_holes(mask))
    cy, cx = centroid
    origin = math.atan2(-(ay - cy), ax - cx) + math.radians(origin_offset_deg)
    first, count = LEVELS[slice_level]
    width = 2 * np.pi / count
    if count == 4:
        origin -= math.radians(45.0)
    _, angle = _angles(mask.shape, (cy, cx))
    rel = np.mod(angle - origin, 2 * np.pi)
    sector = np.minimum((rel / width).astype(int), count - 1)
    labels = first + sector
    endo = layer_image(mask, (cy, cx))
    labels = np.where(endo, labels, labels + EPI_OFFSET)
    return np.where(mask, labels, 0).astype(np.int32)


def segment_means(value_map, segments):
    """Mean of ``value_map`` over each label present in ``segments``; lists combine slices."""
    maps = value_map if isinstance(value_map, (list, tuple)) else [value_map]
    segs = segments if isinstance(segments, (list, tuple)) else [segments]
    if len(maps) != len(segs):
        raise ValidationError("need one segment image per map")
    sums, counts = {}, {}
    for m, s in zip(maps, segs):
        m = np.asarray(m, dtype=float)
        s = np.asarray(s)
        if m.shape != s.shape:
            raise ValidationError("map and segment image shapes differ")
        for label in np.unique(s[s > 0]):
            sel = s == label
            sums[int(label)] = sums.get(int(label), 0.0) + float(m[sel].sum())
            counts[int(label)] = counts.get(int(label), 0) + int(sel.sum())
    return {k: sums[k] / counts[k] for k in sorted(sums)}


def mean_of_lowest(values, n=4):
    values = sorted(float(v) for v in values)
    if len(values) < n:
        raise InsufficientSegmentsError(f"need at least {n} segment values, got {len(values)}")
    return sum(values[:n]) / n


def per_vessel_statistic(value_map, segments, n_lowest=4):
    """Per territory, the mean of the ``n_lowest`` lowest segment means.

    Territories with no segments present are omitted; a territory present
    with fewer than ``n_lowest`` segments raises
    :class:`InsufficientSegmentsError`.
    """
    means = segment_means(value_map, segments)
    out = {}
    for territory in TERRITORIES:
        vals = [v for k, v in means.items() if territory_of(k) == territory]
        if vals:
            out[territory] = mean_of_lowest(vals, n_lowest)
    if not out:
        raise InsufficientSegmentsError("no labelled segments found")
    return out


@dataclass
class DiagnosticResult:
    statistics: dict
    vessel_labels: dict
    patient_label: str
    threshold: float

    def to_dict(self):
        return {
            "threshold_ml_min_g": self.threshold,
            "vessels": {
                t: {"mbf_ml_min_g": self.statistics[t], "label": self.vessel_labels[t]}
                for t in self.statistics
            },
            "patient": self.patient_label,
        }


def classify(statistics, threshold=PATIENT_THRESHOLD):
    """Vessel positive iff its statistic is strictly below ``threshold``."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    labels = {t: "positive" if v < threshold else "negative" for t, v in statistics.items()}
    patient = "positive" if "positive" in labels.values() else "negative"
    return DiagnosticResult(dict(statistics), labels, patient, float(threshold))


@dataclass
class RocResult:
    auc: float
    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    optimal_threshold: float
    youden: float
    greater_is_positive: bool = True
    extra: dict = field(default_factory=dict)

    def rows(self):
        return [(float(t), float(se), float(sp))
                for t, se, sp in zip(self.thresholds, self.sensitivity, self.specificity)]


def roc_analysis(scores, labels, greater_is_positive=True):
    """ROC sweep over the unique scores with trapezoidal AUC.

    A case is called positive when its score is ``>= t`` (or ``<= t`` when
    ``greater_is_positive`` is False, e.g. for flow values). Tied scores
    move along the diagonal, which gives them half credit; the area is
    accumulated in integer counts so it equals the pairwise concordance
    fraction exactly. The optimal threshold maximises the Youden index.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size != labels.size:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC analysis needs both classes")
    oriented = scores if greater_is_positive else -scores
    order = np.argsort(-oriented, kind="stable")
    s = oriented[order]
    y = labels[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.append(distinct, s.size - 1)
    tp = np.concatenate([[0], np.cumsum(y)[ends]]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(~y)[ends]]).astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    thresholds = s[ends] if greater_is_positive else -s[ends]
    sens = tp[1:] / n_pos
    spec = 1.0 - fp[1:] / n_neg
    youden = sens + spec - 1.0
    best = int(np.argmax(youden))
    return RocResult(float(auc), thresholds, sens, spec, float(thresholds[best]),
                     float(youden[best]), greater_is_positive)


def segment_curves(frames, segments):
    """Mean time curve for every labelled segment, ``{label: (nt,)}``."""
    frames = np.asarray(frames, dtype=float)
    segments = np.asarray(segments)
    return {int(k): frames[:, segments == k].mean(axis=1) for k in np.unique(segments[segments > 0])}


def total_variation(curve):
    return float(np.abs(np.diff(np.asarray(curve, dtype=float))).sum())
