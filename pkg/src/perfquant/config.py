"""Run configuration schema (JSON, unknown keys rejected)."""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .analysis import PATIENT_THRESHOLD, VESSEL_THRESHOLD
from .bayes import PriorSpec, SamplerSettings, default_prior_box
from .exceptions import ValidationError
from .model import PhysioConstants
from .moco import MocoConfig
from .nlls import FitBounds
from .phantom import PhantomSpec
from .signal import SequenceParams

STREAMS = {"phantom": 0, "nlls": 1, "bayes": 2}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoundsModel(_Strict):
    lower: tuple[float, float, float, float, float]
    upper: tuple[float, float, float, float, float]

    def to_bounds(self):
        return FitBounds(lower=self.lower, upper=self.upper)


def _bounds_model(b):
    return BoundsModel(lower=tuple(b.lo.tolist()), upper=tuple(b.hi.tolist()))


class PhysioModel(_Strict):
    hct: float = Field(default=0.45, gt=0, lt=1)
    density: float = Field(default=1.05, gt=0)

    def to_constants(self):
        return PhysioConstants(hct=self.hct, density=self.density)


class ConvertModel(_Strict):
    n_baseline: int = Field(default=5, ge=1)
    t10_blood_s: float = Field(default=1.8, gt=0)
    pooled_psi: bool = True
    clamp: bool = True
    out_of_range: Literal["raise", "clip"] = "clip"


class NllsModel(_Strict):
    n_starts: int = Field(default=10, ge=1)
    fit_delay: bool = True
    max_iter: int = Field(default=500, ge=1)
    bounds: BoundsModel = Field(default_factory=lambda: _bounds_model(FitBounds()))


class PriorModel(_Strict):
    spatial_weight: float = Field(default=5.0, ge=0)
    noise_sigma: float | None = Field(default=None, gt=0)
    connectivity: Literal[4, 8] = 4
    spatial_params: tuple[str, ...] = ("Fp", "vp", "ve", "PS")
    box: BoundsModel = Field(default_factory=lambda: _bounds_model(default_prior_box()))
    n_iter: int = Field(default=20000, ge=1)
    burn_in: int = Field(default=5000, ge=0)
    thin: int = Field(default=5, ge=1)
    n_sweeps: int = Field(default=5, ge=1)

    def to_spec(self, spatial_weight=None):
        w = self.spatial_weight if spatial_weight is None else spatial_weight
        return PriorSpec(box=self.box.to_bounds(), spatial_weight=w, noise_sigma=self.noise_sigma,
                         connectivity=self.connectivity, spatial_params=self.spatial_params)

    def to_settings(self):
        return SamplerSettings(n_iter=self.n_iter, burn_in=self.burn_in, thin=self.thin,
                               n_sweeps=self.n_sweeps)


class MocoModel(_Strict):
    enabled: bool = True
    lam: float | None = Field(default=None, gt=0)
    mu: float | None = Field(default=None, gt=0)
    tol: float = Field(default=1e-7, gt=0)
    max_iter: int = Field(default=500, ge=1)
    reference_index: int = Field(default=0, ge=0)
    variance: float = Field(default=0.95, gt=0, le=1)

    def to_config(self):
        return MocoConfig(self.lam, self.mu, self.tol, self.max_iter, self.reference_index,
                          self.variance)


class AnalysisModel(_Strict):
    threshold: float = Field(default=PATIENT_THRESHOLD, gt=0)
    vessel_threshold: float = Field(default=VESSEL_THRESHOLD, gt=0)
    n_lowest: int = Field(default=4, ge=1)


class ReportModel(_Strict):
    wmin: float = 0.0
    wmax: float = 4.0


class RunConfig(_Strict):
    """Every tunable of the command-line pipeline."""

    seed: int = Field(default=0, ge=0)
    sequence: dict = Field(default_factory=lambda: SequenceParams().to_dict())
    physio: PhysioModel = Field(default_factory=PhysioModel)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    convert: ConvertModel = Field(default_factory=ConvertModel)
    method: Literal["nlls", "bayes"] = "nlls"
    nlls: NllsModel = Field(default_factory=NllsModel)
    prior: PriorModel = Field(default_factory=PriorModel)
    moco: MocoModel = Field(default_factory=MocoModel)
    analysis: AnalysisModel = Field(default_factory=AnalysisModel)
    report: ReportModel = Field(default_factory=ReportModel)

    @model_validator(mode="after")
    def _check(self):
        try:
            SequenceParams.from_dict(self.sequence)
            self.prior.to_spec()
            self.prior.to_settings()
            self.nlls.bounds.to_bounds()
        except ValidationError as exc:
            raise ValueError(str(exc)) from None
        return self

    @property
    def seq(self):
        return SequenceParams.from_dict(self.sequence)


def load_config(data):
    """Validate a parsed JSON document (``None`` gives the defaults)."""
    try:
        return RunConfig.model_validate({} if data is None else data)
    except PydanticError as exc:
        raise ValidationError(f"invalid configuration: {exc}") from None


def substream_seed(seed, name):
    """Independent integer seed for one module, derived from the run seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
