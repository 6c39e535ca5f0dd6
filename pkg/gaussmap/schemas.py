import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_OUTPUT_DIR = os.getenv("GAUSSMAP_OUTPUT_DIR", "output")
DEFAULT_SCHEDULE = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]


class DensitySpec(BaseModel):
    """Density description shared by source and target."""
    model_config = ConfigDict(extra="forbid")
    kind: Literal["uniform", "radial-power", "tabulated-grid"] = "uniform"
    exponent: float = 0.0
    grid_file: Optional[str] = None

    @model_validator(mode="after")
    def _needs_grid_file(self):
        if self.kind == "tabulated-grid" and not self.grid_file:
            raise ValueError("grid_file is required for tabulated-grid densities")
        if self.kind == "radial-power" and not self.exponent > -2.0:
            raise ValueError("exponent must exceed -2")
        return self


class SourceConfig(BaseModel):
    """Convex body A and its density ρ0."""
    model_config = ConfigDict(extra="forbid")
    shape: Literal["square", "disc", "ellipse", "triangle", "polygon"] = "square"
    size: float = Field(1.0, gt=0)
    aspect: float = Field(1.0, gt=0)
    polygon_file: Optional[str] = None
    density: DensitySpec = Field(default_factory=DensitySpec)

    @model_validator(mode="after")
    def _needs_polygon_file(self):
        if self.shape == "polygon" and not self.polygon_file:
            raise ValueError("polygon_file is required when shape = polygon")
        return self


class TargetConfig(BaseModel):
    """Ball B_r and its density ρ1."""
    model_config = ConfigDict(extra="forbid")
    radius: float = Field(1.0, gt=0)
    density: DensitySpec = Field(default_factory=DensitySpec)


class DiscretizationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n: int = Field(1000, ge=64)
    scheme: Literal["grid", "low-discrepancy"] = "grid"


class TransportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    t_schedule: list[float] = Field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    solver: Literal["exact", "entropic"] = "exact"
    epsilon: float = Field(1e-2, gt=0)
    max_iter: int = Field(5000, ge=1)
    levels: int = Field(32, ge=1)
    map_levels: int = Field(128, ge=0)
    resolution_floor: float = Field(1e-10, gt=0)

    @field_validator("t_schedule")
    @classmethod
    def _increasing_from_zero(cls, v):
        if not v or v[0] != 0.0:
            raise ValueError("t_schedule must start at 0")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("t_schedule must be strictly increasing")
        return v


class FlowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    angles: int = Field(256, ge=16)
    dlambda: Optional[float] = Field(None, gt=0)
    reading: Literal["level", "literal"] = "level"
    smoothing: float = Field(0.01, ge=0)
    classical: bool = False
    c: float = Field(1.0, gt=0)
    t_end: Optional[float] = Field(None, gt=0)
    records: Optional[list[float]] = None

    @field_validator("angles")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("angles must be even")
        return v


class CompareConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    bound: Optional[float] = Field(None, gt=0)
    min_level: float = Field(0.3, ge=0, le=1)
    max_level: float = Field(0.9, ge=0, le=1)


class RunConfig(BaseModel):
    """Validated run configuration."""
    model_config = ConfigDict(extra="forbid")
    source: SourceConfig = Field(default_factory=SourceConfig)
    target: TargetConfig = Field(default_factory=TargetConfig)
    discretization: DiscretizationConfig = Field(default_factory=DiscretizationConfig)
    transport: TransportConfig = Field(default_factory=TransportConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    levels: Optional[list[float]] = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    seed: int = 0

    @model_validator(mode="after")
    def _levels_inside_ball(self):
        r = self.target.radius
        for key, values in (("levels", self.levels), ("flow.records", self.flow.records)):
            for level in values or []:
                if not 0.0 < level < r:
                    raise ValueError(f"{key}: level {level} outside (0, {r})")
        return self


class ContinuationStep(BaseModel):
    """Diagnostics for one value of t."""
    t: float
    max_phi: float
    bound: float
    bound_margin: float
    sup_delta: Optional[float] = None
    duality_gap: float
    powergrad_mu: float
    powergrad_nu: float
    powergrad_flagged: bool
    ks_radial: float
    resolved_fraction: float
    gradient_l1: Optional[float] = None
    boundary_integral: Optional[float] = None
    gradient_discrepancy: Optional[float] = None


class ContinuationReport(BaseModel):
    """Per-t continuation diagnostics."""
    steps: list[ContinuationStep] = Field(default_factory=list)
    aborted_at: Optional[float] = None

    def deltas(self) -> list[float]:
        return [s.sup_delta for s in self.steps if s.sup_delta is not None]

    def deltas_decreasing(self, skip: int = 2, slack: float = 0.0) -> bool:
        tail = self.deltas()[skip:]
        return all(b <= a + slack for a, b in zip(tail, tail[1:]))


class PowergradStatistic(BaseModel):
    t: float
    mu_fraction: float
    nu_fraction: float
    difference: float
    flagged: bool


class ResidualReport(BaseModel):
    """Summary of a pointwise residual."""
    check: str
    max: Optional[float] = None
    median: Optional[float] = None
    n_points: int
    skipped: int
    p90: Optional[float] = None


class LevelEntry(BaseModel):
    level: float
    file: str
    mass: float


class FlowLevelEntry(BaseModel):
    level: float
    area: float
    mass: float
    file: str
    isoperimetric_ratio: float


class FlowIndex(BaseModel):
    reading: str
    collapsed_at: Optional[float] = None
    halvings: int = 0
    area_rate: Optional[float] = None
    records: list[FlowLevelEntry] = Field(default_factory=list)


class LevelComparison(BaseModel):
    level: float
    hausdorff: Optional[float] = None
    bound: Optional[float] = None
    passed: Optional[bool] = None
    note: Optional[str] = None


class MassResidual(BaseModel):
    level: float
    mass: float
    target: float
    residual: float


class CheckResult(BaseModel):
    name: str
    value: float
    bound: float
    passed: bool


class VerifyReport(BaseModel):
    checks: list[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]


class TransportSummary(BaseModel):
    """Top-level transport report written next to the φ field."""
    n_source: int
    n_target: int
    pitch: float
    continuation: ContinuationReport
    ks_before: float
    ks_after: float
    pushforward_w2: float
    far_from_level: int
    nested: bool
    convexity_defect: float
    monge_ampere: Optional[ResidualReport] = None
    # ν-mass where T_t⁻¹ is off the limit inverse, one entry per schedule step
    inverse_mass: Optional[list[float]] = None


class PsiStep(BaseModel):
    """ψ_t on the ν cloud at one schedule step."""
    t: float
    evaluated: int
    bound_violations: int
    upper_violations: Optional[int] = None
    upper_excess: Optional[float] = None
    sup_change: Optional[float] = None
    gradient_term: Optional[float] = None


class DualityDiagnostics(BaseModel):
    """ψ_t across the schedule, pre-limit identities at the last step and the limit tangential agreement."""
    t: float
    fd_step: float
    steps: list[PsiStep] = Field(default_factory=list)
    tt_st: Optional[ResidualReport] = None
    tangential: Optional[ResidualReport] = None
    tp: Optional[ResidualReport] = None
    graph_duality: Optional[ResidualReport] = None
    gradient_term: Optional[float] = None
    tangential_agreement: Optional[float] = None
    tangential_count: int = 0

    def bound_violations(self) -> int:
        return sum(s.bound_violations for s in self.steps)

    def upper_violations(self) -> int:
        return sum(s.upper_violations or 0 for s in self.steps)


class Manifest(BaseModel):
    command: str
    config_hash: str
    versions: dict[str, str]
    artifacts: list[str]


class DiscretizationAgreement(BaseModel):
    """φ and level-hull agreement between two discretizations of the same problem."""
    pitch: float
    phi_sup: float
    overlap: int
    level_hausdorff: list[float] = Field(default_factory=list)
    bound: float
    passed: bool
