import math
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PlainSerializer, field_validator

SCHEMA_VERSION = 1


def _check_alpha(value: str) -> str:
    from qcdistort.services.cantor import parse_rational

    alpha = parse_rational(value)
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {value}")
    return value


# --- Run configs ---
class RunConfigBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    command: str
    seed: int = 0


class CantorRunConfig(RunConfigBase):
    command: Literal["cantor"] = "cantor"
    alpha: str = "1/4"
    depth: int = Field(default=10, ge=0, le=24)
    ahlfors_scales: int = Field(default=12, ge=2, le=40)
    box_window: Optional[tuple[int, int]] = None

    check_alpha = field_validator("alpha")(_check_alpha)


class ProductSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    e_weights: list[float] = Field(..., min_length=1)
    y_weights: list[float] = Field(..., min_length=1)


class FamilyDocument(BaseModel):
    """Measure family file: dense rows over atoms, or a product specification."""
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    tag: str = ""
    atoms: Optional[list[str]] = None
    measures: Optional[list[list[float]]] = None
    base: Optional[list[float]] = None
    product: Optional[ProductSpec] = None


class ModulusRunConfig(RunConfigBase):
    command: Literal["modulus"] = "modulus"
    family_file: str
    p: float = Field(default=2.0, gt=1.0)
    family_sha256: Optional[str] = None


class TubeRunConfig(RunConfigBase):
    command: Literal["tube"] = "tube"
    alpha: str = "1/8"
    k: int = Field(default=2, ge=1, le=4)
    generations: int = Field(default=2, ge=1, le=3)
    chamfer: Optional[float] = Field(default=None, gt=0.0, lt=0.5)
    resolution: Optional[int] = Field(default=None, ge=1, le=32)
    fiber_count: int = Field(default=3, ge=1, le=16)
    sharp_eps: float = Field(default=0.2, ge=0.0)

    check_alpha = field_validator("alpha")(_check_alpha)


class WiggleRunConfig(RunConfigBase):
    command: Literal["wiggle"] = "wiggle"
    depth: int = Field(default=3, ge=1, le=6)
    branching: Union[list[int], Literal["auto"], None] = None
    gauge: Optional[str] = None
    table_depth: int = Field(default=5, ge=1, le=12)
    amplitude: Optional[float] = Field(default=None, ge=0.0)
    oscillation_exponents: tuple[int, int] = (0, 12)

    @field_validator("branching")
    @classmethod
    def check_branching(cls, value):
        if isinstance(value, list) and any(n < 4 for n in value):
            raise ValueError("Branching values must be at least 4")
        return value


class VerifyRunConfig(RunConfigBase):
    command: Literal["verify"] = "verify"
    runs: list[str] = Field(default_factory=list)
    delta: float = Field(default=1.5, gt=1.0)
    eps: float = Field(default=0.1, gt=0.0)
    property_trials: int = Field(default=100, ge=0)
    oracle_trials: int = Field(default=20, ge=0)


RunConfig = Union[CantorRunConfig, ModulusRunConfig, TubeRunConfig, WiggleRunConfig, VerifyRunConfig]

CONFIG_MODELS: dict[str, type[RunConfigBase]] = {
    "cantor": CantorRunConfig,
    "modulus": ModulusRunConfig,
    "tube": TubeRunConfig,
    "wiggle": WiggleRunConfig,
    "verify": VerifyRunConfig,
}


# --- Manifest ---
class ArtifactEntry(BaseModel):
    name: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    command: str
    seed: int
    config: dict
    artifacts: list[ArtifactEntry] = Field(default_factory=list)
    checks: dict[str, str] = Field(default_factory=dict)
    flags: list[str] = Field(default_factory=list)


class TimingRecord(BaseModel):
    schema_version: int = SCHEMA_VERSION
    command: str
    seconds: float
    phases: dict[str, float] = Field(default_factory=dict)


# --- Result documents ---
def _tag_nonfinite(value: float) -> Union[float, str]:
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


# JSON dumps write non-finite floats as "inf", "-inf" or "nan"
Real = Annotated[float, PlainSerializer(_tag_nonfinite, when_used="json")]


class Document(BaseModel):
    schema_version: int = SCHEMA_VERSION


class CantorDocument(Document):
    alpha: str
    exact: bool
    generations: list[list[list[Union[str, Real]]]]


class NestedFamilyDocument(Document):
    branching: list[str]
    child_counts: list[str]
    log_lengths: list[Real]
    generations: list[list[list[str]]]


class TrianglePiece(BaseModel):
    source: list[list[float]]
    matrix: list[list[float]]
    translation: list[float]
    label: str = "piece"


class TriangulatedMapDocument(Document):
    pieces: list[TrianglePiece]


class LocalityDocument(BaseModel):
    samples: int
    max_nonconformal_stages: int
    multi_stage_fraction: Real
    composed_max_k: Real
    stage_max_k: list[Real]
    slack: Real


# modulus
class ModulusDocument(Document):
    value: Real
    p: Real
    rho: list[Real]
    active: list[int]
    iterations: int
    certified_gap: Real
    dual_bound: Real
    kkt_residual: Real
    worst_violation: Real
    status: str
    degenerate_row: Optional[int] = None


class DeltaExponentDocument(Document):
    p_grid: list[Real]
    deltas: list[Real]
    raw_values: list[list[Real]]
    values: list[list[Real]]
    slopes: list[Real]
    estimate: Real
    no_transition: bool
    monotonicity_flags: list[tuple[int, int]]
    bound: Optional[Real] = None


class PropertySuiteDocument(Document):
    trials: int
    monotonicity_failures: int
    subadditivity_failures: int
    scaling_failures: int
    oracle_trials: int
    oracle_failures: int
    max_oracle_error: Real
    max_gap: Real
    passed: bool


# dimension
class BoxCountDocument(Document):
    exponents: list[int]
    counts: list[int]
    slope: Real
    intercept: Real
    residual: Real
    rms: Real
    confidence: tuple[Real, Real]
    level: Real
    estimate: Optional[Real] = None
    monotone: bool = True


class MassCertificateDocument(Document):
    s: Real
    C: Real
    rows: int
    flagged_rows: list[int]


class CheckDocument(BaseModel):
    name: str
    value: Real
    bound: Real
    tol: Real
    residual: Real = 0.0
    status: str
    detail: str = ""


class BoundsDocument(Document):
    d: Real
    horizontal_bound: Real
    vertical_bound: Real
    horizontal_inf: Real
    vertical_inf: Real
    checks: list[CheckDocument]
    quantifier: str
    status: str


class ExpansionDocument(Document):
    lhs: Real
    rhs: Real
    slack: Real
    checks: list[CheckDocument]
    status: str


class CorollaryDocument(Document):
    delta: Real
    eps: Real
    bound: Real
    limit: Real
    achieved: Optional[Real] = None
    tol: Real
    status: str


# tube
class TubeParamsDocument(Document):
    alpha: str
    k: int
    N: int
    m: int
    M: int
    grid: tuple[int, int]
    small_n: bool
    bracket_holds: bool


class SnakeTubeDocument(Document):
    params: TubeParamsDocument
    cells: list[tuple[int, int]]
    corners: list[int]
    n_cells: int
    corner_count: int
    deviations: list[str]
    asymmetric: bool


class LengthBracketDocument(BaseModel):
    length: Real
    lower: Optional[Real] = None
    upper: Real
    half: Real
    holds: bool


class ThinnedTubeDocument(Document):
    width: Real
    chamfer: Real
    modulus: Real
    target: Real
    trace: list[tuple[Real, Real]]


class TubeBaseMapDocument(Document):
    pieces: int
    height: Real
    bottoms: list[Real]
    separation: Real
    periodic_defect: Real
    width_ratio: Real
    predicted_ratio: Real
    max_dilatation: dict[str, Real]


class ExponentDocument(Document):
    s: Real
    S: Real
    s_limit: Real
    S_limit: Real
    t: Real
    C1: Real
    denominator: Real


class SeparationDocument(BaseModel):
    generation: int
    distances: list[Real]
    min_distance: Real
    C2: Real


# wiggle
class WiggleStageRow(BaseModel):
    stage: int
    n: int
    tube_k: Real
    extension_k: Real
    angle_deviation: Real
    rectangles: int


class CompositionDocument(Document):
    stages: list[WiggleStageRow]
    budget_sum: Real
    constant: Real
    constant_consistent: bool
    composed_max_k: Real
    tube_composed_max_k: Real
    budget_bound: Real
    budget_pass: bool
    composed_ratio: Real
    ratio_bound: Real
    ratio_limit: Real
    ratio_within_limit: bool
    ratio_within_bound: bool
    locality: LocalityDocument
    locality_bound: int
    locality_within_bound: bool


class OscillationDocument(Document):
    y: Real
    threshold: Real
    rows: list[tuple[int, Real, Real, int, Real]]
    bands: list[tuple[int, int]]
    growth: list[Real]
    stage_scales: list[Real] = Field(default_factory=list)
    stage_lengths: list[Real] = Field(default_factory=list)
