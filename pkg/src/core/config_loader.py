"""
Configuration loader and validator for torus solver runs.
"""
import yaml
import os
from typing import Dict, Any, Optional, List, Literal
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pathlib import Path

# Load environment variables from .env file
load_dotenv()

THREADS_ENV = "KAMTOR_THREADS"


class CorrectionConfig(BaseModel):
    """Optional correction r_k(I) added to the quartic frequencies as r_k(I)/k."""
    kind: Literal["none", "linear"] = "none"
    c: float = 0.0


class FrequencyModelConfig(BaseModel):
    correction: CorrectionConfig = CorrectionConfig()


class PerturbationTermConfig(BaseModel):
    """One term coeff * trig(2 pi harmonic x) * zeta1**power1 * zeta2**power2."""
    coeff: float
    harmonic: int = 0
    trig: Literal["cos", "sin"] = "cos"
    power1: int = 0
    power2: int = 0

    @field_validator('harmonic', 'power1', 'power2')
    @classmethod
    def validate_nonnegative(cls, v):
        if v < 0:
            raise ValueError("harmonic and powers must be non-negative")
        return v


def _default_terms() -> List[PerturbationTermConfig]:
    # |zeta|^4 plus one x-dependent quadratic term
    return [
        PerturbationTermConfig(coeff=1.0, power1=4),
        PerturbationTermConfig(coeff=2.0, power1=2, power2=2),
        PerturbationTermConfig(coeff=1.0, power2=4),
        PerturbationTermConfig(coeff=0.5, harmonic=1, power1=2),
    ]


class PerturbationConfig(BaseModel):
    terms: List[PerturbationTermConfig] = Field(default_factory=_default_terms)
    grid_size: Optional[int] = None

    @property
    def degree(self) -> int:
        return max([t.power1 + t.power2 for t in self.terms] + [0])

    @property
    def max_harmonic(self) -> int:
        return max([t.harmonic for t in self.terms] + [0])


class ActionBoxConfig(BaseModel):
    """Per-component bounds of the tangential actions xi."""
    lower: float = 1e-3
    upper: float = 1.0

    @model_validator(mode='after')
    def validate_bounds(self):
        if not 0.0 < self.lower < self.upper:
            raise ValueError("action_box requires 0 < lower < upper")
        return self


class ToleranceConfig(BaseModel):
    tol_mean_rel: float = 1e-12
    tol_alias: float = 1e-10
    newton_tol: float = 1e-12
    max_newton: int = 50
    tol_iso: float = 1e-9
    tol_struct: float = 1e-9
    tol_exp: float = 1e-13
    exp_order_cap: int = 30
    tol_hom: float = 1e-10
    tol_tri: float = 1e-9
    chart_cond_cap: float = 1e6
    mbar_cond_cap: float = 1e8
    max_refine: int = 8
    fd_step: float = 1e-6


class KamConfig(BaseModel):
    sigma: int = 4
    s0: Optional[int] = None
    max_steps: int = 12
    slack_kam: float = 4.0
    target_rel: float = 1e-10
    floor_rel: float = 1e-13
    enforce_gate: bool = False

    @field_validator('sigma')
    @classmethod
    def validate_sigma(cls, v):
        if v < 2:
            raise ValueError("sigma must be at least 2")
        return v


class NashMoserConfig(BaseModel):
    max_outer: int = 8
    tol_NM: float = 1e-10
    delta2: float = 1e-2
    enforce_gate: bool = False
    mu1: int = 1
    chi: float = 1.5

    @field_validator('chi')
    @classmethod
    def validate_chi(cls, v):
        if v != 1.5:
            raise ValueError("chi is fixed to 3/2")
        return v

    @property
    def eta1(self) -> float:
        return 6 * self.mu1 + 1

    @property
    def alpha1(self) -> float:
        return 2 * self.mu1 + 2.0 / 3.0

    @property
    def kappa1(self) -> float:
        return 6 * self.mu1 + 1

    @property
    def beta1(self) -> float:
        return 12 * self.mu1 + 2


ConditionName = Literal["diophantine", "first", "second_plus", "second_minus"]


class SweepConfig(BaseModel):
    parameter: Literal["gamma", "eps"] = "gamma"
    start: float = 1e-3
    stop: float = 1e-1
    num: int = 8

    @model_validator(mode='after')
    def validate_range(self):
        if self.start <= 0 or self.stop <= 0 or self.num < 2:
            raise ValueError("sweep requires positive endpoints and num >= 2")
        return self


class MeasureConfig(BaseModel):
    n_samples: int = 4096
    L_max: Optional[int] = None
    conditions: List[ConditionName] = ["diophantine", "first", "second_plus", "second_minus"]
    linkage_exponent: Optional[float] = None
    sampler: Literal["uniform", "lines"] = "uniform"
    sweep: Optional[SweepConfig] = None

    @field_validator('linkage_exponent')
    @classmethod
    def validate_linkage(cls, v):
        if v is not None and not 0.0 < v < 0.25:
            raise ValueError("linkage_exponent must lie in (0, 1/4)")
        return v


class StabilityConfig(BaseModel):
    horizon: float = 1000.0
    n_samples: int = 4
    n_times: int = 400


class RuntimeConfig(BaseModel):
    seed: int = 0
    threads: Optional[int] = None
    log_level: str = "INFO"
    write_csv: bool = True


class SolverConfig(BaseModel):
    """Complete description of a solver run; every default is filled on load."""
    S: List[int]
    K_normal: int
    L_angle: int
    angle_grid: Optional[int] = None
    eps: float
    gamma: float
    tau: Optional[float] = None
    N0: int = 4
    omega: Optional[List[float]] = None
    action_box: ActionBoxConfig = ActionBoxConfig()
    frequency_model: FrequencyModelConfig = FrequencyModelConfig()
    perturbation: PerturbationConfig = PerturbationConfig()
    tolerances: ToleranceConfig = ToleranceConfig()
    kam: KamConfig = KamConfig()
    nash_moser: NashMoserConfig = NashMoserConfig()
    measure: MeasureConfig = MeasureConfig()
    stability: StabilityConfig = StabilityConfig()
    runtime: RuntimeConfig = RuntimeConfig()

    @field_validator('S')
    @classmethod
    def validate_tangential_sites(cls, v):
        sites = sorted(set(v))
        if len(sites) != len(v):
            raise ValueError("S contains repeated sites")
        if 0 not in sites:
            raise ValueError("S must contain 0")
        if sorted(-k for k in sites) != sites:
            raise ValueError("S must be symmetric (S = -S)")
        return sites

    @field_validator('eps')
    @classmethod
    def validate_eps(cls, v):
        if v < 0:
            raise ValueError("eps must be non-negative")
        return v

    @field_validator('gamma')
    @classmethod
    def validate_gamma(cls, v):
        if not 0.0 < v < 0.25:
            raise ValueError("gamma must lie in (0, 1/4)")
        return v

    @field_validator('L_angle', 'N0')
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("L_angle and N0 must be positive")
        return v

    @model_validator(mode='after')
    def fill_defaults(self):
        if self.K_normal <= max(abs(k) for k in self.S):
            raise ValueError("K_normal must exceed max |k| over S")
        if self.tau is None:
            self.tau = float(2 * len(self.S) + 1)
        if self.angle_grid is None:
            self.angle_grid = 2 * self.L_angle + 1
        if self.angle_grid < 2 * self.L_angle + 1 or self.angle_grid % 2 == 0:
            raise ValueError("angle_grid must be odd and at least 2*L_angle+1")
        if self.kam.s0 is None:
            self.kam.s0 = len(self.S) // 2 + 1
        if self.measure.L_max is None:
            self.measure.L_max = self.L_angle
        if self.omega is not None and len(self.omega) != len(self.S):
            raise ValueError("omega must have one entry per tangential site")
        pert = self.perturbation
        if pert.grid_size is None:
            pert.grid_size = default_grid_size(self.K_normal, pert.degree, pert.max_harmonic)
        if pert.grid_size < 4 * (self.K_normal + 1):
            raise ValueError("perturbation.grid_size must be at least 4*(K_normal+1)")
        return self


def default_grid_size(K_normal: int, degree: int, max_harmonic: int) -> int:
    """Smallest even collocation size keeping the top band of the nonlinearity empty."""
    deg = max(degree, 2)
    size = 2 * (deg * K_normal + max_harmonic) + 2
    size = max(size, 4 * (K_normal + 1))
    return size + (size % 2)


def resolve_threads(cli_threads: Optional[int], config: Optional[SolverConfig] = None) -> int:
    """Thread cap from the CLI flag, then the environment, then the config."""
    if cli_threads:
        return max(1, int(cli_threads))
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        return max(1, int(env_value))
    if config is not None and config.runtime.threads:
        return max(1, config.runtime.threads)
    return 1


class ConfigLoader:
    """Loads and validates solver configurations from YAML files."""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self._config: Optional[SolverConfig] = None

    def load_config(self, config_file: str) -> SolverConfig:
        """Load configuration from YAML file."""
        config_path = Path(config_file)

        if not config_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_file}")

        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                config_data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValueError(f"Invalid YAML in configuration file: {e}")

        self.config_path = str(config_path)
        return self.load_dict(config_data or {})

    def load_dict(self, config_data: Dict[str, Any]) -> SolverConfig:
        """Validate an already parsed mapping."""
        try:
            self._config = SolverConfig(**config_data)
            return self._config
        except (ValidationError, TypeError) as e:
            raise ValueError(f"Configuration validation error: {e}")

    def get_config(self) -> Optional[SolverConfig]:
        """Get the loaded configuration."""
        return self._config

    def validate_config(self, config_data: Dict[str, Any]) -> bool:
        """Validate configuration data without loading."""
        try:
            SolverConfig(**config_data)
            return True
        except (ValidationError, TypeError, ValueError):
            return False

    def get_tolerances(self) -> ToleranceConfig:
        if not self._config:
            raise ValueError("Configuration not loaded")
        return self._config.tolerances

    def get_kam_config(self) -> KamConfig:
        if not self._config:
            raise ValueError("Configuration not loaded")
        return self._config.kam

    def get_measure_config(self) -> MeasureConfig:
        if not self._config:
            raise ValueError("Configuration not loaded")
        return self._config.measure

    def effective_config(self) -> Dict[str, Any]:
        """Fully defaulted configuration as plain data."""
        if not self._config:
            raise ValueError("No configuration loaded")
        return self._config.model_dump(mode="json")

    def export_config(self, output_file: str) -> None:
        """Export the loaded configuration to a YAML file."""
        if not self._config:
            raise ValueError("No configuration loaded to export")

        config_dict = self.effective_config()

        with open(output_file, 'w', encoding='utf-8') as f:
            yaml.dump(config_dict, f, default_flow_style=False, sort_keys=False, indent=2)
