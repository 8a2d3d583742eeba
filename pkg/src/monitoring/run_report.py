"""
Typed run records and their JSON / CSV persistence.

Reports are validated against configs/schema/run_report_schema.json before
they are written. Payloads carry no timestamps and are dumped with sorted
keys so that a fixed seed and config reproduce the same bytes.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
DEFAULT_SCHEMA = Path(__file__).resolve().parents[2] / "configs" / "schema" / "run_report_schema.json"


class ReportKind(Enum):
    SOLVE = "solve"
    REDUCE = "reduce"
    MEASURE = "measure"
    STABILITY = "stability"


class RunStatus(Enum):
    OK = "ok"
    EXCLUDED = "excluded"
    FAILED = "failed"


@dataclass
class IterationRecord:
    """One outer Newton iterate."""
    n: int
    gamma_n: float
    N_n: float
    residual: float
    residual_high: float
    zeta_norm: float
    zeta_ratio: float
    step_norm: float
    kam_steps: int
    min_melnikov_ratio: float
    triangular_residual: float
    refine_steps: int


@dataclass
class LadderStepRecord:
    """One KAM step of the ladder run at outer iterate ``outer``."""
    outer: int
    nu: int
    N_scale: float
    remainder: float
    remainder_high: float
    pattern_bound: float
    homological_residual: float
    min_melnikov_ratio: float
    block_drift: float
    generator_norm: float
    symplectic_residual: float
    self_adjoint_residual: float

    @classmethod
    def from_ladder(cls, outer: int, record: Dict[str, Any]) -> "LadderStepRecord":
        return cls(outer=outer, **record)


@dataclass
class RunReport:
    command: str
    config: Dict[str, Any]
    status: str = RunStatus.OK.value
    omega: Optional[List[float]] = None
    converged: bool = False
    iterations: List[IterationRecord] = field(default_factory=list)
    ladder: List[LadderStepRecord] = field(default_factory=list)
    final: Dict[str, Any] = field(default_factory=dict)
    exclusion: Optional[Dict[str, Any]] = None
    error: Optional[Dict[str, Any]] = None
    stability: Optional[Dict[str, Any]] = None
    size_audit: Optional[Dict[str, Any]] = None
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(asdict(self))


@dataclass
class MeasureReport:
    config: Dict[str, Any]
    fractions: Dict[str, Dict[str, float]] = field(default_factory=dict)
    sweep: List[Dict[str, Any]] = field(default_factory=list)
    scaling_fits: Dict[str, Any] = field(default_factory=dict)
    witness_log: List[Dict[str, Any]] = field(default_factory=list)
    line_measure: Optional[Dict[str, Any]] = None
    command: str = ReportKind.MEASURE.value
    status: str = RunStatus.OK.value
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(asdict(self))


def to_plain(value: Any) -> Any:
    """Convert numpy scalars/arrays, enums and dataclasses to JSON-ready python values."""
    if is_dataclass(value) and not isinstance(value, type):
        return to_plain(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        if np.iscomplexobj(value):
            return {"real": to_plain(value.real), "imag": to_plain(value.imag)}
        return to_plain(value.tolist())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, complex):
        return {"real": to_plain(value.real), "imag": to_plain(value.imag)}
    return value


class ReportWriter:
    """Writes validated JSON reports and the CSV series used for plotting."""

    def __init__(self, schema_path: Optional[Path] = None, write_csv: bool = True):
        self.schema_path = Path(schema_path) if schema_path else DEFAULT_SCHEMA
        self.write_csv = write_csv
        self._schema: Optional[Dict[str, Any]] = None

    @property
    def schema(self) -> Dict[str, Any]:
        if self._schema is None:
            with open(self.schema_path, 'r', encoding='utf-8') as f:
                self._schema = json.load(f)
        return self._schema

    def validate(self, payload: Dict[str, Any]) -> None:
        try:
            jsonschema.validate(payload, self.schema)
        except jsonschema.ValidationError as e:
            raise ValueError(f"Report validation error: {e.message}")

    @staticmethod
    def dumps(payload: Dict[str, Any]) -> str:
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, report, path: str) -> List[Path]:
        """Write ``report`` to ``path`` and its CSV companions; returns every written path."""
        payload = report.to_dict()
        self.validate(payload)
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.dumps(payload) + "\n", encoding='utf-8')
        written = [out]
        if self.write_csv:
            written.extend(self._write_series(report, out))
        logger.info(f"Report written to {out}")
        return written

    def _write_series(self, report, out: Path) -> List[Path]:
        written = []
        tables = {}
        if isinstance(report, RunReport):
            tables["residuals"] = residual_table(report)
            if report.ladder:
                tables["ladder"] = pd.DataFrame([asdict(r) for r in report.ladder])
        elif isinstance(report, MeasureReport) and report.sweep:
            tables["sweep"] = sweep_table(report)
        for name, frame in tables.items():
            path = out.with_name(f"{out.stem}_{name}.csv")
            frame.to_csv(path, index=False, float_format="%.17g")
            written.append(path)
        return written


def residual_table(report: RunReport) -> pd.DataFrame:
    columns = [f.name for f in IterationRecord.__dataclass_fields__.values()]
    return pd.DataFrame([asdict(r) for r in report.iterations], columns=columns)


def sweep_table(report: MeasureReport) -> pd.DataFrame:
    frame = pd.DataFrame(report.sweep)
    sort_by = [c for c in ("condition", "value") if c in frame.columns]
    return frame.sort_values(sort_by).reset_index(drop=True) if sort_by else frame
