from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

CSV_SCHEMA_VERSION = 1
# the header names the schema, so a file with no rows is still versioned
SCHEMA_COLUMN = f"schema_v{CSV_SCHEMA_VERSION}"
SCHEMA_PREFIX = "schema_v"


@dataclass
class UpdateReport:
    """Diagnostics from one parameter update. Fields an algorithm does not produce stay None."""

    algo: str
    surrogate_before: Optional[float] = None
    surrogate_after: Optional[float] = None
    kl: Optional[float] = None
    entropy: Optional[float] = None
    value_loss_before: Optional[float] = None
    value_loss_after: Optional[float] = None
    cg_residual: Optional[float] = None
    backtracks: Optional[int] = None
    accepted: Optional[bool] = None
    clip_fraction: Optional[float] = None
    ratio_mean: Optional[float] = None
    ratio_max: Optional[float] = None
    epochs_run: Optional[int] = None
    eta: Optional[float] = None
    eta_critic: Optional[float] = None
    factor_cond_max: Optional[float] = None
    inverses_refreshed: Optional[bool] = None

    @staticmethod
    def columns() -> List[str]:
        return [f.name for f in fields(UpdateReport) if f.name != "algo"]

    def as_row(self) -> Dict[str, str]:
        """CSV cells with full float precision; missing values are empty."""
        row = {}
        for key, value in asdict(self).items():
            if key == "algo":
                continue
            if value is None:
                row[key] = ""
            elif isinstance(value, bool):
                row[key] = str(int(value))
            elif isinstance(value, float):
                row[key] = repr(float(value))
            else:
                row[key] = str(value)
        return row
