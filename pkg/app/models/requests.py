from typing import Any, Optional, Union

from pydantic import BaseModel

MetricValue = Union[float, str]


class SimulationRequest(BaseModel):
    """
    Body of a dataset generation request.

    Attributes:
        out_dir (str): Dataset directory under the data directory.
        overrides (dict[str, Any]): Dotted config keys to values.
        seed (Optional[int]): Seed of every generator.
    """
    out_dir: str = "dataset"
    overrides: dict[str, Any] = {}
    seed: Optional[int] = None


class CalibrationRequest(BaseModel):
    """
    Body of a calibration request; paths are relative to the data directory.

    Attributes:
        manifest (str): Dataset manifest.
        report (str): Report destination.
        overrides (dict[str, Any]): Dotted config keys to values.
        seed (Optional[int]): Seed of every generator.
    """
    manifest: str
    report: str = "report.json"
    overrides: dict[str, Any] = {}
    seed: Optional[int] = None


class EvaluationRequest(BaseModel):
    reports: list[str]
    truth: str
    csv: Optional[str] = None


class MetricRow(BaseModel):
    configuration: str
    trans_err_m: MetricValue
    rot_err_deg: MetricValue
    reproj_px: MetricValue
