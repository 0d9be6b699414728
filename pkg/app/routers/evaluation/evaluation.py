from fastapi import APIRouter

from app.helpers import batch
from app.models.requests import EvaluationRequest, MetricRow
from app.utilities.exceptions import SphereCalibError
from app.utilities.http import data_path, raise_http

router = APIRouter()


@router.post("", status_code=200)
def evaluate_reports(request: EvaluationRequest) -> list[MetricRow]:
    """
    Tabulates the errors of calibration reports against a truth file.

    Returns:
    - list[MetricRow]: One row per report, N/A outside the plausibility bounds.
    """
    reports = [data_path(report) for report in request.reports]
    csv = data_path(request.csv) if request.csv else None
    try:
        table = batch.cmd_evaluate(reports, data_path(request.truth), csv)
    except SphereCalibError as error:
        raise_http(error)
    return [MetricRow(**row) for row in table.to_dict(orient="records")]
