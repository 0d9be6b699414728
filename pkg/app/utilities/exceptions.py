class SphereCalibError(Exception):
    """
    Base class for every domain error raised by the calibration pipelines.

    Attributes:
        detail (str): Human readable description of the failure.
        stage (str | None): Pipeline stage that raised the error, set by the
            stage runners in the camera and LiDAR pipelines.
    """

    def __init__(self, detail: str = "", stage: str | None = None):
        super().__init__(detail)
        self.detail = detail
        self.stage = stage

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_record(self) -> dict:
        """
        Builds the machine readable record printed by the CLI on failure.

        Returns:
            dict: The error code, stage and detail.
        """
        return {"error": self.code, "stage": self.stage, "detail": self.detail}


# Geometry

class GeometryError(SphereCalibError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class SphereBehindCamera(GeometryError):
    pass


class SphereEnclosesCamera(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class FitError(SphereCalibError):
    pass


class DegenerateConfiguration(FitError):
    pass


# Camera pipeline

class CameraPipelineError(SphereCalibError):
    pass


class EmptyMask(CameraPipelineError):
    pass


class TooFewEdgePoints(CameraPipelineError):
    pass


class Exhausted(CameraPipelineError):
    pass


class TooFewInliers(CameraPipelineError):
    pass


class NoExteriorCandidates(CameraPipelineError):
    pass


class NoValidEllipse(CameraPipelineError):
    pass


# LiDAR pipeline

class LidarPipelineError(SphereCalibError):
    pass


class TooFewPoints(LidarPipelineError):
    pass


class NoPlaneFound(LidarPipelineError):
    pass


class NoCircleFound(LidarPipelineError):
    pass


class AllClustersRemoved(LidarPipelineError):
    pass


class Degenerate(LidarPipelineError):
    pass


class NoHypotheses(LidarPipelineError):
    pass


# Solver

class SolverError(SphereCalibError):
    pass


class NotConverged(SolverError):
    pass


class NonFiniteResidual(SolverError):
    pass


class TooFewPairs(SolverError):
    pass


# Simulation and data

class SimulationError(SphereCalibError):
    pass


class SphereNotVisible(SimulationError):
    pass


class DataError(SphereCalibError):
    pass


class IoFailure(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class ConfigError(DataError):
    pass


QUALITY_ERRORS = (NotConverged, TooFewPairs)
