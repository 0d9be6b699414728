from contextlib import asynccontextmanager
from pathlib import Path

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import settings
from app.routers.calibration import calibration
from app.routers.evaluation import evaluation
from app.routers.info import info
from app.routers.simulation import simulation
from app.utilities.logger import logger
from app.utilities.monitoring import init_error_reporting


@asynccontextmanager
async def lifespan(app: FastAPI):
    Path(settings.data_dir).mkdir(parents=True, exist_ok=True)
    logger.info(f"Serving data from {Path(settings.data_dir).resolve()}")
    yield


init_error_reporting()


app = FastAPI(
    title="Sphere Calibration API",
    description="LiDAR to camera extrinsic calibration with a spherical target",
    version="0.1.0",
    root_path=settings.root_path,
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[settings.front_url],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


app.include_router(
    info.router,
    tags=["info"],
    prefix="/v1/info"
)


app.include_router(
    simulation.router,
    tags=["simulation"],
    prefix="/v1/simulation"
)


app.include_router(
    calibration.router,
    tags=["calibration"],
    prefix="/v1/calibration"
)


app.include_router(
    evaluation.router,
    tags=["evaluation"],
    prefix="/v1/evaluation"
)


if __name__ == '__main__':
    uvicorn.run(
        "app.main:app",
        host="0.0.0.0",
        port=5001,
        log_level="info",
        reload=True,
    )
