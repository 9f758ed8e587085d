"""
API routes for the benchmark harness.
"""
import logging
from pathlib import Path

from fastapi import APIRouter, HTTPException
from fastapi.responses import FileResponse

from app.core.config import get_settings
from app.schemas.models import (
    DatasetKind,
    ErrorResponse,
    ExperimentConfig,
    HealthResponse,
    ModelKind,
    ParamReport,
    RunReport,
)
from app.services.bench import ExperimentError, ExperimentRunner, report_params
from app.services.data import DatasetError
from app.services.nn import ModelConfigError

logger = logging.getLogger(__name__)
settings = get_settings()

router = APIRouter()

DOWNLOAD_TYPES = {".json": "application/json", ".csv": "text/csv"}


@router.get("/api/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint."""
    return HealthResponse(status="healthy", results_dir=str(settings.results_dir))


@router.get("/api/params", response_model=ParamReport, responses={400: {"model": ErrorResponse}})
async def parameter_report(model: ModelKind, dataset: DatasetKind):
    """Itemized parameter count of a (model, dataset) pairing."""
    try:
        return report_params(model, dataset)
    except ModelConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/api/experiments", response_model=RunReport, responses={400: {"model": ErrorResponse}})
async def run_experiment(cfg: ExperimentConfig):
    """
    Run a full experiment and return its report.
    Progress is logged on the server; the report and curves land in results_dir.
    A client-chosen "out" must be a bare .json file name inside results_dir.
    """
    if cfg.out is not None:
        name = str(cfg.out)
        if Path(name).name != name or ".." in name or "\\" in name or not name.endswith(".json"):
            raise HTTPException(status_code=400, detail="out must be a bare .json file name")
        cfg = cfg.model_copy(update={"out": settings.results_dir / name})
    try:
        return await ExperimentRunner.run_experiment_async(cfg, settings)
    except (ExperimentError, DatasetError, ModelConfigError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception("Experiment failed")
        raise HTTPException(status_code=500, detail=f"Experiment failed: {str(e)}")


@router.get("/api/download/{filename}")
async def download_file(filename: str):
    """
    Download a report or curve file.

    Supports: .json, .csv
    """
    suffix = filename[filename.rfind("."):] if "." in filename else ""
    # Only known extensions and no path traversal
    if suffix not in DOWNLOAD_TYPES or "/" in filename or "\\" in filename or ".." in filename:
        raise HTTPException(status_code=400, detail="Invalid filename")

    filepath = settings.results_dir / filename
    if not filepath.exists():
        raise HTTPException(status_code=404, detail="File not found")

    return FileResponse(path=filepath, filename=filename, media_type=DOWNLOAD_TYPES[suffix])
