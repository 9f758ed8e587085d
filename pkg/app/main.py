"""
Stigmark - stigmergic memory sequence classifiers and MNIST benchmarks

Main FastAPI application entry point.
"""
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.api.routes import router
from app.core.config import get_settings
from app.schemas.models import ErrorResponse

settings = get_settings()

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting Stigmark application...")
    logger.info(f"Results directory: {settings.results_dir}")
    missing = [name for name, path in settings.mnist_files.items() if path is None]
    if missing:
        logger.warning(f"MNIST IDX files missing ({', '.join(missing)}); only synthetic experiments will run")
    if not settings.stroke_samples_dir.exists():
        logger.warning(f"No stroke corpus under {settings.strokes_dir}")
    logger.info("Application startup complete")

    yield

    logger.info("Shutting down Stigmark application...")


app = FastAPI(
    title="Stigmark",
    description="Stigmergic memory RNN benchmarks on spatial and temporal MNIST",
    version="1.0.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(router)


@app.exception_handler(Exception)
async def unhandled_error(request: Request, exc: Exception):
    logger.exception(f"Unhandled error on {request.url.path}")
    return JSONResponse(
        status_code=500,
        content=ErrorResponse(error="Internal server error", detail=str(exc)).model_dump(),
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.main:app",
        host=settings.host,
        port=settings.port,
        reload=True
    )
