"""
FastAPI application exposing the experiment pipelines
"""
import logging
import os

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException, status
from fastapi.concurrency import run_in_threadpool
from fastapi.middleware.cors import CORSMiddleware

from errors import ConfigError, NumericalError, PreconditionError
from experiment_service import ensure_valid, run_beta, run_failprob, run_simulate, validate_config
from models import (
    BetaResponse,
    BetaRow,
    ExperimentConfig,
    FailProbResponse,
    FailProbRow,
    SeriesRow,
    SimulateResponse,
    ValidationResponse,
)

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

app = FastAPI(
    title="Random Parabolic RHC API",
    description="Spectral gaps, closed-loop simulations and failure probabilities for parabolic equations with random diffusion",
    version="1.0.0"
)

# Configure CORS - use environment variable for frontend URL
frontend_url = os.environ.get("FRONTEND_URL", "*")
allowed_origins = [frontend_url] if frontend_url != "*" else ["*"]

app.add_middleware(
    CORSMiddleware,
    allow_origins=allowed_origins,
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)


def _http_error(exc: Exception, action: str) -> HTTPException:
    if isinstance(exc, (ConfigError, PreconditionError)):
        return HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))
    if isinstance(exc, NumericalError):
        return HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=str(exc))
    logger.exception("%s failed", action)
    return HTTPException(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        detail=f"{action} failed: {str(exc)}"
    )


@app.get("/")
async def root():
    """Root endpoint with API information"""
    return {
        "name": "Random Parabolic RHC API",
        "version": "1.0.0",
        "endpoints": {
            "POST /validate": "Check an experiment config against every cross-field invariant",
            "POST /beta": "Spectral gap table beta_N and its N^2 scaling fit",
            "POST /failprob": "Empirical failure probabilities and their analytic upper bounds",
            "POST /simulate": "Closed-loop ensemble simulation under the explicit feedback",
        },
        "documentation": "/docs"
    }


@app.post("/validate", response_model=ValidationResponse)
async def validate_endpoint(config: ExperimentConfig):
    """List every violated invariant; never runs a solver."""
    issues = validate_config(config)
    return ValidationResponse(valid=not issues, issues=issues)


@app.post("/beta", response_model=BetaResponse)
async def beta_endpoint(config: ExperimentConfig):
    try:
        output = await run_in_threadpool(run_beta, config)
    except Exception as exc:
        raise _http_error(exc, "Spectral gap computation") from exc

    frame = output.frames["beta"]
    rows = [BetaRow(**record) for record in frame.to_dict(orient="records")]
    summary = output.summary
    return BetaResponse(
        rows=rows,
        exponent=summary.get("exponent"),
        c_beta_fit=summary.get("c_beta_fit"),
        r_squared=summary.get("r_squared"),
        c_beta_lower=summary.get("c_beta_lower"),
        tail_exponent=summary.get("tail_exponent"),
        tail_min_N=summary.get("tail_min_N"),
    )


@app.post("/failprob", response_model=FailProbResponse)
async def failprob_endpoint(config: ExperimentConfig):
    try:
        output = await run_in_threadpool(run_failprob, config)
    except Exception as exc:
        raise _http_error(exc, "Failure probability sweep") from exc

    rows = [
        FailProbRow(**{key: value for key, value in record.items() if key != "poly_bound"})
        for record in output.frames["failprob"].to_dict(orient="records")
    ]
    return FailProbResponse(family=output.summary["family"], kappa0=output.summary.get("kappa0"), rows=rows)


@app.post("/simulate", response_model=SimulateResponse)
async def simulate_endpoint(config: ExperimentConfig):
    # the HTTP surface always runs single-worker; the process pool is gunicorn's
    try:
        ensure_valid(config)
        output = await run_in_threadpool(run_simulate, config, 1)
    except Exception as exc:
        raise _http_error(exc, "Simulation") from exc

    series = [SeriesRow(**record) for record in output.frames["trajectory"].to_dict(orient="records")]
    return SimulateResponse(summary=output.summary, series=series)


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {
        "status": "healthy",
        "configuration": {
            "workers_per_run": os.environ.get("RHC_WORKERS", "1"),
            "output_dir": os.environ.get("RHC_OUTPUT_DIR", "runs"),
            "log_level": os.environ.get("RHC_LOG_LEVEL", "INFO"),
            "frontend_url": frontend_url,
        }
    }


if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(level=os.environ.get("RHC_LOG_LEVEL", "INFO").upper())
    print("Starting Random Parabolic RHC API...")
    print("Documentation available at: http://localhost:8000/docs")
    print("Health check at: http://localhost:8000/health")

    uvicorn.run(
        app,
        host="0.0.0.0",
        port=int(os.environ.get("PORT", 8000)),
        reload=False
    )
