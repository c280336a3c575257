"""FastAPI application serving report generation, scoring and the scan benchmark."""

import logging
import os
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Annotated, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.concurrency import run_in_threadpool
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .errors import ReportEngineError
from .services.bench import bench_scan_vs_attention, doubling_ratios
from .services.engine import ReportEngine
from .services.metrics import EvalPair, evaluate_corpus

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHECKPOINT_ENV = "REPORT_ENGINE_CHECKPOINT"

# Loaded at startup when CHECKPOINT_ENV points at a checkpoint
report_engine: Optional[ReportEngine] = None


class EvaluateRow(BaseModel):
    id: str
    hypothesis: str
    reference: str


class EvaluateRequest(BaseModel):
    data: List[EvaluateRow]
    cider_d: bool = True


class GenerateRequest(BaseModel):
    sample_ids: List[str]
    beam_width: Optional[int] = Field(default=None, ge=1)
    max_len: Optional[int] = Field(default=None, ge=1)


class BenchRequest(BaseModel):
    lengths: List[Annotated[int, Field(ge=1, le=4096)]] = Field(default=[64, 128, 256], min_length=1, max_length=8)
    repeats: int = Field(default=3, ge=1, le=10)
    width: int = Field(default=32, ge=1, le=256)
    d_state: int = Field(default=8, ge=1, le=64)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the checkpoint named by the environment, if any."""
    global report_engine

    checkpoint = os.environ.get(CHECKPOINT_ENV)
    if checkpoint:
        logger.info(f"Loading report model from {checkpoint}...")
        try:
            report_engine = ReportEngine.from_checkpoint(checkpoint)
            report_engine.load_data()
        except (ReportEngineError, FileNotFoundError) as e:
            logger.error(f"Could not load checkpoint {checkpoint}: {e}")
            report_engine = None
    else:
        logger.info(f"{CHECKPOINT_ENV} not set; generation endpoints are disabled")

    yield

    logger.info("Shutting down report engine...")
    report_engine = None


app = FastAPI(title="Report Engine API", lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],  # In production, replace with specific origins
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
async def root():
    """Root endpoint."""
    return {"message": "Report Engine API", "status": "running"}


@app.get("/health")
async def health():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "model_loaded": report_engine is not None,
    }


@app.post("/api/evaluate")
async def evaluate(request: EvaluateRequest):
    """Score hypothesis/reference pairs with BLEU, ROUGE-L, METEOR and CIDEr."""
    try:
        corpus = [EvalPair.from_text(row.id, row.hypothesis, row.reference) for row in request.data]
        return evaluate_corpus(corpus, cider_d=request.cider_d).to_dict()
    except ReportEngineError as e:
        logger.error(f"Error scoring corpus: {e}")
        raise HTTPException(status_code=400, detail=str(e))


@app.post("/api/generate")
async def generate(request: GenerateRequest):
    """Generate reports for samples of the loaded manifest."""
    if not report_engine:
        raise HTTPException(status_code=503, detail="Report model not loaded")

    records = report_engine.manifest.by_id()
    missing = [i for i in request.sample_ids if i not in records]
    if missing:
        raise HTTPException(status_code=404, detail=f"Unknown sample ids: {', '.join(missing)}")

    try:
        rows = await run_in_threadpool(
            report_engine.generate_reports,
            records=[records[i] for i in request.sample_ids],
            beam_width=request.beam_width,
            max_len=request.max_len,
        )
    except ReportEngineError as e:
        logger.error(f"Error generating reports: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    return {"data": [vars(r) for r in rows]}


@app.post("/api/bench")
async def bench(request: BenchRequest):
    """Time the selective scan against causal attention at small lengths."""
    try:
        records = await run_in_threadpool(
            bench_scan_vs_attention, request.lengths, request.repeats, request.width, request.d_state
        )
    except ReportEngineError as e:
        logger.error(f"Error running benchmark: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    return {
        "data": [vars(r) for r in records],
        "ratios": {kind: doubling_ratios(records, kind) for kind in ("scan", "attention")},
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=8000)
