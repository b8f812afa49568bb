"""HTTP surface over the operation handlers.

Run with ``hoidet serve`` or ``uvicorn hoidet.service:app``. Validation
problems map to 422 (pydantic) or 400 (domain errors); missing files to
404.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from . import runners, schemas
from .errors import (CapacityError, ConfigError, ContractError, DataError,
                     GenerationError, NumericError, ShapeError)

app = FastAPI(title="hoidet", description="Fine-grained-anchor HOI detection service")

_DOMAIN_ERRORS = (ConfigError, ContractError, DataError, CapacityError,
                  ShapeError, GenerationError, NumericError, ValueError)


def _guard(fn, *args):
    try:
        return fn(*args)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e)) from e
    except _DOMAIN_ERRORS as e:
        raise HTTPException(status_code=400, detail=str(e)) from e


@app.get("/health")
def health():
    return {"status": "ok"}


@app.get("/info", response_model=schemas.InfoResponse)
def get_info():
    return runners.info()


@app.post("/gradcheck", response_model=schemas.GradcheckResponse)
def gradcheck(req: schemas.GradcheckRequest):
    return _guard(runners.run_gradcheck, req)


@app.post("/synth", response_model=schemas.SynthResponse)
def synth(req: schemas.SynthRequest):
    return _guard(runners.run_synth, req)


@app.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest):
    return _guard(runners.run_train, req)


@app.post("/evaluate", response_model=schemas.EvalResponse)
def evaluate(req: schemas.EvalRequest):
    return _guard(runners.run_eval, req)


@app.post("/evaluate-files", response_model=schemas.EvalResponse)
def evaluate_files(req: schemas.EvalFilesRequest):
    return _guard(runners.run_eval_files, req)


@app.post("/metrics", response_model=schemas.MetricsResponse)
def metrics(req: schemas.MetricsRequest):
    return _guard(runners.run_metrics, req)


@app.post("/split", response_model=schemas.SplitResponse)
def split(req: schemas.SplitRequest):
    return _guard(runners.run_split, req)


@app.post("/anchors", response_model=schemas.DumpAnchorsResponse)
def anchors(req: schemas.DumpAnchorsRequest):
    return _guard(runners.run_dump_anchors, req)


@app.post("/predict", response_model=schemas.PredictResponse)
def predict(req: schemas.PredictRequest):
    return _guard(runners.run_predict, req)
