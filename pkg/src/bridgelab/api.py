"""HTTP service over the training, evaluation and decoding workflows.

Paths in requests are paths on the machine running the service.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .config import TrainConfig, config_from_kv
from .corpus import save_corpus, split, synth_corpus
from .metrics import MetricReport
from .schedule import ScheduleParams, epoch_schedule
from .training import TrainingDivergedError, comparison_table, compare, decode_file, evaluate, train

app = FastAPI(title="bridgelab", version=__version__)


class ScheduleResponse(BaseModel):
    epoch: int
    alpha: float
    beta: float


class SynthRequest(BaseModel):
    out: str
    params: dict[str, str] = Field(default_factory=dict)
    split: bool = False
    split_seed: int = 0


class SynthResponse(BaseModel):
    files: list[str]
    contexts: int
    pairs: int


class TrainRequest(BaseModel):
    # flat dotted config keys, e.g. {"seed": "0", "schedule.k": "5"}
    config: dict[str, str]


class EpochLogModel(BaseModel):
    epoch: int
    alpha: float
    beta: float | None
    train_nll: float
    replaced_fraction: float
    valid_ppl: float | None
    wall_time: float


class TrainResponse(BaseModel):
    checkpoint: str
    log: str
    best_valid_ppl: float | None
    epochs: list[EpochLogModel]


class DecodeOptions(BaseModel):
    beam: int = Field(5, ge=1)
    greedy: bool = False
    max_len: int = Field(20, ge=1)
    length_penalty: float = 1.0


class EvaluateRequest(DecodeOptions):
    checkpoint: str
    test: str


class ReportModel(BaseModel):
    ppl: float
    bleu2: float
    bleu4: float
    distinct1: float
    distinct2: float
    ah_bleu2: float
    num_contexts: int
    num_references: int
    text: str


class DecodeRequest(DecodeOptions):
    checkpoint: str
    contexts: str
    out: str


class DecodeResponse(BaseModel):
    out: str
    lines: int


class CompareRequest(BaseModel):
    configs: list[dict[str, str]]
    seeds: list[int] = Field(default_factory=list)
    out_dir: str | None = None


class CompareRowModel(BaseModel):
    label: str
    seed: str
    report: ReportModel


class CompareResponse(BaseModel):
    table: str
    rows: list[CompareRowModel]


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _report(report: MetricReport) -> ReportModel:
    return ReportModel(**dataclasses.asdict(report), text=report.to_text())


def _config(kv: dict[str, str]) -> TrainConfig:
    cfg = config_from_kv(kv)
    cfg.check_paths()
    return cfg


@app.exception_handler(TrainingDivergedError)
async def _diverged(request: Request, exc: TrainingDivergedError):
    return JSONResponse(status_code=422, content={"detail": str(exc)})


# config, corpus, checkpoint and schedule errors all derive from ValueError
@app.exception_handler(ValueError)
@app.exception_handler(OSError)
async def _user_error(request: Request, exc: Exception):
    return JSONResponse(status_code=400, content={"detail": str(exc)})


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok", "version": __version__}


@app.get("/schedule/{epoch}", response_model=ScheduleResponse)
def schedule(epoch: int, k: float = 5.0, w: int = 32, gamma: float = 0.9):
    s = epoch_schedule(epoch, ScheduleParams(k=k, w=w, gamma=gamma))
    return ScheduleResponse(epoch=s.epoch, alpha=s.alpha, beta=s.beta)


@app.post("/synth", response_model=SynthResponse)
def synth(req: SynthRequest):
    cfg = config_from_kv({"seed": "0", **{f"synth.{k}": v for k, v in req.params.items()}})
    pairs = synth_corpus(cfg.synth)
    out = Path(req.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    files = []
    if req.split:
        for name, part in zip(("train", "valid", "test"), split(pairs, seed=req.split_seed)):
            path = out.with_name(f"{out.stem}.{name}{out.suffix}")
            save_corpus(part, path)
            files.append(str(path))
    else:
        save_corpus(pairs, out)
        files.append(str(out))
    return SynthResponse(files=files, contexts=len(pairs), pairs=sum(len(p.responses) for p in pairs))


@app.post("/train", response_model=TrainResponse)
def train_endpoint(req: TrainRequest):
    cfg = _config(req.config)
    result = train(cfg)
    epochs = [EpochLogModel(**{**dataclasses.asdict(e), "beta": _finite(e.beta), "valid_ppl": _finite(e.valid_ppl)})
              for e in result.logs]
    return TrainResponse(checkpoint=cfg.checkpoint, log=cfg.log_path,
                         best_valid_ppl=_finite(result.best_valid_ppl), epochs=epochs)


@app.post("/evaluate", response_model=ReportModel)
def evaluate_endpoint(req: EvaluateRequest):
    return _report(evaluate(req.checkpoint, req.test, req.beam, req.greedy, req.max_len, req.length_penalty))


@app.post("/decode", response_model=DecodeResponse)
def decode_endpoint(req: DecodeRequest):
    lines = decode_file(req.checkpoint, req.contexts, req.out, req.beam, req.greedy, req.max_len, req.length_penalty)
    return DecodeResponse(out=req.out, lines=len(lines))


@app.post("/compare", response_model=CompareResponse)
def compare_endpoint(req: CompareRequest):
    configs = [_config(kv) for kv in req.configs]
    rows = compare(configs, req.seeds or None, req.out_dir)
    return CompareResponse(
        table=comparison_table(rows),
        rows=[CompareRowModel(label=r.label, seed=r.seed, report=_report(r.report)) for r in rows],
    )
