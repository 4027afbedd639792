"""Training loop, checkpoints, evaluation and prediction files."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data.dataset import Dataset, ground_truths
from .localizer import MomentPrediction
from .metrics import EvalReport, evaluate, throughput
from .model import TSTNet
from .nnmath import NonFiniteError, count_parameters, set_deterministic
from .optim import AdamState, NonFiniteGradient, adam_step, clip_global_norm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: "Checkpoint"):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    optimizer: dict
    epoch: int
    config: dict
    config_hash: str
    rng_state: dict
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls(**torch.load(path, weights_only=False))

    def model(self) -> TSTNet:
        cfg = Config.from_dict(self.config)
        m = TSTNet(cfg)
        m.load_state_dict(self.params)
        return m


def _snapshot(model: TSTNet, state: AdamState, epoch: int, cfg: Config,
              rng: np.random.Generator, history: list[dict]) -> Checkpoint:
    return Checkpoint(
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=state.state_dict(),
        epoch=epoch,
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
        rng_state=copy.deepcopy(rng.bit_generator.state),
        history=[dict(h) for h in history],
    )


@dataclass
class TrainResult:
    model: TSTNet
    checkpoint: Checkpoint
    history: list[dict]


def train(cfg: Config, dataset: Dataset, val: Dataset | None = None,
          resume: Checkpoint | None = None, log_path: str | Path | None = None,
          epochs: int | None = None, eval_every: int = 1) -> TrainResult:
    """Adam on the localization loss; one log record per epoch.

    ``epochs`` overrides ``cfg.epochs`` as the absolute final epoch. Metrics
    are computed on ``val`` when given, else on the training set.
    """
    if cfg.deterministic:
        set_deterministic()
    model = TSTNet(cfg)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    start = 0
    if resume is not None:
        if resume.config_hash != Config.from_dict(resume.config).hash():
            raise ValueError("checkpoint config hash does not match its config")
        model.load_state_dict(resume.params)
        state = AdamState.from_state_dict(resume.optimizer)
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        history = [dict(h) for h in resume.history]
        start = resume.epoch
    end = cfg.epochs if epochs is None else epochs
    params = dict(model.named_parameters())
    last_good = _snapshot(model, state, start, cfg, rng, history)
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start, end):
            model.train()
            losses = []
            for batch in dataset.batches(cfg.batch, shuffle=True, rng=rng):
                try:
                    loss = model.loss(batch)
                    raw = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
                    # ablations can leave whole modules out of the graph
                    grads = {n: g for n, g in zip(params, raw) if g is not None}
                    clip_global_norm(grads, cfg.clip_norm)
                    adam_step(params, grads, state, cfg.lr)
                except (NonFiniteError, NonFiniteGradient) as e:
                    raise TrainingDiverged(f"epoch {epoch + 1}: {e}", last_good) from e
                losses.append(loss.item())
            record = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
            if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == end):
                report, _, val_loss = evaluate_model(model, val if val is not None else dataset, cfg.batch)
                record.update(val_loss=val_loss, r1_03=report.r(1, 0.3), r1_05=report.r(1, 0.5),
                              r1_07=report.r(1, 0.7), miou=report.miou)
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            last_good = _snapshot(model, state, epoch + 1, cfg, rng, history)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model, last_good, history)


Predictions = dict[str, list[MomentPrediction]]


@torch.no_grad()
def predict_dataset(model: TSTNet, ds: Dataset, batch: int = 64, top_n: int | None = None) -> Predictions:
    model.eval()
    out: Predictions = {}
    for b in ds.batches(batch):
        for ep, preds in zip(b.ids, model.predict(b, top_n)):
            out[ep] = preds
    return out


@torch.no_grad()
def evaluate_model(model: TSTNet, ds: Dataset, batch: int = 64) -> tuple[EvalReport, Predictions, float]:
    preds = predict_dataset(model, ds, batch)
    losses = [model.loss(b).item() * len(b) for b in ds.batches(batch)]
    segs = {ep: [(p.t_start, p.t_end) for p in ps] for ep, ps in preds.items()}
    return evaluate(segs, ground_truths(ds)), preds, float(sum(losses) / len(ds))


def measure_throughput(model: TSTNet, ds: Dataset, batch: int = 64) -> dict:
    batches = list(ds.batches(batch))  # collate outside the timed region

    def run() -> int:
        with torch.no_grad():
            for b in batches:
                model.predict(b)
        return len(ds)

    return {"v_qps": throughput(run), "parameters": count_parameters(model)}


def write_predictions(path: str | Path, preds: Predictions) -> None:
    with open(path, "w") as f:
        for ep in sorted(preds):
            f.write(json.dumps({"episode_id": ep,
                                "predictions": [p.to_dict() for p in preds[ep]]}) + "\n")


def read_predictions(path: str | Path) -> Predictions:
    out: Predictions = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["episode_id"]] = [MomentPrediction(p["t_start"], p["t_end"], p["score"])
                                          for p in rec["predictions"]]
    return out
