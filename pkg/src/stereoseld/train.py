"""Toy training loop: overfit the tiny model on a synthetic event set.

Desk-scale by design — a few hundred Adam steps on a CPU. The loop is
deterministic for a fixed seed in single-thread mode: data, batching
order, and initial weights all derive from the seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import bridge, codec, loss as loss_mod, metrics
from .data import ClipRecord, synth_dataset
from .errors import InputError, NumericalError
from .frontend import extract_features
from .network import ModelConfig, SeldModel, build_model


@dataclass
class ToyTrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    n_clips: int = 20
    max_steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    synth_seed: int | None = None  # defaults to ``seed``
    eval_every: int = 25
    early_stop: bool = True
    f20_target: float = 0.9
    loss_ratio_target: float = 0.1


@dataclass
class LogRow:
    step: int
    batch_loss: float
    train_loss: float | None = None  # full-set loss, filled on eval steps
    f20: float | None = None


@dataclass
class ToyTrainResult:
    model: SeldModel
    records: list[ClipRecord]
    steps_run: int
    initial_loss: float
    final_loss: float
    f20: float
    early_stopped: bool
    wall_s: float
    log: list[LogRow]


def _prepare_tensors(records: list[ClipRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    feats = np.stack([extract_features(r.audio).data for r in records])
    targets = np.stack([codec.encode(r.labels) for r in records])
    return torch.from_numpy(feats), torch.from_numpy(targets)


def _full_set_loss(model: SeldModel, feats: torch.Tensor, targets: np.ndarray) -> float:
    """Mean per-clip loss over the whole set, float64, no autograd."""
    values = []
    with torch.no_grad():
        for start in range(0, feats.shape[0], 8):
            preds = model(feats[start:start + 8]).cpu().numpy()
            for pred, target in zip(preds, targets[start:start + 8]):
                values.append(
                    loss_mod.pit_loss(
                        pred.astype(np.float64), target.astype(np.float64)
                    ).total
                )
    return float(np.mean(values))


def _train_set_f20(
    model: SeldModel, feats: torch.Tensor, records: list[ClipRecord]
) -> float:
    pred_events: list[codec.Event] = []
    ref_events: list[codec.Event] = []
    with torch.no_grad():
        for start in range(0, feats.shape[0], 8):
            preds = model(feats[start:start + 8]).cpu().numpy()
            for offset, pred in enumerate(preds):
                idx = start + offset
                base = idx * codec.N_FRAMES
                pred_events.extend(codec.shift_frames(codec.decode(pred), base))
                ref_events.extend(codec.shift_frames(records[idx].labels, base))
    return metrics.score(pred_events, ref_events).f20


def run_toy_training(
    config: ToyTrainConfig, model: SeldModel | None = None
) -> ToyTrainResult:
    """Train (and usually overfit) on a synthetic set; see ToyTrainConfig."""
    if config.n_clips < 1:
        raise InputError("n_clips must be >= 1")
    if config.max_steps < 1:
        raise InputError("max_steps must be >= 1")
    if config.batch_size < 1:
        raise InputError("batch_size must be >= 1")

    start_time = time.perf_counter()
    synth_seed = config.seed if config.synth_seed is None else config.synth_seed
    records = synth_dataset(config.n_clips, synth_seed)
    feats, targets_t = _prepare_tensors(records)
    targets_np = targets_t.numpy()
    if model is None:
        model = build_model(config.model, seed=config.seed)
    model.train()

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    batch_size = min(config.batch_size, config.n_clips)

    model.eval()
    initial_loss = _full_set_loss(model, feats, targets_np)
    model.train()
    log: list[LogRow] = [LogRow(step=0, batch_loss=initial_loss,
                                train_loss=initial_loss)]

    def batches():
        while True:
            order = shuffle_rng.permutation(config.n_clips)
            for start in range(0, config.n_clips - batch_size + 1, batch_size):
                yield order[start:start + batch_size]

    early_stopped = False
    steps_run = 0
    batch_iter = batches()
    for step in range(1, config.max_steps + 1):
        idx = next(batch_iter)
        pred = model(feats[idx])
        batch_loss = bridge.pit_loss(pred, targets_t[idx])
        if not torch.isfinite(batch_loss):
            raise NumericalError(
                f"non-finite training loss at step {step}: "
                f"{float(batch_loss.detach())!r}"
            )
        optimizer.zero_grad()
        batch_loss.backward()
        optimizer.step()
        steps_run = step
        row = LogRow(step=step, batch_loss=float(batch_loss.detach()))
        log.append(row)

        if config.early_stop and step % config.eval_every == 0:
            model.eval()
            row.train_loss = _full_set_loss(model, feats, targets_np)
            if row.train_loss <= config.loss_ratio_target * initial_loss:
                row.f20 = _train_set_f20(model, feats, records)
                if row.f20 >= config.f20_target:
                    model.train()
                    early_stopped = True
                    break
            model.train()

    model.eval()
    final_loss = _full_set_loss(model, feats, targets_np)
    f20 = _train_set_f20(model, feats, records)
    return ToyTrainResult(
        model=model,
        records=records,
        steps_run=steps_run,
        initial_loss=initial_loss,
        final_loss=final_loss,
        f20=f20,
        early_stopped=early_stopped,
        wall_s=time.perf_counter() - start_time,
        log=log,
    )


def write_loss_csv(path: str, log: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,batch_loss,train_loss,f20\n")
        for row in log:
            train = "" if row.train_loss is None else f"{row.train_loss:.8f}"
            f20 = "" if row.f20 is None else f"{row.f20:.6f}"
            fh.write(f"{row.step},{row.batch_loss:.8f},{train},{f20}\n")
