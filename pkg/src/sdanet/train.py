"""Patch-wise training loop with seeded determinism and checkpointing."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import Sample, extract_training_patches, generate_density_map, random_hflip
from .errors import NumericalError
from .inference import predict_array
from .losses import LossConfig, Metrics, evaluate_metrics, total_loss
from .model import ModelConfig, ModelParams, build_model, forward
from .optim import AdamState, adam_step
from .tensor import backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int
    lr: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    validate_every: int = 0
    sigma: float = 4.0
    data: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not isinstance(self.steps, int) or self.steps <= 0:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        cfg = cls(**obj)
        if cfg.data is not None and not os.path.isabs(cfg.data):
            cfg.data = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.data)
        return cfg

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "batch_size": self.batch_size,
                "seed": self.seed, "checkpoint_every": self.checkpoint_every,
                "validate_every": self.validate_every, "sigma": self.sigma, "data": self.data,
                "model": self.model.to_dict(), "loss": self.loss.to_dict()}


@dataclass
class TrainLog:
    entries: List[dict] = field(default_factory=list)

    def append(self, entry: dict):
        if self.entries and entry["step"] <= self.entries[-1]["step"]:
            raise ValueError("train log steps must increase")
        self.entries.append(entry)

    def write_ndjson(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(e) + "\n")


def _epoch_patches(dataset: Sequence[Sample], gts, rng: np.random.Generator):
    """Nine patches per image, randomly flipped, in shuffled order."""
    pool = []
    for sample, gt in zip(dataset, gts):
        for pair in extract_training_patches(sample.image, gt, rng):
            pool.append(random_hflip(pair, rng))
    order = rng.permutation(len(pool))
    return [pool[i] for i in order]


def _count_metrics(params: ModelParams, samples: Sequence[Sample]) -> Metrics:
    return evaluate_metrics((predict_array(params, s.image).count, s.heads.shape[0]) for s in samples)


def train(cfg: TrainConfig, dataset: Sequence[Sample], out_dir=None,
          validation: Optional[Sequence[Sample]] = None):
    """Optimise a freshly initialised model; returns ``(params, TrainLog)``.

    The whole trajectory is a function of ``cfg.seed``, the data and the config.
    With ``out_dir`` set, periodic checkpoints, ``final.ckpt`` and
    ``train_log.ndjson`` are written there.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    mcfg = cfg.model
    for s in dataset:
        if s.image.shape[0] != mcfg.input_channels:
            raise ValueError(f"{s.image_id}: image has {s.image.shape[0]} channels, "
                             f"model expects {mcfg.input_channels}")
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = build_model(mcfg, np.random.default_rng(init_seq), seed=cfg.seed)
    rng = np.random.default_rng(data_seq)
    gts = [generate_density_map(s.heads, s.image.shape[1], s.image.shape[2], cfg.sigma)
           for s in dataset]
    opt = AdamState.for_params(params.tensors, lr=cfg.lr)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    train_log = TrainLog()
    queue: list = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = []
        while len(batch) < cfg.batch_size:
            if not queue:
                queue = _epoch_patches(dataset, gts, rng)
            batch.append(queue.pop(0))
        if len({p.image.shape for p in batch}) != 1:
            raise ValueError("batch_size > 1 needs equally sized training images")
        x = np.stack([p.image for p in batch])
        d = np.stack([p.density for p in batch])

        params.zero_grad()
        out = forward(params, x)
        losses = total_loss(out, d, cfg.loss, refine=mcfg.use_refine)
        values = losses.as_dict()
        if not all(np.isfinite(v) for v in values.values()):
            raise NumericalError(f"non-finite loss at step {step}: {values}")
        backward(losses.objective)
        adam_step(params.tensors, params.grads(), opt)

        entry = {"step": step, **values, "wall_time": time.perf_counter() - t0}
        if validation and cfg.validate_every and step % cfg.validate_every == 0:
            entry["val"] = _count_metrics(params, validation).to_dict()
        train_log.append(entry)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(params, mcfg, os.path.join(out_dir, f"step_{step:06d}.ckpt"))
        if step % 100 == 0:
            log.info("step %d total=%.6g l_att=%.4g l_e=%.4g l_c=%.4g", step, values["total"],
                     values["l_att"], values["l_e"], values["l_c"])

    if out_dir is not None:
        save_checkpoint(params, mcfg, os.path.join(out_dir, "final.ckpt"))
        train_log.write_ndjson(os.path.join(out_dir, "train_log.ndjson"))
    return params, train_log
