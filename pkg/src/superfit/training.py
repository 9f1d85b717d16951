"""Adam and the training loops: CE, MUCS, CE+MUCS (super-fitting),
temperature distillation and PGD adversarial training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .autodiff import Tensor, backward
from .data import DatasetSplit
from .exceptions import ParameterError, TrainingDivergedError, UsageError
from .losses import (
    ce_loss,
    combined_loss,
    is_gradient_vanished,
    mucs_loss,
    soft_cross_entropy,
    softmax,
    temperature_ce_loss,
)
from .models import Model

logger = logging.getLogger(__name__)

OBJECTIVES = ("ce", "mucs", "ce+mucs", "distill", "adv")


def default_adv_attack() -> AttackConfig:
    eps = 8 / 255
    return AttackConfig(method="pgd", epsilon=eps, step_size=eps / 4, iterations=10)


@dataclass
class TrainConfig:
    objective: str = "ce+mucs"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_iterations: int = 500
    seed: int = 0
    eval_every: int = 50
    eval_size: int = 1000
    temperature: float = 100.0
    mucs_weight: float = 1.0
    attack: AttackConfig | None = None
    robust_attack: AttackConfig | None = None
    target_vanished: float | None = 0.995

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ParameterError("batch_size and eval_every must be >= 1")
        if self.objective == "distill" and not self.temperature > 0:
            raise ParameterError("distillation needs a positive temperature")
        self.betas = tuple(self.betas)
        if self.objective == "adv" and self.attack is None:
            self.attack = default_adv_attack()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key in ("attack", "robust_attack"):
            if isinstance(data.get(key), dict):
                data[key] = AttackConfig.from_dict(data[key])
            elif isinstance(data.get(key), str):
                data[key] = AttackConfig.parse(data[key])
        return cls(**data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(params, grads, state: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update applied in place to each array in ``params``.

    ``state`` holds ``t`` plus lists ``m`` and ``v``; it is created on first use.
    """
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch between parameter {p.shape} and gradient/state {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    """Adam over a model's named parameters, with checkpointable state."""

    def __init__(self, model: Model, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.names = list(model.named_parameters())
        self.state: dict = {}

    def step(self) -> None:
        named = self.model.named_parameters()
        params = [named[n].data for n in self.names]
        grads = [named[n].grad if named[n].grad is not None else np.zeros_like(named[n].data)
                 for n in self.names]
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        if not self.state:
            return {}
        out = {"adam.t": np.array(self.state["t"], dtype=np.int64)}
        for name, m, v in zip(self.names, self.state["m"], self.state["v"]):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "adam.t" not in state:
            return
        self.state = {
            "t": int(state["adam.t"]),
            "m": [np.array(state[f"adam.m.{n}"]) for n in self.names],
            "v": [np.array(state[f"adam.v.{n}"]) for n in self.names],
        }


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    clean_accuracy: float
    vanished_fraction: float
    robust_accuracy: float | None = None
    robust_attack: str | None = None


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise UsageError("log iterations must strictly increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.append(TrainRecord(**json.loads(line)))
        return log

    @classmethod
    def load(cls, path) -> "TrainLog":
        return cls.from_jsonl(Path(path).read_text())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def superfit_fraction(model: Model, dataset: DatasetSplit, batch_size: int = 256) -> float:
    """Share of examples whose CE logits-gradient is exactly zero."""
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    logits = model.predict_logits(dataset.images, batch_size)
    return float(np.mean(is_gradient_vanished(logits, dataset.labels)))


def _objective_loss(cfg: TrainConfig, z: Tensor, y: np.ndarray, soft: np.ndarray | None) -> Tensor:
    if cfg.objective in ("ce", "adv"):
        return ce_loss(z, y)
    if cfg.objective == "mucs":
        return mucs_loss(z, y)
    if cfg.objective == "ce+mucs":
        return combined_loss(z, y, cfg.mucs_weight)
    if soft is not None:
        return soft_cross_entropy(z, soft, cfg.temperature)
    return temperature_ce_loss(z, y, cfg.temperature)


def _progress(model, iteration, loss, eval_split, cfg) -> TrainRecord:
    logits = model.predict_logits(eval_split.images)
    record = TrainRecord(
        iteration=iteration,
        loss=loss,
        clean_accuracy=float(np.mean(logits.argmax(axis=1) == eval_split.labels)),
        vanished_fraction=float(np.mean(is_gradient_vanished(logits, eval_split.labels))),
    )
    if cfg.robust_attack is not None:
        adv = run_attack(model, eval_split.images, eval_split.labels, cfg.robust_attack, batch_size=128)
        record.robust_accuracy = adv.robust_accuracy
        record.robust_attack = cfg.robust_attack.label
    return record


def train(model: Model, dataset: DatasetSplit, cfg: TrainConfig | None = None, *,
          eval_split: DatasetSplit | None = None, teacher: Model | None = None,
          log_path=None) -> tuple[Model, TrainLog]:
    """Optimise ``model`` in place on ``dataset`` with the configured objective.

    Stops after ``max_iterations`` optimizer steps or once the vanished
    fraction on the evaluation data reaches ``target_vanished``. Progress is
    recorded every ``eval_every`` steps and at the final step. With
    ``objective="distill"`` and a ``teacher``, the targets are the teacher's
    temperature-softened outputs; without one, hard labels are used.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ParameterError("dataset is empty")
    if tuple(dataset.input_shape) != model.input_shape:
        raise UsageError(f"dataset inputs {dataset.input_shape} do not match model {model.input_shape}")
    rng = np.random.default_rng(cfg.seed)
    x, y = dataset.images.astype(model.dtype), dataset.labels
    n = len(y)
    batch = min(cfg.batch_size, n)
    if eval_split is None:
        eval_split = dataset.take(np.arange(min(cfg.eval_size, n)), f"{dataset.name}[:eval]")

    soft = None
    if cfg.objective == "distill" and teacher is not None:
        soft = softmax(teacher.predict_logits(x), cfg.temperature).astype(model.dtype)

    opt = Adam(model, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    opt.load_state_dict(model.optimizer_state)
    log = TrainLog()
    order = rng.permutation(n)
    cursor = 0
    model.train()
    try:
        for it in range(1, cfg.max_iterations + 1):
            if cursor + batch > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + batch]
            cursor += batch
            xb, yb = x[idx], y[idx]
            if cfg.objective == "adv":
                xb = run_attack(model, xb, yb, cfg.attack, index_offset=model.iteration * batch).x_adv
            model.zero_grad()
            try:
                loss = _objective_loss(cfg, model(Tensor(xb)), yb, None if soft is None else soft[idx])
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"iteration {it}: forward pass overflowed ({exc})") from exc
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(f"iteration {it}: loss is {loss_value}")
            backward(loss)
            opt.step()
            model.iteration += 1

            if it % cfg.eval_every == 0 or it == cfg.max_iterations:
                record = _progress(model, model.iteration, loss_value, eval_split, cfg)
                log.append(record)
                logger.info("iter %d loss %.4g acc %.4f vanished %.4f", record.iteration, record.loss,
                            record.clean_accuracy, record.vanished_fraction)
                if cfg.target_vanished is not None and record.vanished_fraction >= cfg.target_vanished:
                    break
    finally:
        model.optimizer_state = opt.state_dict()
        model.eval()
    if log_path is not None:
        log.save(log_path)
    return model, log


def train_distill(teacher: Model, student: Model, dataset: DatasetSplit, temperature: float = 100.0,
                  teacher_cfg: TrainConfig | None = None, student_cfg: TrainConfig | None = None) -> Model:
    """Defensive distillation: teacher on hard labels at temperature T, student
    on the teacher's softened outputs at the same T. The student is returned
    for use at T=1 (raw logits)."""
    if not temperature > 0:
        raise ParameterError("temperature must be positive")
    teacher_cfg = replace(teacher_cfg or TrainConfig(), objective="distill", temperature=temperature,
                          target_vanished=None)
    student_cfg = replace(student_cfg or teacher_cfg, objective="distill", temperature=temperature,
                          target_vanished=None)
    train(teacher, dataset, teacher_cfg)
    train(student, dataset, student_cfg, teacher=teacher)
    return student
