"""Paired clean/robust evaluation and per-class logits statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, run_attack
from .checkpoint import dumps
from .data import DatasetSplit
from .exceptions import UsageError
from .losses import is_gradient_vanished
from .models import Model

PROTOCOL_EPSILON = 8 / 255


def default_protocol(epsilon: float = PROTOCOL_EPSILON, iterations: int = 100, seed: int = 0) -> list[AttackConfig]:
    """PGD-100, APGD-100 and A3 with step epsilon/10."""
    return [
        AttackConfig("pgd", epsilon, epsilon / 10, iterations, seed=seed),
        AttackConfig("apgd", epsilon, epsilon / 10, iterations, seed=seed),
        AttackConfig("a3", epsilon, epsilon / 10, iterations, seed=seed),
    ]


def model_id(model: Model) -> str:
    return f"{model.arch}:{hashlib.sha256(dumps(model)).hexdigest()[:16]}"


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    n_examples: int
    clean_accuracy: float
    vanished_fraction: float
    robust_accuracy: dict[str, float] = field(default_factory=dict)
    robust_accuracy_vanished: dict[str, float] = field(default_factory=dict)
    n_vanished: int = 0
    logits_means: list[list[float | None]] = field(default_factory=list)
    missing_classes: list[int] = field(default_factory=list)
    seed: int | None = None
    attacks: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @property
    def logits_matrix(self) -> np.ndarray:
        return np.array([[np.nan if v is None else v for v in row] for row in self.logits_means])

    def table(self) -> str:
        rows = [("clean", self.clean_accuracy)] + list(self.robust_accuracy.items())
        width = max(len(name) for name, _ in rows)
        lines = [f"model {self.model_id}  data {self.dataset_id}  n={self.n_examples}",
                 f"{'attack'.ljust(width)}  accuracy"]
        lines += [f"{name.ljust(width)}  {acc * 100:8.2f}%" for name, acc in rows]
        lines.append(f"vanished fraction {self.vanished_fraction:.4f} ({self.n_vanished} examples)")
        return "\n".join(lines)


def _means_by_class(logits: np.ndarray, labels: np.ndarray, num_classes: int):
    out = np.full((num_classes, logits.shape[1]), np.nan)
    for c in range(num_classes):
        rows = logits[labels == c]
        if len(rows):
            out[c] = rows.astype(np.float64).mean(axis=0)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    return out, missing


def logits_stats(model: Model, split: DatasetSplit, batch_size: int = 256) -> np.ndarray:
    """Row ``c`` is the mean logit vector over examples whose true label is ``c``.

    Classes absent from ``split`` give NaN rows and a warning.
    """
    logits = model.predict_logits(split.images, batch_size)
    means, missing = _means_by_class(logits, split.labels, model.num_classes)
    if missing:
        warnings.warn(f"classes {missing} have no examples; their rows are NaN", stacklevel=2)
    return means


def _json_matrix(m: np.ndarray) -> list[list[float | None]]:
    return [[None if math.isnan(v) else float(v) for v in row] for row in m]


def evaluate(model: Model, split: DatasetSplit, attacks: Sequence[AttackConfig] = (), *,
             batch_size: int = 128, seed: int | None = None, model_name: str | None = None) -> EvalReport:
    """Clean and per-attack robust accuracy on the same examples.

    ``seed`` (when given) replaces every attack's seed. The model is only read.
    """
    if tuple(split.input_shape) != model.input_shape:
        raise UsageError(f"split inputs {split.input_shape} do not match model inputs {model.input_shape}")
    if split.num_classes > model.num_classes:
        raise UsageError("split has more classes than the model outputs")
    attacks = [replace(a, seed=seed) if seed is not None else a for a in attacks]
    x, y = split.images.astype(model.dtype), split.labels
    logits = model.predict_logits(x, batch_size)
    correct = logits.argmax(axis=1) == y
    vanished = is_gradient_vanished(logits, y)
    means, missing = _means_by_class(logits, y, model.num_classes)

    report = EvalReport(
        model_id=model_name or model_id(model),
        dataset_id=f"{split.name}:{split.checksum[:16]}",
        n_examples=len(y),
        clean_accuracy=float(correct.mean()),
        vanished_fraction=float(vanished.mean()),
        n_vanished=int(vanished.sum()),
        logits_means=_json_matrix(means),
        missing_classes=missing,
        seed=seed,
        attacks=[a.to_dict() for a in attacks],
    )
    for cfg in attacks:
        adv = run_attack(model, x, y, cfg, batch_size=batch_size)
        robust = ~adv.success
        report.robust_accuracy[cfg.label] = float(robust.mean())
        if vanished.any():
            report.robust_accuracy_vanished[cfg.label] = float(robust[vanished].mean())
    return report


def matrix_to_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true_class"] + [f"z{k}" for k in range(matrix.shape[1])])
    for c, row in enumerate(matrix):
        writer.writerow([c] + [repr(float(v)) for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    return np.array([[float(v) for v in row[1:]] for row in rows])
