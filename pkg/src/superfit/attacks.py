"""White-box L-infinity attacks driven by the cross-entropy input gradient.

All attacks share three conventions:

* ``sign(0) == 0``: a zero gradient produces no movement, so a model whose CE
  gradient has underflowed is left exactly where the attack started.
* every iterate is projected onto the intersection of the epsilon-ball around
  the clean input and the ``[0, 1]`` pixel box;
* random draws come from per-example streams keyed on
  ``(seed, index_offset + i)``, so splitting a batch does not change results.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, backward, tensor_sum
from .exceptions import ParameterError
from .losses import ce_loss
from .models import Model
from .validation import check_images, check_labels

METHODS = ("fgsm", "bim", "pgd", "apgd", "a3")

# stream ids for per-example generators
_UNIFORM_INIT = 0
_A3_DIRECTION = 1


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one attack run.

    ``step_size`` defaults to ``epsilon / 10`` and ``init_step_size`` (the A3
    starting-point step) to ``epsilon / 4``.
    """

    method: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float | None = None
    iterations: int = 100
    init_iterations: int = 7
    init_step_size: float | None = None
    random_init: bool = True
    restarts: int = 1
    seed: int = 0
    rho: float = 0.75

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown attack {self.method!r}; expected one of {METHODS}")
        if not 0 <= self.epsilon <= 1:
            raise ParameterError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        for name, value in (("step_size", self.alpha), ("init_step_size", self.alpha_init)):
            if self.epsilon > 0 and not 0 < value <= self.epsilon:
                raise ParameterError(f"{name} must lie in (0, epsilon], got {value}")
            if self.epsilon == 0 and value != 0:
                raise ParameterError(f"{name} must be 0 when epsilon is 0")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.init_iterations < 0:
            raise ParameterError("init_iterations must be >= 0")
        if self.restarts < 1:
            raise ParameterError("restarts must be >= 1")
        if not 0 < self.rho <= 1:
            raise ParameterError("rho must lie in (0, 1]")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def alpha_init(self) -> float:
        return self.epsilon / 4 if self.init_step_size is None else self.init_step_size

    @property
    def label(self) -> str:
        if self.method == "fgsm":
            return "fgsm"
        return f"{self.method}-{self.iterations}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        return cls(**data)

    @classmethod
    def parse(cls, spec: str) -> "AttackConfig":
        """Build from ``"method[:key=value,...]"``, e.g. ``"pgd:iterations=20"``.

        ``method-N`` is shorthand for ``iterations=N``.
        """
        head, _, tail = spec.partition(":")
        kwargs: dict = {}
        if "-" in head:
            head, _, n = head.partition("-")
            kwargs["iterations"] = int(n)
        if head == "fgsm":
            kwargs.setdefault("iterations", 1)
        kwargs["method"] = head
        for item in filter(None, tail.split(",")):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in cls.__dataclass_fields__:
                raise ParameterError(f"unknown attack option {key!r}")
            kwargs[key] = _parse_value(key, value.strip())
        return cls(**kwargs)


def _parse_value(key: str, value: str):
    if key in ("random_init",):
        return value.lower() in ("1", "true", "yes", "on")
    if key in ("iterations", "init_iterations", "restarts", "seed"):
        return int(value)
    if "/" in value:
        num, den = value.split("/")
        return float(num) / float(den)
    return float(value)


@dataclass
class AdversarialBatch:
    """Attack output: clean and perturbed inputs plus per-example outcome."""

    x_orig: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    success: np.ndarray
    loss: np.ndarray
    method: str = ""
    info: dict = field(default_factory=dict)

    @property
    def robust_accuracy(self) -> float:
        return float(np.mean(~self.success)) if len(self.success) else float("nan")

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else float("nan")

    def linf(self) -> np.ndarray:
        diff = np.abs(self.x_adv.astype(np.float64) - self.x_orig.astype(np.float64))
        return diff.reshape(len(diff), -1).max(axis=1) if diff.size else np.zeros(0)

    def summary(self) -> dict:
        linf = self.linf()
        return {
            "method": self.method,
            "n_examples": int(len(self.y)),
            "success_rate": self.success_rate,
            "robust_accuracy": self.robust_accuracy,
            "mean_loss": float(np.mean(self.loss)) if len(self.loss) else float("nan"),
            "max_linf": float(linf.max()) if len(linf) else 0.0,
            "unchanged_fraction": float(np.mean(linf == 0)) if len(linf) else float("nan"),
        }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def project_linf(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into ``[x_orig - eps, x_orig + eps]`` intersected with ``[0, 1]``."""
    if x_adv.shape != x_orig.shape:
        raise ParameterError(f"shape mismatch {x_adv.shape} vs {x_orig.shape}")
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(out, 0, 1, out=out)


def _example_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def uniform_noise(shape, epsilon: float, seed: int, index_offset: int = 0, restart: int = 0,
                  dtype=np.float32) -> np.ndarray:
    """Per-example ``U(-eps, eps)`` noise with streams keyed on the example index."""
    noise = np.empty(shape, dtype=dtype)
    for i in range(shape[0]):
        rng = _example_rng(seed, index_offset + i, _UNIFORM_INIT + 2 * restart)
        noise[i] = rng.uniform(-epsilon, epsilon, size=shape[1:])
    return noise


def loss_and_input_grad(model: Model, x: np.ndarray, y: np.ndarray):
    """Per-example CE losses, their input gradients and the logits.

    Runs in eval mode with parameter tracking disabled; the model is not modified.
    """
    with model.frozen(), model.evaluating():
        xt = Tensor(x, requires_grad=True)
        z = model(xt)
        per = ce_loss(z, y, reduction="none")
        backward(tensor_sum(per))
    return per.data, xt.grad, z.data


def _prepare(model: Model, x, y):
    x = check_images(x, dtype=model.dtype)
    y = check_labels(y, model.num_classes, len(x))
    return x, y


def _finish(model, x, x_adv, y, method, info=None) -> AdversarialBatch:
    with model.evaluating():
        logits = model.predict_logits(x_adv)
        loss = ce_loss(logits, y, reduction="none").data if len(y) else np.zeros(0, dtype=x.dtype)
    success = logits.argmax(axis=1) != y
    return AdversarialBatch(x, x_adv, y, success, loss, method, info or {})


def _signed_step(x, grad, step, x_orig, epsilon):
    if np.ndim(step):
        step = step.reshape((-1,) + (1,) * (x.ndim - 1))
    return project_linf(x + step * np.sign(grad), x_orig, epsilon)


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def fgsm(model: Model, x, y, cfg: AttackConfig | None = None, index_offset: int = 0) -> AdversarialBatch:
    """Single signed-gradient step of size epsilon."""
    cfg = cfg or AttackConfig(method="fgsm")
    x, y = _prepare(model, x, y)
    _, grad, _ = loss_and_input_grad(model, x, y)
    x_adv = _signed_step(x, grad, cfg.epsilon, x, cfg.epsilon)
    return _finish(model, x, x_adv, y, "fgsm")


def bim(model: Model, x, y, cfg: AttackConfig, index_offset: int = 0) -> AdversarialBatch:
    """Iterated FGSM with step ``alpha`` from the clean input."""
    x, y = _prepare(model, x, y)
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        _, grad, _ = loss_and_input_grad(model, x_adv, y)
        x_adv = _signed_step(x_adv, grad, cfg.alpha, x, cfg.epsilon)
    return _finish(model, x, x_adv, y, cfg.label)


def _pgd_run(model, x, y, cfg, index_offset, restart):
    x_adv = x.copy()
    if cfg.random_init:
        noise = uniform_noise(x.shape, cfg.epsilon, cfg.seed, index_offset, restart, x.dtype)
        x_adv = project_linf(x + noise, x, cfg.epsilon)
    for _ in range(cfg.iterations):
        _, grad, _ = loss_and_input_grad(model, x_adv, y)
        x_adv = _signed_step(x_adv, grad, cfg.alpha, x, cfg.epsilon)
    return x_adv


def _keep_worst(best: AdversarialBatch | None, new: AdversarialBatch) -> AdversarialBatch:
    if best is None:
        return new
    take = (new.success & ~best.success) | ((new.success == best.success) & (new.loss > best.loss))
    mask = take.reshape((-1,) + (1,) * (new.x_adv.ndim - 1))
    best.x_adv = np.where(mask, new.x_adv, best.x_adv)
    best.success = np.where(take, new.success, best.success)
    best.loss = np.where(take, new.loss, best.loss)
    return best


def pgd(model: Model, x, y, cfg: AttackConfig, index_offset: int = 0) -> AdversarialBatch:
    """Projected gradient ascent from a uniform random start.

    With several restarts the per-example worst case is kept (misclassified
    first, then highest loss).
    """
    x, y = _prepare(model, x, y)
    best = None
    for restart in range(cfg.restarts):
        x_adv = _pgd_run(model, x, y, cfg, index_offset, restart)
        best = _keep_worst(best, _finish(model, x, x_adv, y, cfg.label))
    return best


def apgd_checkpoints(iterations: int) -> list[int]:
    """Iterations after which APGD reconsiders its step size.

    Fractions of N start at 0.22 and the gap shrinks by 0.03 per checkpoint
    down to 0.06; kept in whole percent so the ceilings are exact.
    """
    p = [0, 22]
    while p[-1] < 100:
        p.append(p[-1] + max(p[-1] - p[-2] - 3, 6))
    points = {-(-q * iterations // 100) for q in p[1:]}
    return sorted(w for w in points if 0 < w <= iterations)


def apgd(model: Model, x, y, cfg: AttackConfig, index_offset: int = 0) -> AdversarialBatch:
    """PGD with a per-example step size halved when progress stalls.

    At each checkpoint, examples for which fewer than ``rho`` of the steps since
    the previous checkpoint raised the best loss get their step halved and
    restart from their best point. The best iterate is always returned.
    """
    x, y = _prepare(model, x, y)
    best_batch = None
    checkpoints = set(apgd_checkpoints(cfg.iterations))
    bshape = (-1,) + (1,) * (x.ndim - 1)
    for restart in range(cfg.restarts):
        x_cur = x.copy()
        if cfg.random_init:
            noise = uniform_noise(x.shape, cfg.epsilon, cfg.seed, index_offset, restart, x.dtype)
            x_cur = project_linf(x + noise, x, cfg.epsilon)
        loss, grad, _ = loss_and_input_grad(model, x_cur, y)
        x_best, loss_best, grad_best = x_cur.copy(), loss.copy(), grad.copy()
        step = np.full(len(x), cfg.alpha, dtype=x.dtype)
        improved = np.zeros(len(x), dtype=np.int64)
        last = 0
        halvings = np.zeros(len(x), dtype=np.int64)
        for i in range(1, cfg.iterations + 1):
            x_cur = _signed_step(x_cur, grad, step, x, cfg.epsilon)
            loss, grad, _ = loss_and_input_grad(model, x_cur, y)
            better = loss > loss_best
            improved += better
            x_best = np.where(better.reshape(bshape), x_cur, x_best)
            grad_best = np.where(better.reshape(bshape), grad, grad_best)
            loss_best = np.where(better, loss, loss_best)
            if i in checkpoints:
                stalled = improved < cfg.rho * (i - last)
                step = np.where(stalled, step / 2, step).astype(x.dtype)
                x_cur = np.where(stalled.reshape(bshape), x_best, x_cur)
                grad = np.where(stalled.reshape(bshape), grad_best, grad)
                halvings += stalled
                improved[:] = 0
                last = i
        batch = _finish(model, x, x_best, y, cfg.label, {"halvings": halvings})
        best_batch = _keep_worst(best_batch, batch)
    return best_batch


def a3_step_size(n: int, total: int, epsilon: float) -> float:
    """Cosine-annealed step ``eps/2 * (1 + cos(pi * (n mod N) / N))``."""
    if total < 1 or n < 0:
        raise ParameterError("need n >= 0 and N >= 1")
    return 0.5 * epsilon * (1 + math.cos((n % total) / total * math.pi))


def sample_direction_weights(n: int, num_classes: int, seed: int, index_offset: int = 0,
                             restart: int = 0) -> np.ndarray:
    """Per-example ``w_d ~ U(-1, 1)^K``."""
    out = np.empty((n, num_classes))
    for i in range(n):
        rng = _example_rng(seed, index_offset + i, _A3_DIRECTION + 2 * restart)
        out[i] = rng.uniform(-1, 1, size=num_classes)
    return out


def a3_direction(model: Model, x: np.ndarray, w_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalised input gradient of ``w_d . f(x)`` per example.

    Returns ``(v, zero)``; rows whose gradient is exactly zero are left as zero
    vectors and flagged in ``zero`` instead of being divided by zero.
    """
    x = np.asarray(x, dtype=model.dtype)
    w_d = np.asarray(w_d, dtype=model.dtype)
    with model.frozen(), model.evaluating():
        xt = Tensor(x, requires_grad=True)
        z = model(xt)
        backward(tensor_sum(tensor_sum(z * Tensor(w_d), axis=1)))
    grad = xt.grad.astype(np.float64)
    norms = np.sqrt((grad.reshape(len(grad), -1) ** 2).sum(axis=1))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms).reshape((-1,) + (1,) * (grad.ndim - 1))
    return (grad / safe).astype(model.dtype), zero


def a3_init(model: Model, x, cfg: AttackConfig, index_offset: int = 0, restart: int = 0,
            w_d: np.ndarray | None = None) -> np.ndarray:
    """Starting point from ``T`` signed steps along the diversified direction."""
    x = check_images(x, dtype=model.dtype)
    if w_d is None:
        w_d = sample_direction_weights(len(x), model.num_classes, cfg.seed, index_offset, restart)
    x_init = x.copy()
    for _ in range(cfg.init_iterations):
        v, _ = a3_direction(model, x_init, w_d)
        x_init = _signed_step(x_init, v, cfg.alpha_init, x, cfg.epsilon)
    return x_init


def a3_attack(model: Model, x, y, cfg: AttackConfig, index_offset: int = 0) -> AdversarialBatch:
    """Diversified start followed by CE-gradient steps on a cosine schedule.

    The best (highest-loss) iterate, starting point included, is returned.
    """
    x, y = _prepare(model, x, y)
    bshape = (-1,) + (1,) * (x.ndim - 1)
    best_batch = None
    for restart in range(cfg.restarts):
        x_cur = a3_init(model, x, cfg, index_offset, restart)
        loss, grad, _ = loss_and_input_grad(model, x_cur, y)
        x_best, loss_best = x_cur.copy(), loss.copy()
        for n in range(cfg.iterations):
            step = a3_step_size(n, cfg.iterations, cfg.epsilon)
            x_cur = _signed_step(x_cur, grad, step, x, cfg.epsilon)
            loss, grad, _ = loss_and_input_grad(model, x_cur, y)
            better = loss > loss_best
            x_best = np.where(better.reshape(bshape), x_cur, x_best)
            loss_best = np.where(better, loss, loss_best)
        best_batch = _keep_worst(best_batch, _finish(model, x, x_best, y, cfg.label))
    return best_batch


_DISPATCH = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "apgd": apgd, "a3": a3_attack}


def run_attack(model: Model, x, y, cfg: AttackConfig, index_offset: int = 0,
               batch_size: int | None = None) -> AdversarialBatch:
    """Run ``cfg.method`` over ``x``, optionally in fixed-size batches."""
    attack = _DISPATCH[cfg.method]
    if batch_size is None or len(x) <= batch_size:
        return attack(model, x, y, cfg, index_offset)
    parts = [attack(model, x[s:s + batch_size], y[s:s + batch_size], cfg, index_offset + s)
             for s in range(0, len(x), batch_size)]
    return AdversarialBatch(
        np.concatenate([p.x_orig for p in parts]),
        np.concatenate([p.x_adv for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.loss for p in parts]),
        parts[0].method,
    )
