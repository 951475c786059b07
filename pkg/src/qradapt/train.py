"""Training loop, metrics, and the three sweep drivers (tau, size, scope).

Everything here is deterministic given (seed, config, task): batch order comes
from a dedicated generator, eval is pure, and wall time is the only field of a
MetricsRecord that varies between identical reruns.

Learning-rate defaults differ by method: full fine-tuning moves every weight
and wants a gentler 1e-4, adapter runs move a handful of parameters and
default to 1e-3.  An explicit ``learning_rate`` in the config overrides both.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .adapters import FULL_FT, QR_LORA, AdapterSpec
from .model import TinyTransformer, TinyTransformerConfig, softmax
from .tasks import PAIR_ENTAIL, SyntheticTask, TaskData, generate

SGD = "sgd"
ADAM = "adam"
OPTIMIZERS = (SGD, ADAM)

DEFAULT_ADAPTER_LR = 1e-3
DEFAULT_FULL_FT_LR = 1e-4

CSV_HEADER = (
    "task,method,spec,tau,scope,projections,trainable_count,head_count,"
    "accuracy,f1,matched,mismatched,seed,wall_time_s"
)

SCOPE_SWEEP_PROJECTION_SETS = (("o",), ("q", "v"), ("q", "v", "o"))


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step index where it happened."""

    def __init__(self, step: int, loss):
        super().__init__(f"training diverged at step {step} (loss = {loss})")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = ADAM
    learning_rate: float | None = None   # None -> per-method default
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 5
    batch_size: int = 64
    train_cap: int = 10000
    seed: int = 0
    warmup_epochs: int = 0
    warmup_learning_rate: float | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        for name in ("learning_rate", "warmup_learning_rate"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.train_cap < self.batch_size:
            raise ValueError(f"train_cap={self.train_cap} must be >= batch_size={self.batch_size}")

    def resolve_lr(self, method: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_FULL_FT_LR if method == FULL_FT else DEFAULT_ADAPTER_LR

    def resolve_warmup_lr(self) -> float:
        return self.warmup_learning_rate if self.warmup_learning_rate is not None else DEFAULT_FULL_FT_LR


@dataclass
class MetricsRecord:
    task: str
    method: str
    spec: str
    tau: float | None
    scope: str
    projections: str
    trainable_count: int | None
    head_count: int | None
    accuracy: float | None
    f1: float | None
    matched: float | None
    mismatched: float | None
    seed: int
    wall_time_s: float | None
    error: str | None = None

    @staticmethod
    def _num(x, fmt: str) -> str:
        return "" if x is None else format(x, fmt)

    def csv_fields(self) -> list[str]:
        return [
            self.task, self.method, self.spec,
            self._num(self.tau, "g"),
            self.scope, self.projections,
            self._num(self.trainable_count, "d"),
            self._num(self.head_count, "d"),
            self._num(self.accuracy, ".6f"),
            self._num(self.f1, ".6f"),
            self._num(self.matched, ".6f"),
            self._num(self.mismatched, ".6f"),
            format(self.seed, "d"),
            self._num(self.wall_time_s, ".3f"),
        ]

    def json_dict(self) -> dict:
        out = {
            "task": self.task, "method": self.method, "spec": self.spec, "tau": self.tau,
            "scope": self.scope, "projections": self.projections,
            "trainable_count": self.trainable_count, "head_count": self.head_count,
            "accuracy": self.accuracy, "f1": self.f1,
            "matched": self.matched, "mismatched": self.mismatched,
            "seed": self.seed, "wall_time_s": self.wall_time_s,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


def records_to_csv(records) -> str:
    lines = [CSV_HEADER]
    lines += [",".join(r.csv_fields()) for r in records]
    return "\n".join(lines) + "\n"


def records_to_jsonl(records) -> str:
    return "".join(json.dumps(r.json_dict(), sort_keys=True) + "\n" for r in records)


# ---- loss and metrics ----------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits, axis=1)
    n = len(labels)
    eps_clip = np.maximum(p[np.arange(n), labels], 1e-300)
    loss = -np.mean(np.log(eps_clip))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return float(np.mean(scores))


def evaluate(model: TinyTransformer, x: np.ndarray, y: np.ndarray, batch_size: int = 512):
    preds = np.empty(len(x), dtype=int)
    for lo in range(0, len(x), batch_size):
        logits = model.forward(x[lo:lo + batch_size])
        preds[lo:lo + batch_size] = logits.argmax(axis=1)
    acc = float(np.mean(preds == y))
    return acc, macro_f1(y, preds, model.config.n_classes), preds


# ---- optimizers ----------------------------------------------------------

class _Sgd:
    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.wd = weight_decay

    def step(self, grads: dict) -> None:
        for k, p in self.params.items():
            g = grads[k]
            if self.wd:
                g = g + self.wd * p
            p -= self.lr * g


class _Adam:
    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, epsilon: float, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, epsilon, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.wd:
                g = g + self.wd * p
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(config: TrainConfig, params: dict, lr: float):
    if config.optimizer == SGD:
        return _Sgd(params, lr, config.weight_decay)
    return _Adam(params, lr, config.beta1, config.beta2, config.epsilon, config.weight_decay)


# ---- the training loop ---------------------------------------------------

def _fit(model: TinyTransformer, x: np.ndarray, y: np.ndarray, config: TrainConfig,
         epochs: int, lr: float, rng: np.random.Generator) -> None:
    if epochs == 0:
        return
    opt = _make_optimizer(config, model.trainable_params(), lr)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            logits = model.forward(x[sel])
            loss, dlogits = cross_entropy(logits, y[sel])
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            opt.step(model.backward(dlogits))
            step += 1


def train_model(model: TinyTransformer, data: TaskData, config: TrainConfig,
                spec: AdapterSpec, n_train_rows: int | None = None) -> MetricsRecord:
    """Warm-up (optional), inject, train, evaluate, one record out.

    The model must be fresh (no adapters injected yet).  ``n_train_rows``
    overrides the train_cap-derived row count for training-size sweeps.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(int(config.seed) & (2**64 - 1))
    n = n_train_rows if n_train_rows is not None else min(config.train_cap, len(data.x_train))
    x, y = data.train_subset(n)

    if config.warmup_epochs > 0:
        _fit(model, x, y, config, config.warmup_epochs, config.resolve_warmup_lr(), rng)
    model.inject_adapters(spec)
    _fit(model, x, y, config, config.epochs, config.resolve_lr(spec.method), rng)

    acc, f1, _ = evaluate(model, data.x_eval, data.y_eval)
    matched = mismatched = None
    if data.task.kind == PAIR_ENTAIL:
        matched = acc
        xm, ym = data.extra_eval["mismatched"]
        mismatched, _, _ = evaluate(model, xm, ym)

    n_layers = model.config.n_layers
    tau = spec.policy.tau if (spec.method == QR_LORA and spec.policy is not None) else None
    return MetricsRecord(
        task=data.task.kind,
        method=spec.method,
        spec=spec.spell(n_layers),
        tau=tau,
        scope=spec.scope_label(n_layers),
        projections=spec.projections_label(),
        trainable_count=model.adapter_trainable_count(),
        head_count=model.head_count(),
        accuracy=acc,
        f1=f1,
        matched=matched,
        mismatched=mismatched,
        seed=int(config.seed),
        wall_time_s=time.perf_counter() - t0,
    )


def run_experiment(model_cfg: TinyTransformerConfig, task_or_data, config: TrainConfig,
                   spec: AdapterSpec, n_train_rows: int | None = None,
                   seed: int | None = None) -> MetricsRecord:
    """Build a fresh model and run one cell end to end.

    ``seed`` (when given) overrides both the model-init seed and the training
    seed, which is how multi-seed medians are produced without touching the
    task's data draw.
    """
    data = task_or_data if isinstance(task_or_data, TaskData) else generate(task_or_data)
    if seed is not None:
        model_cfg = replace(model_cfg, seed=seed)
        config = replace(config, seed=seed)
    model = TinyTransformer(model_cfg)
    return train_model(model, data, config, spec, n_train_rows=n_train_rows)


# ---- sweep drivers -------------------------------------------------------

def sweep_tau(model_cfg: TinyTransformerConfig, task_or_data, config: TrainConfig,
              taus, base_spec: AdapterSpec) -> list[MetricsRecord]:
    """One cell per threshold, all else held fixed."""
    if base_spec.method != QR_LORA:
        raise ValueError(f"tau sweep needs a {QR_LORA} base spec, got {base_spec.method}")
    data = task_or_data if isinstance(task_or_data, TaskData) else generate(task_or_data)
    out = []
    for tau in taus:
        spec = base_spec.with_policy(base_spec.policy.with_tau(float(tau)))
        out.append(run_experiment(model_cfg, data, config, spec))
    return out


def sweep_size(model_cfg: TinyTransformerConfig, task_or_data, config: TrainConfig,
               sizes, specs) -> list[MetricsRecord]:
    """size x spec grid on nested training subsets (prefixes of one draw)."""
    data = task_or_data if isinstance(task_or_data, TaskData) else generate(task_or_data)
    for size in sizes:
        if size > len(data.x_train):
            raise ValueError(f"sweep size {size} exceeds available train rows {len(data.x_train)}")
    out = []
    for size in sizes:
        for spec in specs:
            out.append(run_experiment(model_cfg, data, config, spec, n_train_rows=int(size)))
    return out


def default_scope_grid(n_layers: int) -> list[tuple[tuple[int, ...], tuple[str, ...]]]:
    """{last-4, all} x {o | q,v | q,v,o}, trimmed to the model's depth."""
    last = tuple(range(max(0, n_layers - 4), n_layers))
    scopes = [last, tuple(range(n_layers))]
    if scopes[0] == scopes[1]:
        scopes = [scopes[1]]
    return [(sc, ps) for sc in scopes for ps in SCOPE_SWEEP_PROJECTION_SETS]


def sweep_scope(model_cfg: TinyTransformerConfig, task_or_data, config: TrainConfig,
                base_spec: AdapterSpec, grid=None) -> list[MetricsRecord]:
    """Layer-scope x projection-set sweep around a fixed method/policy."""
    data = task_or_data if isinstance(task_or_data, TaskData) else generate(task_or_data)
    cells = grid if grid is not None else default_scope_grid(model_cfg.n_layers)
    out = []
    for layer_scope, projection_set in cells:
        spec = replace(base_spec, layer_scope=tuple(layer_scope), projection_set=tuple(projection_set))
        out.append(run_experiment(model_cfg, data, config, spec))
    return out
