"""Mini-batch training loop, optimizers and evaluation metrics.

Any model object works with :func:`train` as long as it provides
``init_params(rng)``, ``training_loss(pv, x, missing, y, rng)`` returning a
scalar DiffValue, and ``predict(params, x, missing)`` returning
``(latents, probabilities)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import TabularDataset
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import as_params, param_group

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adabelief", "sgd")
BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_steps: int = 5000
    patience: int = 20
    eval_every: int = 50
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        for name in ("batch_size", "max_steps", "patience", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be nonnegative")

    def in_search_space(self) -> bool:
        """Whether the rate lies in [1e-5, 1e-3] and the decay in [1e-7, 1e-1], the tuning ranges."""
        return 1e-5 <= self.learning_rate <= 1e-3 and 1e-7 <= self.weight_decay <= 1e-1


@dataclass
class TrainReport:
    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    stop_step: int = 0
    best_step: int = 0
    best_val_nll: float = math.inf
    drop_probabilities: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def curve_rows(self) -> list[dict]:
        return [
            {"step": s, "train_loss": t, "val_nll": v}
            for s, t, v in zip(self.steps, self.train_loss, self.val_nll)
        ]


# -- optimizers --------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _decays(name: str) -> bool:
    # drop logits are never weight-decayed
    return param_group(name) != "rho"


def adam_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """One Adam update with decoupled weight decay; returns ``(params, state)``.

    ``params`` is updated in place (new arrays are bound to the same keys).
    """
    state.step += 1
    t = state.step
    lr = config.learning_rate
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
        v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
        state.m[k], state.v[k] = m, v
        p = params[k]
        if config.weight_decay and _decays(k):
            p = p - lr * config.weight_decay * p
        params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params, state


def adabelief_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """AdaBelief: Adam with the second moment taken around the first-moment estimate."""
    state.step += 1
    t = state.step
    lr = config.learning_rate
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        s = state.v.get(k, np.zeros_like(g))
        m = BETA1 * m + (1 - BETA1) * g
        s = BETA2 * s + (1 - BETA2) * (g - m) ** 2 + EPS
        state.m[k], state.v[k] = m, s
        p = params[k]
        if config.weight_decay and _decays(k):
            p = p - lr * config.weight_decay * p
        params[k] = p - lr * (m / c1) / (np.sqrt(s / c2) + EPS)
    return params, state


def sgd_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    state.step += 1
    lr = config.learning_rate
    for k, g in grads.items():
        p = params[k]
        if config.weight_decay and _decays(k):
            p = p - lr * config.weight_decay * p
        params[k] = p - lr * g
    return params, state


STEP_FUNCTIONS = {"adam": adam_step, "adabelief": adabelief_step, "sgd": sgd_step}


# -- metrics ----------------------------------------------------------------


def nll_accuracy_from_probs(probs: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Mean negative log-likelihood and accuracy; argmax ties go to the lowest class."""
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size == 0:
        return math.nan, math.nan
    picked = probs[np.arange(targets.size), targets]
    nll = float(-np.log(np.maximum(picked, np.finfo(float).tiny)).mean())
    acc = float((np.argmax(probs, axis=1) == targets).mean())
    return nll, acc


def nll_and_accuracy(model, params: dict, dataset: TabularDataset) -> tuple[float, float]:
    """Evaluation-mode NLL and accuracy of ``model`` on ``dataset``."""
    _, probs = model.predict(params, dataset.values, dataset.mask)
    return nll_accuracy_from_probs(probs, dataset.targets)


# -- loop --------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield order[s : s + batch_size]


def train(model, train_ds: TabularDataset, val_ds: TabularDataset | None, config: TrainConfig, params: dict | None = None):
    """Fit ``model`` by mini-batch gradient descent with early stopping.

    Each step draws a batch, computes the model's training loss (for the
    LSAM this samples one concrete feature mask for the batch), backpropagates
    and applies the configured optimizer.  Every ``eval_every`` steps the
    validation NLL is checked; training stops after ``patience`` checks
    without strict improvement and the best checkpoint is returned.

    Returns
    -------
    params : dict[str, np.ndarray]
    report : TrainReport
    """
    if train_ds.n_rows == 0:
        raise ConfigError("training split is empty")
    if train_ds.n_features != model.n_features:
        raise ConfigError(f"model expects {model.n_features} features, data has {train_ds.n_features}")
    rng = nx.seeded_rng(config.seed)
    if params is None:
        params = model.init_params(rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    step_fn = STEP_FUNCTIONS[config.optimizer]
    state = OptimizerState()
    report = TrainReport()
    best = {k: v.copy() for k, v in params.items()}
    use_val = val_ds is not None and val_ds.n_rows > 0
    stale = 0
    running: list[float] = []
    X, M, Y = train_ds.values, train_ds.mask, train_ds.targets
    batches = _batches(train_ds.n_rows, config.batch_size, rng)

    for step in range(1, config.max_steps + 1):
        rows = next(batches)
        pv = as_params(params)
        try:
            loss = model.training_loss(pv, X[rows], M[rows], Y[rows], rng)
            nx.backward(loss)
        except NonFiniteError as exc:
            raise DivergenceError(step, math.nan) from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        running.append(value)
        step_fn(params, {k: pv[k].grad for k in params}, state, config)

        if step % config.eval_every == 0 or step == config.max_steps:
            val = nll_and_accuracy(model, params, val_ds)[0] if use_val else float(np.mean(running))
            report.steps.append(step)
            report.train_loss.append(float(np.mean(running)))
            report.val_nll.append(val)
            running = []
            if val < report.best_val_nll:
                report.best_val_nll = val
                report.best_step = step
                best = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
            log.debug("step %d train %.4f val %.4f", step, report.train_loss[-1], val)
            if stale >= config.patience:
                break
    report.stop_step = step
    if "rho" in best:
        from scipy.special import expit

        report.drop_probabilities = expit(best["rho"]).tolist()
    return best, report
