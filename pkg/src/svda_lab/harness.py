"""Training loop, depth metrics, evaluation and mechanism comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .attention import Mechanism
from .datagen import DatasetSpec, Scene, generate_split
from .indicators import (
    DEFAULT_DRAWS,
    DEFAULT_NOISE_STD,
    DEFAULT_SPARSITY_EPS,
    INDICATOR_NAMES,
    IndicatorSample,
    RobustnessSpec,
    collect_epoch,
)
from .model import ConfigError, DepthViT, ModelConfig

log = logging.getLogger(__name__)

PRED_FLOOR = 1e-6
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "srmse_log", "delta1")


class TrainingDiverged(FloatingPointError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    srmse_log: float
    delta1: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in METRIC_NAMES)


def compute_metrics(pred, gt) -> DepthMetrics:
    """Standard monocular depth errors over all pixels of one image.

    ``srmse_log`` is the scale-invariant log RMSE, i.e. the standard deviation
    of ``ln p - ln g``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if gt.size == 0:
        raise EvaluationError("empty depth map")
    if not (gt > 0).all():
        raise EvaluationError("ground truth depth must be strictly positive")
    p = np.maximum(pred, PRED_FLOOR)
    diff = pred - gt
    e = np.log(p) - np.log(gt)
    ratio = np.maximum(p / gt, gt / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff**2 / gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(e**2))),
        srmse_log=float(np.sqrt(np.mean((e - e.mean()) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
    )


def mean_metrics(items: list[DepthMetrics]) -> DepthMetrics:
    if not items:
        raise EvaluationError("cannot average an empty list of metrics")
    return DepthMetrics(*(float(np.mean([getattr(m, n) for m in items])) for n in METRIC_NAMES))


# -- data --------------------------------------------------------------
@dataclass
class DepthDataset:
    images: np.ndarray  # [N, C, H, W]
    depths: np.ndarray  # [N, H, W]

    @classmethod
    def from_scenes(cls, scenes: list[Scene]) -> DepthDataset:
        if not scenes:
            return cls(np.zeros((0, 1, 0, 0)), np.zeros((0, 0, 0)))
        return cls(np.stack([s.image for s in scenes]), np.stack([s.depth for s in scenes]))

    @classmethod
    def from_spec(cls, spec: DatasetSpec, split: str = "train") -> DepthDataset:
        return cls.from_scenes(generate_split(spec, split))

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> DepthDataset:
        return DepthDataset(self.images[idx], self.depths[idx])


# -- optimizers --------------------------------------------------------
class SGD:
    def __init__(self, params: dict[str, nx.Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for t in self.params.values():
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - update


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    diagnostic_batch_size: int = 8
    sparsity_eps: float = DEFAULT_SPARSITY_EPS
    noise_std: float = DEFAULT_NOISE_STD
    robustness_draws: int = DEFAULT_DRAWS

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be a finite non-negative number")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.diagnostic_batch_size < 0:
            raise ConfigError("diagnostic_batch_size must be non-negative")
        if self.sparsity_eps <= 0:
            raise ConfigError("sparsity_eps must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.robustness_draws < 1:
            raise ConfigError("robustness_draws must be at least 1")

    def make_optimizer(self, params):
        if self.optimizer == "sgd":
            return SGD(params, self.learning_rate)
        return Adam(params, self.learning_rate, self.beta1, self.beta2, self.adam_eps)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: DepthMetrics
    indicators: list[IndicatorSample] = field(default_factory=list)


@dataclass
class TrainResult:
    best_epoch: int
    best_state: dict[str, np.ndarray]
    logs: list[EpochLog]


def l1_loss(pred: nx.Tensor, gt: np.ndarray) -> nx.Tensor:
    return (pred - nx.Tensor(gt)).abs().mean()


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def validation_pass(model: DepthViT, data: DepthDataset, batch_size: int = 32):
    """Mean per-image L1 loss and per-image-averaged metrics."""
    losses, metrics = [], []
    for lo, hi in _batches(len(data), batch_size):
        pred = model.predict(data.images[lo:hi])
        for p, g in zip(pred, data.depths[lo:hi]):
            losses.append(float(np.mean(np.abs(p - g))))
            metrics.append(compute_metrics(p, g))
    return float(np.mean(losses)), mean_metrics(metrics)


def diagnose(
    model: DepthViT,
    images: np.ndarray,
    epoch: int,
    eps: float = DEFAULT_SPARSITY_EPS,
    noise_std: float = DEFAULT_NOISE_STD,
    draws: int = DEFAULT_DRAWS,
    seed: int = 0,
) -> list[IndicatorSample]:
    """Indicators for every (layer, head) on a fixed batch of images.

    Robustness perturbs the token embeddings (after patch projection and
    positional embedding) with the same seeded draws every epoch.
    """
    if len(images) == 0 or model.cfg.num_layers == 0:
        return []
    with nx.no_grad():
        _, recs = model.forward(images, capture=True)
    spec = RobustnessSpec(model.attention_maps, model.embed(images), noise_std, draws, seed)
    return collect_epoch(recs, epoch, eps, spec)


def train(
    model: DepthViT,
    train_set: DepthDataset,
    val_set: DepthDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Minibatch L1 training with per-epoch validation and indicator collection.

    The best state is the epoch with the lowest validation abs_rel (earliest
    on ties).
    """
    if len(train_set) == 0:
        raise EvaluationError("training set is empty")
    if len(val_set) == 0:
        raise EvaluationError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.make_optimizer(model.params)
    diag_images = val_set.images[: cfg.diagnostic_batch_size]
    logs: list[EpochLog] = []
    best_epoch, best_score, best_state = 0, math.inf, model.state()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for batch_idx, (lo, hi) in enumerate(_batches(len(order), cfg.batch_size)):
            idx = order[lo:hi]
            model.zero_grad()
            try:
                pred, _ = model.forward(train_set.images[idx])
                loss = l1_loss(pred, train_set.depths[idx])
                if not math.isfinite(loss.item()):
                    raise nx.NonFiniteError("loss is not finite")
                loss.backward()
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch_idx}: {exc}") from exc
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val_loss, val_metrics = validation_pass(model, val_set)
        indicators = diagnose(
            model, diag_images, epoch, cfg.sparsity_eps, cfg.noise_std, cfg.robustness_draws, cfg.seed
        )
        entry = EpochLog(epoch, total / seen, val_loss, val_metrics, indicators)
        logs.append(entry)
        log.info("epoch %d train %.6f val %.6f abs_rel %.6f", epoch, entry.train_loss, val_loss, val_metrics.abs_rel)
        if val_metrics.abs_rel < best_score:
            best_epoch, best_score, best_state = epoch, val_metrics.abs_rel, model.state()
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(best_epoch, best_state, logs)


def evaluate(predictor, dataset: DepthDataset, batch_size: int = 32) -> DepthMetrics:
    """Metrics computed per image, then averaged over images.

    ``predictor`` is a ``DepthViT`` or any callable mapping ``[B, C, H, W]``
    images to ``[B, H, W]`` depth arrays.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    fn = predictor.predict if isinstance(predictor, DepthViT) else predictor
    per_image = []
    for lo, hi in _batches(len(dataset), batch_size):
        pred = np.asarray(fn(dataset.images[lo:hi]))
        per_image += [compute_metrics(p, g) for p, g in zip(pred, dataset.depths[lo:hi])]
    return mean_metrics(per_image)


# -- comparison --------------------------------------------------------
def indicator_series(logs: list[EpochLog]) -> dict[str, list[float]]:
    """Per-epoch value of each indicator averaged over layers and heads (defined ones only)."""
    out: dict[str, list[float]] = {}
    for name in INDICATOR_NAMES:
        series = []
        for entry in logs:
            vals = [s.value for s in entry.indicators if s.name == name and s.value is not None]
            if vals:
                series.append(float(np.mean(vals)))
        if len(series) == len(logs) and series:
            out[name] = series
    return out


@dataclass(frozen=True)
class Trend:
    mechanism: str
    indicator: str
    first10_mean: float
    last10_mean: float

    @property
    def delta(self) -> float:
        return self.last10_mean - self.first10_mean


def trends(mechanism: str, logs: list[EpochLog], window: int = 10) -> list[Trend]:
    rows = []
    for name, series in indicator_series(logs).items():
        first = float(np.mean(series[:window]))
        last = float(np.mean(series[-window:]))
        rows.append(Trend(mechanism, name, first, last))
    return rows


@dataclass
class Comparison:
    results: dict[str, TrainResult]
    param_counts: dict[str, int]
    trends: list[Trend]

    @property
    def param_delta(self) -> int:
        return self.param_counts["svda"] - self.param_counts["baseline"]


def compare(
    model_cfg: ModelConfig,
    train_set: DepthDataset,
    val_set: DepthDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[str, EpochLog], None] | None = None,
) -> Comparison:
    """Train SVDA and baseline from the same seed and data."""
    results, counts, rows = {}, {}, []
    for mech in (Mechanism.SVDA, Mechanism.BASELINE):
        model = DepthViT(model_cfg.with_mechanism(mech), seed=cfg.seed)
        counts[mech.value] = model.num_parameters()
        cb = None if on_epoch is None else (lambda e, m=mech.value: on_epoch(m, e))
        results[mech.value] = train(model, train_set, val_set, cfg, cb)
        rows += trends(mech.value, results[mech.value].logs)
    return Comparison(results, counts, rows)
