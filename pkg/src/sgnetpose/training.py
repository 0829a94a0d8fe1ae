"""Loss assembly, the training loop, evaluation and the feature-mode ablation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Node, RngState
from .data import Batch, TrajectorySample, make_batches, stable_hash
from .errors import ConfigError, DataError, UsageError
from .metrics import METRIC_NAMES, MetricAccumulator, MetricsReport, best_of_k
from .model import LatentGaussian, ModelConfig, ModelParams, SGNetPose

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "train_total", "train_traj", "train_goal", "train_kl", "val_mse45")


# -- loss ------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Node
    trajectory: float
    goal: float
    kl: float

    @property
    def total_value(self) -> float:
        return self.total.item()


def kl_divergence(q: LatentGaussian, p: LatentGaussian) -> Node:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over dims: [N]."""
    dims = q.mu.shape[-1]
    diff = ad.sub(q.mu, p.mu)
    spread = ad.add(ad.exp(ad.scale(q.log_sigma, 2.0)), ad.mul(diff, diff))
    ratio = ad.mul(spread, ad.exp(ad.scale(p.log_sigma, -2.0)))
    per_dim = ad.add(ad.sub(p.log_sigma, q.log_sigma), ad.scale(ratio, 0.5))
    total = ad.sum(per_dim, axis=-1)
    return ad.add(total, ad.tensor(np.full(total.shape, -0.5 * dims)))


def trajectory_loss(predictions: Node, targets: np.ndarray) -> Node:
    """Mean over the batch of the best (lowest) per-candidate RMSE."""
    b, k = predictions.shape[:2]
    if k == 0:
        raise UsageError("best-of-K loss needs K >= 1")
    tiled = ad.tensor(np.broadcast_to(np.asarray(targets)[:, None], predictions.shape))
    diff = ad.sub(predictions, tiled)
    rmse = ad.sqrt(ad.mean(ad.mul(diff, diff), axis=(2, 3)))
    return ad.mean(ad.min(rmse, axis=1))


def goal_targets(observed: np.ndarray, future: np.ndarray) -> np.ndarray:
    """[B, L_o, l_d, 4]: for encoder step t, the boxes at frames t+1 .. t+l_d."""
    observed, future = np.asarray(observed), np.asarray(future)
    window = np.concatenate([observed, future], axis=1)
    obs_len, pred_len = observed.shape[1], future.shape[1]
    return np.stack([window[:, t + 1: t + 1 + pred_len] for t in range(obs_len)], axis=1)


def goal_loss(encoder_goals: Sequence[Node], observed: np.ndarray, future: np.ndarray) -> Node:
    """MSE between every encoder step's stepwise goals and the true boxes they target."""
    wanted = goal_targets(observed, future)
    terms = []
    for t, goals in enumerate(encoder_goals):
        diff = ad.sub(goals, ad.tensor(wanted[:, t]))
        terms.append(ad.mean(ad.mul(diff, diff)))
    return ad.scale(ad.sum(ad.stack(terms)), 1.0 / len(terms))


def compute_loss(predictions: Node, encoder_goals: Sequence[Node], targets: np.ndarray,
                 q: LatentGaussian | None, p: LatentGaussian | None, goal_weight: float = 1.0,
                 kl_weight: float = 1.0, observed: np.ndarray | None = None) -> LossBreakdown:
    """total = best-of-K RMSE + goal_weight * goal MSE + kl_weight * mean KL(q || p).

    ``observed`` (normalized observed boxes) is needed for the goal term of
    early encoder steps, whose targets start inside the observation window.
    """
    if predictions.shape[1] == 0:
        raise UsageError("best-of-K loss needs K >= 1")
    traj = trajectory_loss(predictions, targets)
    total = traj
    goal_value = 0.0
    if encoder_goals and goal_weight:
        if observed is None:
            raise UsageError("goal loss needs the observed boxes")
        goal = goal_loss(encoder_goals, observed, targets)
        goal_value = goal.item()
        total = ad.add(total, ad.scale(goal, goal_weight))
    kl_value = 0.0
    if q is not None and p is not None:
        kl = ad.mean(kl_divergence(q, p))
        kl_value = kl.item()
        if kl_weight:
            total = ad.add(total, ad.scale(kl, kl_weight))
    return LossBreakdown(total, traj.item(), goal_value, kl_value)


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    k_train: int = 1  # latent samples per window while training (best-of-K loss)
    k_eval: int = 20  # prior samples for validation and evaluation
    goal_weight: float = 1.0
    kl_weight: float = 1.0
    kl_warmup: int = 10  # epochs of linear KL ramp; 0 disables
    patience: int | None = 10  # epochs without val improvement; None disables
    corner: str = "top-left"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.k_train < 1 or self.k_eval < 1:
            raise ConfigError("batch_size, k_train and k_eval must be >= 1")
        if self.kl_warmup < 0 or (self.patience is not None and self.patience < 1):
            raise ConfigError("kl_warmup must be >= 0 and patience >= 1 (or None)")
        return self

    def kl_scale(self, epoch: int) -> float:
        """KL weight for a 1-based epoch."""
        if self.kl_warmup == 0:
            return self.kl_weight
        return self.kl_weight * min(1.0, epoch / self.kl_warmup)


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_traj: float
    train_goal: float
    train_kl: float
    val_mse45: float | None

    def row(self) -> list[str]:
        val = "" if self.val_mse45 is None else f"{self.val_mse45:.6g}"
        return [str(self.epoch), f"{self.train_total:.6g}", f"{self.train_traj:.6g}",
                f"{self.train_goal:.6g}", f"{self.train_kl:.6g}", val]


@dataclass
class TrainResult:
    params: ModelParams  # best on validation (or last when there is no validation split)
    curve: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for rec in self.curve:
            writer.writerow(rec.row())
        return buf.getvalue()


def check_compatible(model_cfg: ModelConfig, samples: Sequence[TrajectorySample]) -> None:
    """Raise ConfigError when windows do not fit the model (lengths, pose availability)."""
    for s in samples[:1]:
        if (s.obs_len, s.pred_len) != (model_cfg.obs_len, model_cfg.pred_len):
            raise ConfigError(f"dataset windows are {s.obs_len}+{s.pred_len} frames, model expects "
                              f"{model_cfg.obs_len}+{model_cfg.pred_len}")
    if model_cfg.uses_pose and not all(s.has_pose for s in samples):
        raise ConfigError(f"feature mode {model_cfg.features!r} needs pose on every frame; "
                          "prepare the dataset with pose filtering")


def train_epoch(model: SGNetPose, batches: Sequence[Batch], state: AdamState, cfg: TrainConfig,
                epoch: int, rng: RngState) -> EpochRecord:
    params = model.params
    totals = np.zeros(4)
    count = 0
    kl_weight = cfg.kl_scale(epoch)
    for i, batch in enumerate(batches):
        result = model.forward(batch, "train", rng.child("batch", i), k=cfg.k_train)
        loss = compute_loss(result.predictions, result.encoder_goals, batch.targets, result.posterior,
                            result.prior, cfg.goal_weight, kl_weight, observed=batch.bbox)
        params.zero_grad()
        loss.total.backward()
        ad.adam_step(params.values(), params.grads(), state, cfg.lr)
        n = len(batch)
        totals += n * np.array([loss.total_value, loss.trajectory, loss.goal, loss.kl])
        count += n
    totals /= max(count, 1)
    return EpochRecord(epoch, *map(float, totals), None)


def train(model_cfg: ModelConfig, train_samples: Sequence[TrajectorySample],
          val_samples: Sequence[TrajectorySample], cfg: TrainConfig) -> TrainResult:
    """Adam on the combined loss; keeps the parameters with the best validation mse_45.

    Deterministic given ``cfg.seed``: initialization, shuffling, dropout and
    latent noise all draw from named children of one seeded stream.
    """
    model_cfg.validate()
    cfg.validate()
    check_compatible(model_cfg, train_samples)
    check_compatible(model_cfg, val_samples)
    if cfg.epochs > 0 and not train_samples:
        raise DataError("training split is empty")
    root = RngState(cfg.seed)
    params = ModelParams.initialize(model_cfg, root.child("init"))
    model = SGNetPose(params)
    state = AdamState()
    best = params.copy()
    best_score, best_epoch, since_best = math.inf, 0, 0
    result = TrainResult(best)
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_samples, cfg.batch_size, model_cfg.features,
                               root.child("shuffle", epoch), shuffle=True)
        record = train_epoch(model, batches, state, cfg, epoch, root.child("epoch", epoch))
        if val_samples:
            report = evaluate(params, val_samples, cfg.k_eval, root.child("val"), corner=cfg.corner,
                              batch_size=cfg.batch_size, split="val")
            record.val_mse45 = report.mse_45
        result.curve.append(record)
        log.info("epoch %d: total %.5f traj %.5f goal %.5f kl %.5f val_mse45 %s", epoch, record.train_total,
                 record.train_traj, record.train_goal, record.train_kl, record.val_mse45)
        score = record.val_mse45 if val_samples else -epoch
        if score < best_score:
            best_score, best_epoch, since_best = score, epoch, 0
            best = params.copy()
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                result.stopped_early = True
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    result.params = best
    result.best_epoch = best_epoch
    return result


# -- evaluation ------------------------------------------------------------

def predict_batch(params: ModelParams, batch: Batch, k: int, rng: RngState | None,
                  deterministic: bool = False) -> np.ndarray:
    """Pixel-space predictions [B, K, l_d, 4] sampled from the prior."""
    result = SGNetPose(params).forward(batch, "infer", rng, k=k, deterministic=deterministic)
    return batch.to_pixels(result.predictions.value)


def evaluate(params: ModelParams, samples: Sequence[TrajectorySample], k: int, rng: RngState,
             corner: str = "top-left", batch_size: int = 64, split: str = "test") -> MetricsReport:
    """Best-of-K (by full-horizon MSE) metrics in squared pixels."""
    if not samples:
        raise DataError(f"cannot evaluate an empty {split} split")
    check_compatible(params.config, samples)
    acc = MetricAccumulator(corner)
    for i, batch in enumerate(make_batches(samples, batch_size, params.config.features)):
        pred = predict_batch(params, batch, k, rng.child("eval", i))
        truth = batch.to_pixels(batch.targets)
        chosen, _ = best_of_k(pred, truth)
        acc.add(chosen, truth)
    return acc.report(params.config.config_hash(), split)


# -- ablation --------------------------------------------------------------

ABLATION_HEADER = ("features", "seeds", *(f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")),
                   "config_hash")


@dataclass
class AblationRow:
    features: str
    reports: list[MetricsReport]
    config_hash: str

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports]))

    def std(self, metric: str) -> float:
        return float(np.std([getattr(r, metric) for r in self.reports]))

    def row(self) -> list[str]:
        cells = [self.features, str(len(self.reports))]
        for m in METRIC_NAMES:
            cells += [f"{self.mean(m):.6g}", f"{self.std(m):.6g}"]
        return cells + [self.config_hash]


def ablation_run(model_configs: Sequence[ModelConfig], splits: dict[str, Sequence[TrajectorySample]],
                 seeds: Sequence[int], train_cfg: TrainConfig) -> list[AblationRow]:
    """Train and test each config once per seed; one row per config."""
    if not model_configs or not seeds:
        raise ConfigError("ablation needs at least one config and one seed")
    rows = []
    for mcfg in model_configs:
        reports = []
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            trained = train(mcfg, splits["train"], splits.get("val", []), cfg)
            reports.append(evaluate(trained.params, splits["test"], cfg.k_eval, RngState(seed).child("test"),
                                    corner=cfg.corner, batch_size=cfg.batch_size))
            log.info("ablation %s seed %d: mse_45 %.1f", mcfg.features, seed, reports[-1].mse_45)
        rows.append(AblationRow(mcfg.features, reports,
                                stable_hash({"model": mcfg.to_dict(), "train": asdict(train_cfg),
                                             "seeds": list(seeds)})))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_HEADER)
    for r in rows:
        writer.writerow(r.row())
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
