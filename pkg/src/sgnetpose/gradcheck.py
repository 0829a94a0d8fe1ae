"""Central finite-difference verification of analytic gradients.

Checks run in float64. Coordinates whose +h/-h evaluations take a different
branch at some relu/clip/min than the unperturbed point straddle a kink;
they are excluded and counted instead of reported as failures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the compared entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference(loss_fn: Callable[[], float], array: np.ndarray, index, h: float = 1e-3,
                      reference_branches: list | None = None) -> float | None:
    """Central difference of loss_fn w.r.t. array[index] (array mutated and restored).

    Returns None when a reference branch trace is given and either probe
    crosses a kink.
    """
    original = array[index]
    try:
        array[index] = original + h
        with ad.record_branches() as up_trace:
            up = loss_fn()
        array[index] = original - h
        with ad.record_branches() as down_trace:
            down = loss_fn()
    finally:
        array[index] = original
    if reference_branches is not None and not (
        _same_branches(up_trace, reference_branches) and _same_branches(down_trace, reference_branches)
    ):
        return None
    return (up - down) / (2 * h)


@dataclass
class TensorCheck:
    name: str
    checked: int
    skipped_kinks: int
    rel_error: float


@dataclass
class GradcheckReport:
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.rel_error for t in self.tensors if t.checked), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(t.skipped_kinks for t in self.tensors)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_nodes(build_loss: Callable[[], ad.Node], nodes: dict[str, ad.Node], rng: ad.RngState,
                max_entries: int | None = None, h: float = 1e-3) -> GradcheckReport:
    """Compare backward() against central differences for every named node.

    ``build_loss`` must rebuild the graph from the current node values and be
    deterministic (reseed any randomness inside it). ``max_entries`` caps the
    number of randomly chosen coordinates per tensor.
    """
    with ad.record_branches() as reference:
        loss = build_loss()
    for node in nodes.values():
        node.zero_grad()
    loss.backward()
    analytic = {name: node.grad.copy() for name, node in nodes.items()}

    def value() -> float:
        return build_loss().item()

    report = GradcheckReport()
    for name, node in nodes.items():
        flat = node.value.reshape(-1)
        count = flat.size
        picks = np.arange(count)
        if max_entries is not None and count > max_entries:
            picks = np.sort(rng.permutation(count)[:max_entries])
        a_vals, n_vals, skipped = [], [], 0
        for i in picks:
            numeric = finite_difference(value, flat, int(i), h, reference)
            if numeric is None:
                skipped += 1
                continue
            a_vals.append(analytic[name].reshape(-1)[i])
            n_vals.append(numeric)
        err = relative_error(np.array(a_vals), np.array(n_vals)) if a_vals else 0.0
        report.tensors.append(TensorCheck(name, len(a_vals), skipped, err))
        log.debug("gradcheck %s: %d entries, %d kinks, rel err %.3g", name, len(a_vals), skipped, err)
    return report


# -- full model --------------------------------------------------------------

TINY_CONFIG = dict(obs_len=3, pred_len=4, embed_dim=6, hidden_dim=8, latent_dim=4, dropout=0.1)


def random_batch(cfg, batch_size: int, rng: ad.RngState, width: float = 1920.0, height: float = 1080.0):
    """A batch of plausible normalized boxes and pose features for checks."""
    from .data import Batch

    def boxes(steps):
        lo = rng.uniform(0.05, 0.6, (batch_size, steps, 2))
        size = rng.uniform(0.05, 0.3, (batch_size, steps, 2))
        return np.concatenate([lo, lo + size], axis=-1)

    pose = rng.uniform(0.0, 1.0, (batch_size, cfg.obs_len, cfg.pose_width)) if cfg.uses_pose else None
    frame = np.tile([width, height], (batch_size, 1))
    return Batch(boxes(cfg.obs_len), pose, boxes(cfg.pred_len), frame)


def model_gradcheck(seed: int, features: str = "bbox+pose", batch_size: int = 2, k: int = 2,
                    max_entries: int | None = 8, h: float = 1e-3) -> GradcheckReport:
    """Finite-difference check of every parameter tensor of the full training loss.

    Runs in float64 with dropout and latent noise frozen by reseeding, on the
    tiny configuration (3 observed steps, 4 predicted, hidden size 8).
    """
    from .model import ModelConfig, ModelParams, SGNetPose
    from .training import compute_loss

    root = ad.RngState(seed)
    with ad.precision(np.float64):
        cfg = ModelConfig(features=features, k=k, **TINY_CONFIG)
        params = ModelParams.initialize(cfg, root.child("init")).astype(np.float64)
        batch = random_batch(cfg, batch_size, root.child("data"))
        model = SGNetPose(params)

        def build_loss():
            res = model.forward(batch, "train", root.child("forward"), k=k)
            return compute_loss(res.predictions, res.encoder_goals, batch.targets, res.posterior, res.prior,
                                observed=batch.bbox).total

        return check_nodes(build_loss, params.tensors, root.child("entries"), max_entries, h)
