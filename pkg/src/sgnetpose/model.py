"""Goal-driven trajectory network with pose conditioning, built on the autodiff core.

Data flow for a batch of B windows (all rows batched together):

* bbox encoder: FC+ReLU embedding of each observed box, concatenated with
  the previous step's aggregated goal, fed to a GRU. After every step the
  stepwise goal estimator regresses the next ``pred_len`` boxes from the
  hidden state, embeds them, and an attention pool turns them into the goal
  context for the following step.
* pose encoder: FC+ReLU+dropout per frame, then a separate GRU.
* CVAE: prior p(z | h_e) always; recognition q(z | h_e, h_Y) from a target
  GRU over the ground-truth future when training. K latent samples per row.
* decoder: hidden seeded by FC(z ++ h_e), merged once with the pose hidden;
  each step pools the goals still ahead (attention), consumes the embedding
  of the previous box, and a linear regressor emits a normalized box.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GRUParams, Node, RngState
from .data import FEATURE_MODES, Batch, pose_width, stable_hash
from .errors import ConfigError, DataError, UsageError

CHECKPOINT_FORMAT = "sgnetpose-checkpoint/1"
LOG_SIGMA_LIMIT = 8.0


@dataclass
class ModelConfig:
    obs_len: int = 15
    pred_len: int = 45
    features: str = "bbox+pose"
    embed_dim: int = 32
    hidden_dim: int = 64
    latent_dim: int = 16
    dropout: float = 0.1
    k: int = 20
    cell: str = "gru"

    @property
    def pose_width(self) -> int:
        return pose_width(self.features)

    @property
    def uses_pose(self) -> bool:
        return self.pose_width > 0

    def validate(self) -> "ModelConfig":
        if self.features not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.features!r}")
        dims = dict(obs_len=self.obs_len, pred_len=self.pred_len, embed_dim=self.embed_dim,
                    hidden_dim=self.hidden_dim, latent_dim=self.latent_dim, k=self.k)
        bad = [k for k, v in dims.items() if not isinstance(v, int) or v < 1]
        if bad:
            raise ConfigError(f"dimensions must be integers >= 1: {', '.join(bad)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.cell != "gru":
            raise ConfigError(f"unsupported recurrent cell {self.cell!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d).validate()

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in checkpoint order."""
    e, h, z, L = cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim, cfg.pred_len

    def fc(name, n_in, n_out):
        return {f"{name}.w": (n_in, n_out), f"{name}.b": (n_out,)}

    def gru(name, n_in):
        return {f"{name}.w_x": (n_in, 3 * h), f"{name}.w_h": (h, 3 * h), f"{name}.b": (3 * h,)}

    shapes = {**fc("bbox_embed", 4, e), **gru("enc_gru", 2 * e)}
    if cfg.uses_pose:
        shapes.update({**fc("pose_embed", cfg.pose_width, e), **gru("pose_gru", e)})
    shapes.update({
        **fc("target_embed", 4, e), **gru("target_gru", e),
        **fc("recognition", 2 * h, 2 * z), **fc("prior", h, 2 * z),
        **fc("generation", z + h, h),
        **fc("goal_regressor", h, 4 * L), **fc("goal_embed", 4, e),
        **fc("enc_attn", e, 1), **fc("dec_attn", e, 1),
    })
    if cfg.uses_pose:
        shapes.update(fc("dec_init", 2 * h, h))
    shapes.update({**fc("dec_box_embed", 4, e), **gru("dec_gru", 2 * e), **fc("regressor", h, 4)})
    return shapes


class ModelParams:
    """Named learnable tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Node]):
        self.config = config.validate()
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ConfigError(f"parameter names do not match config (got {len(tensors)} tensors, "
                              f"expected {len(expected)})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {tensors[name].shape} does not match config {shape}")
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, rng: RngState) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
        config.validate()
        shapes = param_shapes(config)
        tensors = {}
        for name, shape in shapes.items():
            layer = name.rsplit(".", 1)[0]
            # biases take the fan-in of their layer (the hidden size for GRUs)
            ref = shape if len(shape) == 2 else shapes.get(f"{layer}.w", shapes.get(f"{layer}.w_h"))
            bound = 1.0 / np.sqrt(ref[0])
            tensors[name] = ad.parameter(rng.child("init", name).uniform(-bound, bound, shape), name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Node:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def nodes(self) -> list[Node]:
        return list(self.tensors.values())

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: v.grad for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        ad.zero_grads(self.nodes())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: ad.Node(v.value.astype(dtype), True, name=k)
                                         for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.values()[next(iter(self.tensors))].dtype)

    def gru(self, name: str) -> GRUParams:
        return GRUParams(self[f"{name}.w_x"], self[f"{name}.w_h"], self[f"{name}.b"])

    def fc(self, name: str, x: Node) -> Node:
        return ad.linear(x, self[f"{name}.w"], self[f"{name}.b"])

    def count(self) -> int:
        return int(sum(v.value.size for v in self.tensors.values()))


@dataclass
class LatentGaussian:
    mu: Node  # [N, d_z]
    log_sigma: Node  # [N, d_z], clamped to +-8


@dataclass
class StepwiseGoals:
    positions: Node  # [N, remaining, 4] normalized boxes
    hidden: Node  # [N, remaining, d_e]

    @property
    def count(self) -> int:
        return self.positions.shape[1]


@dataclass
class EncoderState:
    h: Node  # [N, d_h]
    goal_context: Node  # [N, d_e]


@dataclass
class ForwardResult:
    predictions: Node  # [B, K, l_d, 4] normalized boxes
    encoder_goals: list[Node]  # per encoder step, [B, l_d, 4]
    prior: LatentGaussian
    posterior: LatentGaussian | None
    decoder_attention: list[np.ndarray] = field(default_factory=list)  # step i: [B*K, l_d - i]
    encoder_attention: list[np.ndarray] = field(default_factory=list)
    decoder_goal_counts: list[int] = field(default_factory=list)


class SGNetPose:
    """Forward computation; stateless apart from the parameters it wraps."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.config = params.config

    def _const(self, array) -> Node:
        return ad.tensor(array)

    # -- building blocks ----------------------------------------------------

    def embed_bbox(self, box: Node) -> Node:
        return ad.relu(self.params.fc("bbox_embed", box))

    def initial_encoder_state(self, n: int) -> EncoderState:
        c = self.config
        return EncoderState(self._const(np.zeros((n, c.hidden_dim))), self._const(np.zeros((n, c.embed_dim))))

    def encoder_step(self, state: EncoderState, box_embedding: Node) -> Node:
        return ad.gru_cell(ad.concat([box_embedding, state.goal_context], axis=1), state.h,
                           self.params.gru("enc_gru"))

    def pose_encoder(self, poses: Node, rng: RngState | None, training: bool) -> Node:
        """poses: [N, L_o, P] -> final GRU hidden [N, d_h]."""
        if not self.config.uses_pose:
            raise UsageError("pose_encoder called in bbox-only mode")
        n, steps, _ = poses.shape
        emb = ad.relu(self.params.fc("pose_embed", poses))
        emb = ad.dropout(emb, self.config.dropout, rng, training)
        h = self._const(np.zeros((n, self.config.hidden_dim)))
        cell = self.params.gru("pose_gru")
        for t in range(steps):
            h = ad.gru_cell(ad.getitem(emb, (slice(None), t)), h, cell)
        return h

    def sge_predict(self, h: Node, remaining: int | None = None) -> StepwiseGoals:
        """Goals for the last ``remaining`` of the pred_len future steps."""
        L = self.config.pred_len
        remaining = L if remaining is None else remaining
        if not 1 <= remaining <= L:
            raise UsageError(f"remaining must be in [1, {L}], got {remaining}")
        positions = ad.reshape(self.params.fc("goal_regressor", h), (h.shape[0], L, 4))
        if remaining < L:
            positions = ad.getitem(positions, (slice(None), slice(L - remaining, None)))
        return StepwiseGoals(positions, self.embed_goals(positions))

    def embed_goals(self, positions: Node) -> Node:
        return ad.relu(self.params.fc("goal_embed", positions))

    def attention_scores(self, goal_hidden: Node, which: str) -> Node:
        """u_s = w . tanh(h_s) + b for every goal: [N, S, d_e] -> [N, S]."""
        n, s, _ = goal_hidden.shape
        scores = self.params.fc(f"{which}_attn", ad.tanh(goal_hidden))
        return ad.reshape(scores, (n, s))

    def goal_aggregate(self, goal_hidden: Node, which: str, scores: Node | None = None) -> tuple[Node, Node]:
        """Attention pool over goals. Returns (context [N, d_e], weights [N, S])."""
        if goal_hidden.shape[1] < 1:
            raise UsageError("goal_aggregate needs at least one goal")
        if scores is None:
            scores = self.attention_scores(goal_hidden, which)
        weights = ad.softmax(scores)
        return ad.weighted_sum(weights, goal_hidden), weights

    def target_encoder(self, future: Node, training: bool) -> Node:
        if not training:
            raise UsageError("target_encoder runs only in training mode")
        n, steps, _ = future.shape
        emb = ad.relu(self.params.fc("target_embed", future))
        h = self._const(np.zeros((n, self.config.hidden_dim)))
        cell = self.params.gru("target_gru")
        for t in range(steps):
            h = ad.gru_cell(ad.getitem(emb, (slice(None), t)), h, cell)
        return h

    def _gaussian(self, out: Node) -> LatentGaussian:
        z = self.config.latent_dim
        mu = ad.getitem(out, (slice(None), slice(0, z)))
        log_sigma = ad.clip(ad.getitem(out, (slice(None), slice(z, 2 * z))), -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
        return LatentGaussian(mu, log_sigma)

    def cvae_recognition(self, h_e: Node, h_y: Node) -> LatentGaussian:
        return self._gaussian(self.params.fc("recognition", ad.concat([h_e, h_y], axis=1)))

    def cvae_prior(self, h_e: Node) -> LatentGaussian:
        return self._gaussian(self.params.fc("prior", h_e))

    @staticmethod
    def sample_latent(g: LatentGaussian, rng: RngState | None, deterministic: bool = False) -> Node:
        """Reparameterized z = mu + sigma * eps; eps = 0 when deterministic."""
        if deterministic:
            return g.mu
        if rng is None:
            raise UsageError("stochastic latent sampling needs an rng")
        eps = ad.tensor(rng.normal(g.mu.shape))
        return ad.add(g.mu, ad.mul(ad.exp(g.log_sigma), eps))

    # -- full pass ----------------------------------------------------------

    def forward(self, batch: Batch, mode: str = "infer", rng: RngState | None = None, k: int | None = None,
                deterministic: bool = False) -> ForwardResult:
        """Predict [B, K, pred_len, 4] normalized boxes.

        mode='train' draws z from the recognition network (needs targets) and
        enables dropout; mode='infer' draws from the prior.
        """
        if mode not in ("train", "infer"):
            raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
        cfg = self.config
        training = mode == "train"
        k = cfg.k if k is None else k
        if k < 1:
            raise UsageError("k must be >= 1")
        bbox = np.asarray(batch.bbox)
        n, obs_len, _ = bbox.shape
        if obs_len != cfg.obs_len:
            raise ConfigError(f"batch has {obs_len} observed frames, model expects {cfg.obs_len}")
        if training and batch.targets is None:
            raise UsageError("training forward needs ground-truth targets")
        if cfg.uses_pose and (batch.pose is None or batch.pose.shape[-1] != cfg.pose_width):
            raise ConfigError(f"feature mode {cfg.features!r} needs pose inputs of width {cfg.pose_width}")
        if rng is None and (not deterministic or (training and cfg.uses_pose and cfg.dropout > 0)):
            raise UsageError("forward needs an rng for latent sampling or dropout")

        state = self.initial_encoder_state(n)
        encoder_goals, encoder_attention = [], []
        goals = None
        for t in range(obs_len):
            h = self.encoder_step(state, self.embed_bbox(self._const(bbox[:, t])))
            goals = self.sge_predict(h)
            context, weights = self.goal_aggregate(goals.hidden, "enc")
            encoder_goals.append(goals.positions)
            encoder_attention.append(weights.value)
            state = EncoderState(h, context)
        h_e = state.h

        pose_h = None
        if cfg.uses_pose:
            pose_h = self.pose_encoder(self._const(batch.pose), rng.child("dropout") if rng else None, training)

        prior = self.cvae_prior(h_e)
        posterior = None
        source = prior
        if training:
            if batch.targets.shape[1] != cfg.pred_len:
                raise ConfigError(f"targets have {batch.targets.shape[1]} steps, model expects {cfg.pred_len}")
            h_y = self.target_encoder(self._const(batch.targets), training)
            posterior = self.cvae_recognition(h_e, h_y)
            source = posterior

        rows = np.repeat(np.arange(n), k)
        tiled = LatentGaussian(ad.take(source.mu, rows), ad.take(source.log_sigma, rows))
        z = self.sample_latent(tiled, rng.child("latent") if rng else None, deterministic)
        h_d = ad.relu(self.params.fc("generation", ad.concat([z, ad.take(h_e, rows)], axis=1)))
        if cfg.uses_pose:
            h_d = ad.tanh(self.params.fc("dec_init", ad.concat([h_d, ad.take(pose_h, rows)], axis=1)))

        goal_hidden = ad.take(goals.hidden, rows)
        scores = self.attention_scores(goal_hidden, "dec")
        prev = self._const(np.repeat(bbox[:, -1], k, axis=0))
        cell = self.params.gru("dec_gru")
        outputs, dec_attention, counts = [], [], []
        L = cfg.pred_len
        for i in range(L):
            ahead = (slice(None), slice(i, None))
            context, weights = self.goal_aggregate(ad.getitem(goal_hidden, ahead) if i else goal_hidden, "dec",
                                                   ad.getitem(scores, ahead) if i else scores)
            dec_attention.append(weights.value)
            counts.append(L - i)
            step_in = ad.concat([ad.relu(self.params.fc("dec_box_embed", prev)), context], axis=1)
            h_d = ad.gru_cell(step_in, h_d, cell)
            prev = self.params.fc("regressor", h_d)
            outputs.append(prev)
        predictions = ad.reshape(ad.stack(outputs, axis=1), (n, k, L, 4))
        return ForwardResult(predictions, encoder_goals, prior, posterior, dec_attention,
                             encoder_attention, counts)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write <path>.json (manifest) and <path>.bin (little-endian float32 blob)."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, node in params.tensors.items():
        raw = np.ascontiguousarray(node.value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(node.shape), "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "config_hash": params.config.config_hash(),
        "tensors": entries,
        "extra": extra or {},
    }
    json_path, bin_path = base.with_suffix(".json"), base.with_suffix(".bin")
    bin_path.write_bytes(b"".join(blobs))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return json_path, bin_path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    json_path, bin_path = base.with_suffix(".json"), base.with_suffix(".bin")
    if not json_path.is_file() or not bin_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {json_path} / {bin_path}")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    blob = bin_path.read_bytes()
    expected = param_shapes(config)
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise DataError(f"checkpoint tensor {name} has shape {shape}, config expects {expected.get(name)}")
        lo, hi = entry["offset"], entry["offset"] + entry["length"]
        if hi > len(blob) or entry["length"] != 4 * int(np.prod(shape)):
            raise DataError(f"checkpoint tensor {name} lies outside the blob")
        value = np.frombuffer(blob[lo:hi], dtype="<f4").astype(np.float32).reshape(shape)
        if not np.all(np.isfinite(value)):
            raise DataError(f"checkpoint tensor {name} has non-finite entries")
        tensors[name] = ad.Node(value, True, name=name)
    return ModelParams(config, tensors), manifest
