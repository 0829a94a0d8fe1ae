"""Synthetic pedestrian tracks with a pose cue that precedes motion changes.

Each track moves with piecewise-constant velocity. At scheduled events the
velocity jumps (a turn, or a stop/start). For ``lean_lead`` frames before an
event the upper body shears toward the new heading, proportionally to the
horizontal velocity change, then relaxes over ``lean_decay`` frames. Limbs
swing with a gait phase driven by walking speed. Boxes carry no such cue, so
only a pose-aware model can anticipate the event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pose
from .autodiff import RngState
from .data import FrameAnnotation
from .errors import ConfigError
from .pose import BoundingBox, Keypoints13

# (horizontal offset as a fraction of box width, vertical position as a
# fraction of box height from the top) for the upright template
TEMPLATE = np.array([
    (0.00, 0.08),
    (0.22, 0.20), (-0.22, 0.20),
    (0.27, 0.35), (-0.27, 0.35),
    (0.27, 0.48), (-0.27, 0.48),
    (0.13, 0.52), (-0.13, 0.52),
    (0.14, 0.72), (-0.14, 0.72),
    (0.14, 0.95), (-0.14, 0.95),
])
UPPER_BODY = np.array([0, 1, 2, 3, 4, 5, 6])
HIP_LINE = 0.52
ARMS = np.array([3, 4, 5, 6])
LEGS = np.array([9, 10, 11, 12])


@dataclass
class SynthConfig:
    width: int = 1920
    height: int = 1080
    min_length: int = 80
    max_length: int = 120
    min_speed: float = 2.0  # px / frame
    max_speed: float = 8.0
    # gap between events is uniform in [min_gap, max_gap]; None disables events
    min_gap: int | None = 30
    max_gap: int | None = 60
    stop_probability: float = 0.2
    lean_lead: int = 20
    lean_decay: int = 6
    lean_per_px: float = 0.03  # shear per px/frame of horizontal velocity change
    max_lean: float = 0.5
    box_height: tuple[float, float] = (120.0, 320.0)
    keypoint_noise: float = 0.5  # px
    pose_missing: float = 0.0  # per-frame probability of a null skeleton

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("frame size must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        if self.lean_lead < 1:
            raise ConfigError("lean_lead must be >= 1")
        if self.min_gap is not None:
            if self.max_gap is None or not self.lean_lead + self.lean_decay < self.min_gap <= self.max_gap:
                raise ConfigError("event gaps must exceed lean_lead + lean_decay and min_gap <= max_gap")


@dataclass
class SimulatedTrack:
    start_frame: int
    boxes: np.ndarray  # [T, 4]
    keypoints: np.ndarray  # [T, 13, 3]
    velocity: np.ndarray  # [T, 2]
    lean: np.ndarray  # [T] horizontal shear per px of height above the hips
    events: list[int] = field(default_factory=list)  # local frame indices
    pose_present: np.ndarray | None = None


def _choose_velocity(rng: RngState, cfg: SynthConfig, x: float, horizon: int, moving: bool,
                     margin: float) -> np.ndarray:
    if moving and rng.random() < cfg.stop_probability:
        return np.zeros(2)
    speed = rng.uniform(cfg.min_speed, cfg.max_speed)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    for _ in range(2):
        end = x + sign * speed * horizon
        if margin <= end <= cfg.width - margin:
            break
        sign = -sign
    else:
        # neither direction fits: slow down toward the centre
        sign = 1.0 if x < cfg.width / 2 else -1.0
        speed = min(speed, abs(cfg.width / 2 - x) / max(horizon, 1))
    vy = rng.uniform(-0.3, 0.3)
    return np.array([sign * speed, vy])


def simulate_track(rng: RngState, cfg: SynthConfig, length: int | None = None,
                   start_frame: int | None = None) -> SimulatedTrack:
    cfg.validate()
    if length is None:
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
    if start_frame is None:
        start_frame = int(rng.integers(0, 100))
    margin = 0.1 * cfg.width
    events: list[int] = []
    if cfg.min_gap is not None:
        t = int(rng.integers(cfg.lean_lead + 1, cfg.max_gap + 1))
        while t < length:
            events.append(t)
            t += int(rng.integers(cfg.min_gap, cfg.max_gap + 1))

    height0 = rng.uniform(*cfg.box_height)
    x = rng.uniform(margin + 100, cfg.width - margin - 100)
    y = rng.uniform(0.55 * cfg.height, 0.7 * cfg.height)
    x0 = x
    boundaries = [0, *events, length]
    velocity = np.zeros((length, 2))
    moving = True
    for k in range(len(boundaries) - 1):
        lo, hi = boundaries[k], boundaries[k + 1]
        v = _choose_velocity(rng, cfg, x, hi - lo, moving or k == 0, margin)
        if k == 0 and not v.any():
            v = _choose_velocity(rng, cfg, x, hi - lo, False, margin)
        moving = bool(v.any())
        velocity[lo:hi] = v
        x += v[0] * (hi - lo)

    # centres advance by the velocity of the frame they leave
    steps = np.concatenate([np.zeros((1, 2)), np.cumsum(velocity[:-1], axis=0)])
    centre = np.array([x0, y]) + steps
    phase0 = rng.uniform(0, 2 * np.pi)
    size_phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(length)
    box_h = height0 * (1 + 0.08 * np.sin(2 * np.pi * t / 90 + size_phase))
    box_w = 0.4 * box_h
    boxes = np.stack([centre[:, 0] - box_w / 2, centre[:, 1] - box_h / 2,
                      centre[:, 0] + box_w / 2, centre[:, 1] + box_h / 2], axis=1)

    lean = np.zeros(length)
    for e in events:
        dv = velocity[e, 0] - velocity[e - 1, 0]
        target = float(np.clip(cfg.lean_per_px * dv, -cfg.max_lean, cfg.max_lean))
        lead = np.arange(max(e - cfg.lean_lead, 0), e)
        lean[lead] = target * (lead - (e - cfg.lean_lead) + 1) / cfg.lean_lead
        relax = np.arange(e, min(e + cfg.lean_decay, length))
        lean[relax] = target * (1 - (relax - e + 1) / cfg.lean_decay)

    speed = np.abs(velocity[:, 0])
    phase = phase0 + np.cumsum(speed) / 25.0
    swing = np.clip(speed / cfg.max_speed, 0, 1) * np.sin(phase)
    kps = np.zeros((length, pose.NUM_KEYPOINTS, 3))
    u = np.broadcast_to(TEMPLATE[:, 0], (length, pose.NUM_KEYPOINTS)).copy()
    v = TEMPLATE[:, 1]
    side = np.where(np.arange(pose.NUM_KEYPOINTS) % 2 == 1, 1.0, -1.0)
    u[:, ARMS] += 0.10 * swing[:, None] * side[ARMS]
    u[:, LEGS] -= 0.12 * swing[:, None] * side[LEGS]
    kps[:, :, 0] = centre[:, 0:1] + u * box_w[:, None]
    kps[:, :, 1] = boxes[:, 1:2] + v * box_h[:, None]
    above_hips = (HIP_LINE - v[UPPER_BODY]) * box_h[:, None]
    kps[:, UPPER_BODY, 0] += lean[:, None] * above_hips
    if cfg.keypoint_noise > 0:
        kps[:, :, :2] += cfg.keypoint_noise * rng.normal((length, pose.NUM_KEYPOINTS, 2))
    kps[:, :, 0] = np.clip(kps[:, :, 0], 0, cfg.width)
    kps[:, :, 1] = np.clip(kps[:, :, 1], 0, cfg.height)
    kps[:, :, 2] = rng.uniform(0.6, 1.0, (length, pose.NUM_KEYPOINTS))
    present = rng.random(length) >= cfg.pose_missing
    return SimulatedTrack(start_frame, boxes, kps, velocity, lean, events, present)


def track_annotations(track: SimulatedTrack, video_id: str, track_id: str,
                      cfg: SynthConfig) -> list[FrameAnnotation]:
    out = []
    for i in range(len(track.boxes)):
        b = np.clip(track.boxes[i], 0, [cfg.width, cfg.height, cfg.width, cfg.height])
        kp = Keypoints13(track.keypoints[i]) if track.pose_present[i] else None
        out.append(FrameAnnotation(video_id, track.start_frame + i, cfg.width, cfg.height, track_id,
                                   BoundingBox(*map(float, b)), kp))
    return out


def synth_generate(n_tracks: int, rng: RngState, config: SynthConfig | None = None) -> list[FrameAnnotation]:
    """n_tracks independent pedestrians, one per synthetic video."""
    if n_tracks < 1:
        raise ConfigError(f"n_tracks must be >= 1, got {n_tracks}")
    cfg = config or SynthConfig()
    cfg.validate()
    annotations = []
    for i in range(n_tracks):
        track = simulate_track(rng.child("track", i), cfg)
        annotations.extend(track_annotations(track, f"synth{i:04d}", f"ped{i:04d}", cfg))
    return annotations
