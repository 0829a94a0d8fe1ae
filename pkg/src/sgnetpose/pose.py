"""Keypoint schema, body-segment angles, mirroring and feature normalization.

Keypoint order is COCO without eyes and ears::

    0 nose, 1/2 shoulders, 3/4 elbows, 5/6 wrists, 7/8 hips, 9/10 knees,
    11/12 ankles  (odd = left, even = right)

All geometry is float64. Mirroring computes ``x -> W - x``, which is exactly
invertible for coordinates on any grid no finer than ulp(W) (integer or
fractional pixel values such as multiples of 1/1024); for arbitrary floats
the round trip is within one ulp of W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

KEYPOINT_NAMES = (
    "nose",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
LEFT_RIGHT_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))
# index permutation applied to keypoints when mirroring
MIRROR_ORDER = np.array([0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11])

ANGLE_NAMES = (
    "neck_left", "neck_right",
    "armpit_left", "armpit_right",
    "elbow_left", "elbow_right",
    "torso_left", "torso_right",
    "thigh_left", "thigh_right",
    "knee_left", "knee_right",
)
NUM_ANGLES = len(ANGLE_NAMES)
ANGLE_MIRROR_ORDER = np.array([1, 0, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10])

DEGENERATE_RAY = 1e-6  # px
DEGENERATE_ANGLE = 180.0

NOSE = 0
SHOULDER = (1, 2)
ELBOW = (3, 4)
WRIST = (5, 6)
HIP = (7, 8)
KNEE = (9, 10)
ANKLE = (11, 12)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise DataError(f"bounding box corners out of order: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)


@dataclass(frozen=True, eq=False)
class Keypoints13:
    """13 x (x px, y px, confidence)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise DataError(f"expected 13 keypoints of (x, y, confidence), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("non-finite keypoint value")
        if np.any(pts[:, 2] < 0) or np.any(pts[:, 2] > 1):
            raise DataError("keypoint confidence outside [0, 1]")
        object.__setattr__(self, "points", pts)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def mean_confidence(self) -> float:
        return float(self.points[:, 2].mean())

    def __eq__(self, other) -> bool:
        return isinstance(other, Keypoints13) and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BodyAngles12:
    angles: np.ndarray  # degrees, ANGLE_NAMES order
    valid: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.angles[ANGLE_NAMES.index(name)])

    def __eq__(self, other) -> bool:
        return (isinstance(other, BodyAngles12) and np.array_equal(self.angles, other.angles)
                and np.array_equal(self.valid, other.valid))

    __hash__ = None


def _angle_at(vertex: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ra = a - vertex
    rb = b - vertex
    na = np.sqrt((ra * ra).sum(-1))
    nb = np.sqrt((rb * rb).sum(-1))
    ok = (na >= DEGENERATE_RAY) & (nb >= DEGENERATE_RAY)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (ra * rb).sum(-1) / (na * nb)
    cos = np.clip(np.where(ok, cos, -1.0), -1.0, 1.0)
    return np.degrees(np.arccos(cos)), ok


def angles_from_xy(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized angle computation for keypoint arrays of shape [..., 13, 2].

    Returns (angles [..., 12] in degrees, valid [..., 12]).
    """
    xy = np.asarray(xy, dtype=np.float64)
    p = lambda i: xy[..., i, :]  # noqa: E731
    shoulder_mid = (p(SHOULDER[0]) + p(SHOULDER[1])) / 2
    triples = []
    for side in (0, 1):
        triples.append((0, side, shoulder_mid, p(NOSE), p(SHOULDER[side])))
    for side in (0, 1):
        triples.append((1, side, p(SHOULDER[side]), p(ELBOW[side]), p(SHOULDER[1 - side])))
    for side in (0, 1):
        triples.append((2, side, p(ELBOW[side]), p(WRIST[side]), p(SHOULDER[side])))
    for side in (0, 1):
        triples.append((3, side, p(HIP[side]), p(SHOULDER[side]), p(KNEE[side])))
    for side in (0, 1):
        triples.append((4, side, p(HIP[side]), p(KNEE[side]), p(HIP[1 - side])))
    for side in (0, 1):
        triples.append((5, side, p(KNEE[side]), p(ANKLE[side]), p(HIP[side])))
    out = np.empty(xy.shape[:-2] + (NUM_ANGLES,))
    valid = np.empty(xy.shape[:-2] + (NUM_ANGLES,), dtype=bool)
    for kind, side, vertex, a, b in triples:
        angle, ok = _angle_at(vertex, a, b)
        out[..., 2 * kind + side] = angle
        valid[..., 2 * kind + side] = ok
    return out, valid


def compute_angles(kp: Keypoints13) -> BodyAngles12:
    """The 12 body-segment angles (degrees, [0, 180]) of one skeleton.

    A ray shorter than 1e-6 px makes its angle 180 with valid=False.
    """
    angles, valid = angles_from_xy(kp.xy)
    return BodyAngles12(angles, valid)


def flip_keypoints(points: np.ndarray, frame_width: float) -> np.ndarray:
    """Mirror [..., 13, 3] keypoint arrays and swap left/right slots."""
    out = np.array(points, dtype=np.float64)[..., MIRROR_ORDER, :]
    out[..., 0] = frame_width - out[..., 0]
    return out


def flip_boxes(boxes: np.ndarray, frame_width: float) -> np.ndarray:
    """Mirror [..., 4] box arrays keeping x_min <= x_max."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = frame_width - boxes[..., 2]
    out[..., 2] = frame_width - boxes[..., 0]
    return out


def flip_horizontal(kp: Keypoints13 | None, box: BoundingBox,
                    frame_width: float) -> tuple[Keypoints13 | None, BoundingBox]:
    if frame_width <= 0:
        raise DataError(f"frame width must be positive, got {frame_width}")
    flipped_box = BoundingBox(*(float(v) for v in flip_boxes(box.as_array(), frame_width)))
    if kp is None:
        return None, flipped_box
    return Keypoints13(flip_keypoints(kp.points, frame_width)), flipped_box


def _box_scale(width: float, height: float) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise DataError(f"frame dimensions must be positive, got {width}x{height}")
    return np.array([width, height, width, height], dtype=np.float64)


def normalize_box(box, width: float, height: float) -> np.ndarray:
    """Box array [..., 4] in pixels -> fractions of the frame."""
    return np.asarray(box, dtype=np.float64) / _box_scale(width, height)


def denormalize_box(box, width: float, height: float) -> np.ndarray:
    return np.asarray(box, dtype=np.float64) * _box_scale(width, height)


def normalize_keypoints(points, width: float, height: float) -> np.ndarray:
    """[..., 13, 2 or 3] -> [..., 26] as (x/W, y/H) per point; confidence dropped."""
    xy = np.asarray(points, dtype=np.float64)[..., :2] / np.array([width, height], dtype=np.float64)
    return xy.reshape(xy.shape[:-2] + (2 * NUM_KEYPOINTS,))


def denormalize_keypoints(features, width: float, height: float) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    xy = feats.reshape(feats.shape[:-1] + (NUM_KEYPOINTS, 2))
    return xy * np.array([width, height], dtype=np.float64)


def normalize_angles(angles) -> np.ndarray:
    return np.asarray(angles, dtype=np.float64) / 180.0


def denormalize_angles(features) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) * 180.0


def normalize_features(box: BoundingBox, kp: Keypoints13 | None, angles: BodyAngles12 | None,
                       frame_width: float, frame_height: float):
    """Map one frame to model features in [0, 1]: box 4-vector, keypoints 26-vector, angles 12-vector."""
    box_vec = normalize_box(box.as_array(), frame_width, frame_height)
    kp_vec = None if kp is None else normalize_keypoints(kp.points, frame_width, frame_height)
    ang_vec = None if angles is None else normalize_angles(angles.angles)
    return box_vec, kp_vec, ang_vec
