"""Frame annotations -> windowed trajectory samples -> normalized batches.

Input is JSON Lines, one object per frame observation::

    {"video_id": "v1", "frame": 12, "width": 1920, "height": 1080,
     "track_id": "p3", "bbox": [x_min, y_min, x_max, y_max],
     "keypoints": [[x, y, conf], ... 13 entries] | null}
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import pose
from .autodiff import RngState
from .errors import ConfigError, DataError
from .pose import BoundingBox, Keypoints13

log = logging.getLogger(__name__)

FIELDS = ("video_id", "frame", "width", "height", "track_id", "bbox", "keypoints")
FEATURE_MODES = ("bbox", "bbox+pose", "bbox+angle")
SPLITS = ("train", "val", "test")
DATASET_FORMAT = "sgnetpose-dataset/1"


def pose_width(mode: str) -> int:
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; choose from {', '.join(FEATURE_MODES)}")
    return {"bbox": 0, "bbox+pose": 2 * pose.NUM_KEYPOINTS, "bbox+angle": pose.NUM_ANGLES}[mode]


def stable_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FrameAnnotation:
    video_id: str
    frame: int
    frame_width: int
    frame_height: int
    track_id: str
    box: BoundingBox
    keypoints: Keypoints13 | None = None

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame": self.frame,
            "width": self.frame_width,
            "height": self.frame_height,
            "track_id": self.track_id,
            "bbox": list(self.box.as_tuple()),
            "keypoints": None if self.keypoints is None else self.keypoints.points.tolist(),
        }

    def has_pose(self, min_confidence: float) -> bool:
        return self.keypoints is not None and self.keypoints.mean_confidence >= min_confidence


@dataclass
class IngestResult:
    annotations: list[FrameAnnotation] = field(default_factory=list)
    rejected: list[tuple[int, str]] = field(default_factory=list)
    clamped: int = 0

    @property
    def rejected_count(self) -> int:
        return len(self.rejected)


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise DataError(f"{what} must be a finite number, got {value!r}")
    return value


def _integer(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"{what} must be an integer, got {value!r}")
    return value


def parse_record(record: dict) -> tuple[FrameAnnotation, bool]:
    """Validate one decoded JSON object. Returns (annotation, was_clamped)."""
    if not isinstance(record, dict):
        raise DataError("record is not a JSON object")
    missing = [f for f in FIELDS if f not in record]
    extra = sorted(set(record) - set(FIELDS))
    if missing or extra:
        raise DataError(f"field set mismatch (missing {missing}, unexpected {extra})")
    video_id, track_id = record["video_id"], record["track_id"]
    if not isinstance(video_id, str) or not isinstance(track_id, str):
        raise DataError("video_id and track_id must be strings")
    frame = _integer(record["frame"], "frame")
    width = _integer(record["width"], "width")
    height = _integer(record["height"], "height")
    if frame < 0:
        raise DataError(f"negative frame index {frame}")
    if width <= 0 or height <= 0:
        raise DataError(f"non-positive frame size {width}x{height}")
    bbox = record["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise DataError("bbox must be a list of 4 numbers")
    bbox = [_number(v, "bbox entry") for v in bbox]
    if bbox[0] > bbox[2] or bbox[1] > bbox[3]:
        raise DataError(f"bbox corners out of order: {bbox}")
    limits = (width, height, width, height)
    clamped_box = [min(max(v, 0), lim) for v, lim in zip(bbox, limits)]
    clamped = clamped_box != bbox
    keypoints = None
    raw_kp = record["keypoints"]
    if raw_kp is not None:
        if not isinstance(raw_kp, list) or len(raw_kp) != pose.NUM_KEYPOINTS:
            raise DataError("keypoints must be null or a list of 13 [x, y, confidence] triples")
        rows = []
        for row in raw_kp:
            if not isinstance(row, list) or len(row) != 3:
                raise DataError("each keypoint must be [x, y, confidence]")
            x, y, c = (_number(v, "keypoint entry") for v in row)
            cx, cy = min(max(x, 0), width), min(max(y, 0), height)
            clamped |= (cx, cy) != (x, y)
            rows.append((cx, cy, c))
        keypoints = Keypoints13(np.array(rows, dtype=np.float64))
    box = BoundingBox(*clamped_box)
    return FrameAnnotation(video_id, frame, width, height, track_id, box, keypoints), clamped


def ingest(path, strict: bool = False) -> IngestResult:
    """Read a JSONL annotation file.

    Bad lines are rejected and recorded as (line number, reason); with
    ``strict`` the first bad line raises DataError instead. Coordinates
    outside the frame are clamped and counted. Duplicate (video, track,
    frame) observations keep the first occurrence.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    result = IngestResult()
    seen: set[tuple[str, str, int]] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid JSON: {exc.msg}") from None
                ann, clamped = parse_record(record)
                key = (ann.video_id, ann.track_id, ann.frame)
                if key in seen:
                    raise DataError(f"duplicate observation {key}")
            except DataError as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                result.rejected.append((lineno, str(exc)))
                continue
            seen.add(key)
            result.clamped += clamped
            result.annotations.append(ann)
    if result.rejected:
        log.warning("%s: rejected %d line(s), first at line %d: %s", path, len(result.rejected),
                    *result.rejected[0])
    if result.clamped:
        log.warning("%s: clamped coordinates on %d record(s)", path, result.clamped)
    return result


def write_jsonl(annotations: Iterable[FrameAnnotation], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_record()) + "\n")


@dataclass(eq=False)
class TrajectorySample:
    """One window: obs_len observed frames followed by pred_len future boxes.

    Both keypoint and angle views of the pose are kept so one prepared
    dataset serves every feature mode; frames without pose hold NaN and are
    marked False in ``pose_mask``.
    """

    observed_boxes: np.ndarray  # [L_o, 4] px
    observed_keypoints: np.ndarray  # [L_o, 13, 3] px, NaN where absent
    observed_angles: np.ndarray  # [L_o, 12] degrees, NaN where absent
    pose_mask: np.ndarray  # [L_o] bool
    future_boxes: np.ndarray  # [l_d, 4] px
    frame_width: int
    frame_height: int
    video_id: str
    track_id: str
    start_frame: int
    flipped: bool = False

    @property
    def obs_len(self) -> int:
        return len(self.observed_boxes)

    @property
    def pred_len(self) -> int:
        return len(self.future_boxes)

    @property
    def has_pose(self) -> bool:
        return bool(self.pose_mask.all())

    @property
    def key(self) -> tuple:
        return (self.video_id, self.track_id, self.start_frame, self.flipped)

    def pose_features(self, mode: str) -> np.ndarray | None:
        """Normalized per-frame pose inputs for a feature mode ([L_o, 26] or [L_o, 12])."""
        if pose_width(mode) == 0:
            return None
        if not self.has_pose:
            raise ConfigError(f"sample {self.key} lacks pose on some observed frames; "
                              f"feature mode {mode!r} needs a pose-filtered dataset")
        if mode == "bbox+pose":
            return pose.normalize_keypoints(self.observed_keypoints, self.frame_width, self.frame_height)
        return pose.normalize_angles(self.observed_angles)

    def to_record(self) -> dict:
        def rows(a):
            return [[None if math.isnan(v) else v for v in r] for r in a.reshape(len(a), -1).tolist()]

        return {
            "video_id": self.video_id, "track_id": self.track_id, "start_frame": self.start_frame,
            "flipped": self.flipped, "width": self.frame_width, "height": self.frame_height,
            "observed_boxes": self.observed_boxes.tolist(),
            "observed_keypoints": rows(self.observed_keypoints),
            "observed_angles": rows(self.observed_angles),
            "pose_mask": self.pose_mask.tolist(),
            "future_boxes": self.future_boxes.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrajectorySample":
        def arr(rows, shape):
            a = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=np.float64)
            return a.reshape(shape)

        obs = np.array(rec["observed_boxes"], dtype=np.float64).reshape(-1, 4)
        n = len(obs)
        return cls(
            observed_boxes=obs,
            observed_keypoints=arr(rec["observed_keypoints"], (n, pose.NUM_KEYPOINTS, 3)),
            observed_angles=arr(rec["observed_angles"], (n, pose.NUM_ANGLES)),
            pose_mask=np.array(rec["pose_mask"], dtype=bool),
            future_boxes=np.array(rec["future_boxes"], dtype=np.float64).reshape(-1, 4),
            frame_width=rec["width"], frame_height=rec["height"],
            video_id=rec["video_id"], track_id=rec["track_id"],
            start_frame=rec["start_frame"], flipped=rec["flipped"],
        )


def group_tracks(annotations: Iterable[FrameAnnotation]) -> dict[tuple[str, str], list[FrameAnnotation]]:
    """(video_id, track_id) -> frames sorted by index, keys in sorted order."""
    tracks: dict[tuple[str, str], list[FrameAnnotation]] = defaultdict(list)
    for ann in annotations:
        tracks[(ann.video_id, ann.track_id)].append(ann)
    return {k: sorted(tracks[k], key=lambda a: a.frame) for k in sorted(tracks)}


def window_starts(frames: Sequence[int], length: int, stride: int) -> list[int]:
    """Start frames s = first + k*stride whose frames s..s+length-1 are all present."""
    if not frames:
        return []
    present = set(frames)
    first, last = frames[0], frames[-1]
    return [s for s in range(first, last - length + 2, stride)
            if all(f in present for f in range(s, s + length))]


def _pose_arrays(track: list[FrameAnnotation], min_confidence: float):
    n = len(track)
    kps = np.full((n, pose.NUM_KEYPOINTS, 3), np.nan)
    mask = np.zeros(n, dtype=bool)
    for i, ann in enumerate(track):
        if ann.has_pose(min_confidence):
            kps[i] = ann.keypoints.points
            mask[i] = True
    angles = np.full((n, pose.NUM_ANGLES), np.nan)
    if mask.any():
        angles[mask] = pose.angles_from_xy(kps[mask, :, :2])[0]
    return kps, angles, mask


def build_samples(annotations: Iterable[FrameAnnotation], obs_len: int, pred_len: int, stride: int = 1,
                  require_pose: bool = False, min_confidence: float = 0.3) -> list[TrajectorySample]:
    """Slide a window of obs_len + pred_len consecutive frames over every track.

    Windows never span two tracks or a frame gap. With ``require_pose`` a
    window is dropped when any observed frame lacks a confident skeleton;
    future frames only need boxes.
    """
    if obs_len < 1 or pred_len < 1:
        raise ConfigError(f"obs_len and pred_len must be >= 1, got {obs_len}, {pred_len}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    length = obs_len + pred_len
    samples = []
    for (video_id, track_id), track in group_tracks(annotations).items():
        frames = [a.frame for a in track]
        starts = window_starts(frames, length, stride)
        if not starts:
            continue
        index = {f: i for i, f in enumerate(frames)}
        boxes = np.array([a.box.as_tuple() for a in track], dtype=np.float64)
        kps, angles, mask = _pose_arrays(track, min_confidence)
        for s in starts:
            i = index[s]
            obs = slice(i, i + obs_len)
            if require_pose and not mask[obs].all():
                continue
            samples.append(TrajectorySample(
                observed_boxes=boxes[obs].copy(),
                observed_keypoints=kps[obs].copy(),
                observed_angles=angles[obs].copy(),
                pose_mask=mask[obs].copy(),
                future_boxes=boxes[i + obs_len: i + length].copy(),
                frame_width=track[i].frame_width,
                frame_height=track[i].frame_height,
                video_id=video_id, track_id=track_id, start_frame=s,
            ))
    return samples


def build_observations(annotations: Iterable[FrameAnnotation], obs_len: int, stride: int = 1,
                       require_pose: bool = False, min_confidence: float = 0.3) -> list[TrajectorySample]:
    """Observation-only windows (no future boxes) for prediction."""
    if obs_len < 1 or stride < 1:
        raise ConfigError(f"obs_len and stride must be >= 1, got {obs_len}, {stride}")
    samples = []
    for (video_id, track_id), track in group_tracks(annotations).items():
        frames = [a.frame for a in track]
        index = {f: i for i, f in enumerate(frames)}
        boxes = np.array([a.box.as_tuple() for a in track], dtype=np.float64).reshape(-1, 4)
        kps, angles, mask = _pose_arrays(track, min_confidence)
        for s in window_starts(frames, obs_len, stride):
            obs = slice(index[s], index[s] + obs_len)
            if require_pose and not mask[obs].all():
                continue
            samples.append(TrajectorySample(
                boxes[obs].copy(), kps[obs].copy(), angles[obs].copy(), mask[obs].copy(), np.zeros((0, 4)),
                track[index[s]].frame_width, track[index[s]].frame_height, video_id, track_id, s))
    return samples


def mirror_sample(sample: TrajectorySample) -> TrajectorySample:
    """Mirror every frame (future boxes included); angles are recomputed."""
    w = sample.frame_width
    kps = pose.flip_keypoints(sample.observed_keypoints, w)
    angles = np.full_like(sample.observed_angles, np.nan)
    if sample.pose_mask.any():
        angles[sample.pose_mask] = pose.angles_from_xy(kps[sample.pose_mask, :, :2])[0]
    return TrajectorySample(
        observed_boxes=pose.flip_boxes(sample.observed_boxes, w),
        observed_keypoints=kps,
        observed_angles=angles,
        pose_mask=sample.pose_mask.copy(),
        future_boxes=pose.flip_boxes(sample.future_boxes, w),
        frame_width=sample.frame_width, frame_height=sample.frame_height,
        video_id=sample.video_id, track_id=sample.track_id, start_frame=sample.start_frame,
        flipped=not sample.flipped,
    )


def augment_flip(samples: Sequence[TrajectorySample]) -> list[TrajectorySample]:
    """Originals followed by their mirror images, in the same order."""
    return list(samples) + [mirror_sample(s) for s in samples]


@dataclass(eq=False)
class Batch:
    bbox: np.ndarray  # [B, L_o, 4] normalized, float32
    pose: np.ndarray | None  # [B, L_o, P] normalized, float32
    targets: np.ndarray  # [B, l_d, 4] normalized, float32
    frame_size: np.ndarray  # [B, 2] (width, height)
    samples: tuple = ()

    def __len__(self) -> int:
        return len(self.bbox)

    @property
    def box_scale(self) -> np.ndarray:
        """[B, 4] multipliers taking normalized boxes back to pixels."""
        w, h = self.frame_size[:, 0], self.frame_size[:, 1]
        return np.stack([w, h, w, h], axis=1).astype(np.float64)

    def to_pixels(self, boxes: np.ndarray) -> np.ndarray:
        """Denormalize [B, ..., 4] boxes with each row's frame size."""
        scale = self.box_scale.reshape((len(self),) + (1,) * (boxes.ndim - 2) + (4,))
        return np.asarray(boxes, dtype=np.float64) * scale


def collate(samples: Sequence[TrajectorySample], mode: str) -> Batch:
    pose_width(mode)
    if not samples:
        raise DataError("cannot collate an empty batch")
    obs_lens = {s.obs_len for s in samples}
    pred_lens = {s.pred_len for s in samples}
    if len(obs_lens) != 1 or len(pred_lens) != 1:
        raise ConfigError("all samples in a batch must share obs_len and pred_len")
    bbox = np.stack([pose.normalize_box(s.observed_boxes, s.frame_width, s.frame_height) for s in samples])
    targets = np.stack([pose.normalize_box(s.future_boxes, s.frame_width, s.frame_height) for s in samples])
    feats = None
    if pose_width(mode):
        feats = np.stack([s.pose_features(mode) for s in samples]).astype(np.float32)
    size = np.array([(s.frame_width, s.frame_height) for s in samples], dtype=np.float64)
    return Batch(bbox.astype(np.float32), feats, targets.astype(np.float32), size, tuple(samples))


def make_batches(samples: Sequence[TrajectorySample], batch_size: int, mode: str = "bbox",
                 rng: RngState | None = None, shuffle: bool = False) -> list[Batch]:
    """Split samples into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle:
        if rng is None:
            raise ConfigError("shuffle=True needs an rng")
        order = rng.permutation(len(samples))
    return [collate([samples[i] for i in order[lo: lo + batch_size]], mode)
            for lo in range(0, len(samples), batch_size)]


# -- prepared dataset ----------------------------------------------------

@dataclass
class PrepareConfig:
    obs_len: int = 15
    pred_len: int = 45
    stride: int = 1
    require_pose: bool = True
    min_confidence: float = 0.3
    flip_augment: bool = False
    flip_all_splits: bool = False
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.obs_len < 1 or self.pred_len < 1 or self.stride < 1:
            raise ConfigError("obs_len, pred_len and stride must all be >= 1")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1
                and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("val/test fractions must be in [0, 1) and sum below 1")
        if not 0 <= self.min_confidence <= 1:
            raise ConfigError("min_confidence must be in [0, 1]")


def split_videos(video_ids: Iterable[str], val_fraction: float, test_fraction: float,
                 seed: int) -> dict[str, set[str]]:
    """Deterministic video-level split so no track leaks across splits."""
    ids = sorted(set(video_ids))
    order = [ids[i] for i in RngState(seed).child("split").permutation(len(ids))]
    n_test = int(round(test_fraction * len(ids)))
    n_val = int(round(val_fraction * len(ids)))
    if ids and n_test + n_val >= len(ids):
        n_val = max(0, len(ids) - 1 - n_test)
    return {
        "test": set(order[:n_test]),
        "val": set(order[n_test: n_test + n_val]),
        "train": set(order[n_test + n_val:]),
    }


def prepare_dataset(annotations: Sequence[FrameAnnotation], config: PrepareConfig,
                    ingest_stats: dict | None = None) -> tuple[dict[str, list[TrajectorySample]], dict]:
    """Split, window, pose-filter and (optionally) flip-augment. Returns (splits, manifest)."""
    config.validate()
    groups = split_videos((a.video_id for a in annotations), config.val_fraction,
                          config.test_fraction, config.seed)
    splits: dict[str, list[TrajectorySample]] = {}
    counts: dict[str, dict] = {}
    for name in SPLITS:
        anns = [a for a in annotations if a.video_id in groups[name]]
        windows = build_samples(anns, config.obs_len, config.pred_len, config.stride, False, config.min_confidence)
        kept = [s for s in windows if s.has_pose] if config.require_pose else windows
        flip = config.flip_augment and (name == "train" or config.flip_all_splits)
        final = augment_flip(kept) if flip else kept
        splits[name] = final
        counts[name] = {"videos": len(groups[name]), "windows": len(windows),
                        "with_pose": sum(s.has_pose for s in windows), "samples": len(final)}
    settings = {k: getattr(config, k) for k in config.__dataclass_fields__}
    manifest = {
        "format": DATASET_FORMAT,
        **settings,
        "feature_modes": list(FEATURE_MODES) if config.require_pose else ["bbox"],
        "counts": counts,
        "ingest": ingest_stats or {},
        "config_hash": stable_hash(settings),
    }
    manifest["content_hash"] = stable_hash({name: [s.to_record() for s in splits[name]] for name in SPLITS})
    return splits, manifest


def write_prepared(out_dir, splits: dict[str, list[TrajectorySample]], manifest: dict) -> Path:
    out = Path(out_dir)
    for name in SPLITS:
        (out / name).mkdir(parents=True, exist_ok=True)
        with (out / name / "samples.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for s in splits.get(name, []):
                fh.write(json.dumps(s.to_record()) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_split(dataset_dir, split: str) -> list[TrajectorySample]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    path = Path(dataset_dir) / split / "samples.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"missing split file {path}")
    with path.open("r", encoding="utf-8") as fh:
        return [TrajectorySample.from_record(json.loads(line)) for line in fh if line.strip()]
