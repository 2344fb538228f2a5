"""Readers and writers for track, pose, label, score and checkpoint files.

All tabular formats are plain CSV with a header row so that any upstream
tracker can append to them line by line.  Boxes are stored in pixels and
normalized by the frame resolution on ingestion.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_KEYPOINTS = 17
GAP_TOLERANCE = 8

TRACK_COLUMNS = (
    "video_id", "frame_index", "track_id", "class_id",
    "center_x", "center_y", "width", "height", "confidence",
)
META_COLUMNS = ("video_id", "frame_width", "frame_height", "frame_count", "fps")
POSE_COLUMNS = ("video_id", "track_id", "frame_index") + tuple(
    f"{axis}{j}" for j in range(NUM_KEYPOINTS) for axis in ("x", "y", "q")
)

CHECKPOINT_MAGIC = b"TRAJVAD\x00"
CHECKPOINT_VERSION = "1"


class TrackFormatError(ValueError):
    """Malformed input record; carries the offending line number."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class CheckpointVersionError(ValueError):
    pass


class CheckpointChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    frame_width: int
    frame_height: int
    frame_count: int
    fps: float = 30.0


@dataclass(frozen=True)
class RawDetection:
    video_id: str
    frame_index: int
    track_id: int
    class_id: int
    box: tuple[float, float, float, float]
    confidence: float


@dataclass
class Track:
    """One object identity over a contiguous frame range.

    ``boxes`` holds normalized (c_x, c_y, w, h) rows, one per frame starting
    at ``start_frame``.  Pose arrays are ``None`` until :func:`parse_pose`
    attaches them; frames without a pose row have ``pose_present`` False.
    """

    video_id: str
    track_id: str
    class_id: int
    start_frame: int
    boxes: np.ndarray
    confidences: np.ndarray
    source_track_id: int = -1
    keypoints: np.ndarray | None = None
    keypoint_conf: np.ndarray | None = None
    pose_present: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes) - 1

    @property
    def frame_range(self) -> range:
        return range(self.start_frame, self.start_frame + len(self.boxes))

    @property
    def has_pose(self) -> bool:
        return self.pose_present is not None and bool(self.pose_present.any())


@dataclass
class GroundTruth:
    video_id: str
    labels: np.ndarray
    hr_mask: np.ndarray | None = None


@dataclass
class IngestReport:
    detections: int = 0
    rejected: int = 0
    duplicates: int = 0
    interpolated_frames: int = 0
    splits: int = 0
    pose_rows: int = 0
    pose_dropped: int = 0
    pose_clamped: int = 0
    notes: list[str] = field(default_factory=list)


@dataclass
class FrameScoreSeries:
    """Per-frame anomaly scores for one video.

    ``traj``, ``pose`` and ``gate`` are only filled for the pose-gated variant.
    """

    video_id: str
    scores: np.ndarray
    covered: np.ndarray
    traj: np.ndarray | None = None
    pose: np.ndarray | None = None
    gate: np.ndarray | None = None


def _rows(path) -> Iterable[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            yield reader.line_num, row


def read_meta(meta_file) -> dict[str, VideoMeta]:
    metas = {}
    for line, row in _rows(meta_file):
        try:
            meta = VideoMeta(
                video_id=row["video_id"],
                frame_width=int(row["frame_width"]),
                frame_height=int(row["frame_height"]),
                frame_count=int(row["frame_count"]),
                fps=float(row.get("fps") or 30.0),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TrackFormatError(meta_file, line, f"bad meta record: {exc}") from None
        if meta.frame_width <= 0 or meta.frame_height <= 0 or meta.frame_count < 1:
            raise TrackFormatError(meta_file, line, "non-positive resolution or frame count")
        metas[meta.video_id] = meta
    return metas


def write_meta(metas: Sequence[VideoMeta], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_COLUMNS)
        for m in sorted(metas, key=lambda m: m.video_id):
            w.writerow([m.video_id, m.frame_width, m.frame_height, m.frame_count, repr(float(m.fps))])


def read_detections(track_file) -> Iterable[tuple[int, RawDetection]]:
    for line, row in _rows(track_file):
        try:
            det = RawDetection(
                video_id=row["video_id"],
                frame_index=int(row["frame_index"]),
                track_id=int(row["track_id"]),
                class_id=int(row["class_id"]),
                box=(float(row["center_x"]), float(row["center_y"]),
                     float(row["width"]), float(row["height"])),
                confidence=float(row["confidence"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TrackFormatError(track_file, line, f"malformed detection: {exc}") from None
        if det.frame_index < 0 or det.track_id < 0:
            raise TrackFormatError(track_file, line, "negative frame or track index")
        yield line, det


def write_detections(detections: Iterable[RawDetection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for d in detections:
            w.writerow([d.video_id, d.frame_index, d.track_id, d.class_id,
                        *(repr(float(v)) for v in d.box), repr(float(d.confidence))])


def normalize_box(box, meta: VideoMeta) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx / meta.frame_width, cy / meta.frame_height,
                     w / meta.frame_width, h / meta.frame_height])


def denormalize_box(box, meta: VideoMeta) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx * meta.frame_width, cy * meta.frame_height,
                     w * meta.frame_width, h * meta.frame_height])


def _build_tracks(video_id, track_id, dets, gap_tolerance, report) -> list[Track]:
    dets = sorted(dets, key=lambda d: d[0])
    # split on gaps longer than the tolerance
    pieces = [[dets[0]]]
    for prev, cur in zip(dets, dets[1:]):
        if cur[0] - prev[0] - 1 > gap_tolerance:
            pieces.append([])
        pieces[-1].append(cur)
    if len(pieces) > 1:
        report.splits += len(pieces) - 1

    tracks = []
    for k, piece in enumerate(pieces):
        frames = np.array([p[0] for p in piece])
        boxes = np.array([p[1] for p in piece])
        conf = np.array([p[2] for p in piece])
        classes = [p[3] for p in piece]
        start, stop = frames[0], frames[-1]
        full = np.arange(start, stop + 1)
        if len(full) != len(frames):
            report.interpolated_frames += len(full) - len(frames)
            boxes = np.stack([np.interp(full, frames, boxes[:, c]) for c in range(4)], axis=1)
            filled = np.empty(len(full))
            filled[frames - start] = conf
            for a, b in zip(frames, frames[1:]):
                if b - a > 1:
                    filled[a - start + 1:b - start] = 0.5 * (filled[a - start] + filled[b - start])
            conf = filled
        # modal class; ties resolved towards the smallest class id
        counts = Counter(classes)
        top = max(counts.values())
        class_id = min(c for c, n in counts.items() if n == top)
        tid = str(track_id) if len(pieces) == 1 else f"{track_id}_{k}"
        tracks.append(Track(
            video_id=video_id, track_id=tid, class_id=class_id, start_frame=int(start),
            boxes=np.clip(boxes, 0.0, 1.0), confidences=np.clip(conf, 0.0, 1.0),
            source_track_id=track_id,
        ))
    return tracks


def parse_tracks(track_file, meta_file, gap_tolerance: int = GAP_TOLERANCE,
                 report: IngestReport | None = None) -> list[Track]:
    """Group detections into normalized, gap-repaired tracks.

    Gaps of at most ``gap_tolerance`` missing frames are linearly
    interpolated; longer gaps split the identity into ``<id>_0``, ``<id>_1``...
    Detections with non-positive size are rejected and counted in ``report``.
    """
    report = report if report is not None else IngestReport()
    metas = read_meta(meta_file)
    grouped: dict[tuple[str, int], dict[int, tuple]] = defaultdict(dict)
    for line, det in read_detections(track_file):
        report.detections += 1
        meta = metas.get(det.video_id)
        if meta is None:
            raise KeyError(f"{track_file}:{line}: unknown video_id {det.video_id!r}")
        if det.box[2] <= 0 or det.box[3] <= 0:
            report.rejected += 1
            continue
        key = (det.video_id, det.track_id)
        prev = grouped[key].get(det.frame_index)
        if prev is not None:
            report.duplicates += 1
            if prev[1] >= det.confidence:
                continue
        grouped[key][det.frame_index] = (
            normalize_box(det.box, meta), det.confidence, det.class_id)

    tracks = []
    for (video_id, track_id) in sorted(grouped):
        rows = grouped[(video_id, track_id)]
        dets = [(f, b, c, k) for f, (b, c, k) in rows.items()]
        tracks.extend(_build_tracks(video_id, track_id, dets, gap_tolerance, report))
    if report.rejected:
        logger.warning("rejected %d detections with non-positive size", report.rejected)
    return tracks


def parse_pose(pose_file, tracks: list[Track], metas: dict[str, VideoMeta],
               report: IngestReport | None = None) -> list[Track]:
    """Attach 17-keypoint poses to tracks in place and return them.

    Keypoints are normalized by resolution like boxes.  Rows outside a
    track's range are dropped, confidences outside [0, 1] are clamped.
    """
    report = report if report is not None else IngestReport()
    index: dict[tuple[str, int], list[Track]] = defaultdict(list)
    for tr in tracks:
        index[(tr.video_id, tr.source_track_id)].append(tr)
        n = len(tr)
        tr.keypoints = np.zeros((n, 2 * NUM_KEYPOINTS))
        tr.keypoint_conf = np.zeros((n, NUM_KEYPOINTS))
        tr.pose_present = np.zeros(n, dtype=bool)

    for line, row in _rows(pose_file):
        report.pose_rows += 1
        try:
            video_id = row["video_id"]
            track_id = int(row["track_id"])
            frame = int(row["frame_index"])
            xs = np.array([float(row[f"x{j}"]) for j in range(NUM_KEYPOINTS)])
            ys = np.array([float(row[f"y{j}"]) for j in range(NUM_KEYPOINTS)])
            qs = np.array([float(row[f"q{j}"]) for j in range(NUM_KEYPOINTS)])
        except (KeyError, TypeError, ValueError) as exc:
            raise TrackFormatError(pose_file, line, f"malformed pose row: {exc}") from None
        target = None
        for tr in index.get((video_id, track_id), ()):
            if tr.start_frame <= frame <= tr.end_frame:
                target = tr
                break
        if target is None:
            report.pose_dropped += 1
            continue
        if np.any((qs < 0) | (qs > 1)):
            report.pose_clamped += 1
            qs = np.clip(qs, 0.0, 1.0)
        meta = metas[video_id]
        i = frame - target.start_frame
        kp = np.empty(2 * NUM_KEYPOINTS)
        kp[0::2] = xs / meta.frame_width
        kp[1::2] = ys / meta.frame_height
        target.keypoints[i] = kp
        target.keypoint_conf[i] = qs
        target.pose_present[i] = True
    if report.pose_clamped:
        logger.warning("clamped keypoint confidences on %d pose rows", report.pose_clamped)
    return tracks


def write_poses(rows: Iterable[tuple[str, int, int, np.ndarray, np.ndarray]], path) -> None:
    """Write pose rows ``(video_id, track_id, frame, keypoints_px (17, 2), conf (17,))``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for video_id, track_id, frame, kp, q in rows:
            vals = []
            for j in range(NUM_KEYPOINTS):
                vals += [repr(float(kp[j, 0])), repr(float(kp[j, 1])), repr(float(q[j]))]
            w.writerow([video_id, track_id, frame, *vals])


def read_labels(path) -> dict[str, GroundTruth]:
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) not in (2, 3) or any(set(p) - {"0", "1"} for p in parts[1:]):
                raise TrackFormatError(path, line_no, "expected: video_id labels [hr_mask]")
            labels = np.frombuffer(parts[1].encode(), dtype=np.uint8) - ord("0")
            hr = None
            if len(parts) == 3:
                hr = np.frombuffer(parts[2].encode(), dtype=np.uint8) - ord("0")
                if len(hr) != len(labels):
                    raise TrackFormatError(path, line_no, "hr mask length differs from labels")
            out[parts[0]] = GroundTruth(parts[0], labels.astype(np.int64),
                                        None if hr is None else hr.astype(np.int64))
    return out


def write_labels(truths: Sequence[GroundTruth], path) -> None:
    with open(path, "w") as fh:
        for gt in sorted(truths, key=lambda g: g.video_id):
            fields = [gt.video_id, "".join(map(str, np.asarray(gt.labels, dtype=int)))]
            if gt.hr_mask is not None:
                fields.append("".join(map(str, np.asarray(gt.hr_mask, dtype=int))))
            fh.write(" ".join(fields) + "\n")


def write_scores(series: Sequence[FrameScoreSeries], path, header: dict | None = None) -> None:
    """Write frame scores sorted by (video_id, frame_index).

    ``header`` entries are emitted as ``# key=value`` comment lines; the
    branch columns appear only when any series carries them.
    """
    with_pose = any(s.gate is not None for s in series)
    cols = ["video_id", "frame_index", "score"]
    if with_pose:
        cols += ["traj_score", "pose_score", "gate"]
    buf = io.StringIO()
    for key in sorted(header or {}):
        buf.write(f"# {key}={header[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for s in sorted(series, key=lambda s: s.video_id):
        for i, score in enumerate(s.scores):
            row = [s.video_id, i, repr(float(score))]
            if with_pose:
                pose = s.pose[i] if s.pose is not None else float("nan")
                row += [repr(float(s.traj[i])), repr(float(pose)), repr(float(s.gate[i]))]
            w.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_scores(path) -> dict[str, np.ndarray]:
    per_video: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for line, row in _rows(path):
        try:
            per_video[row["video_id"]].append((int(row["frame_index"]), float(row["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TrackFormatError(path, line, f"malformed score row: {exc}") from None
    out = {}
    for vid, rows in per_video.items():
        rows.sort()
        out[vid] = np.array([r[1] for r in rows])
    return out


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a self-describing container: magic, version, JSON header, tensors, SHA-256.

    Tensors are stored as little-endian float64 in the order given; the
    header records each name, shape and byte offset.
    """
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)
    head = json.dumps({"config": header, "tensors": index}, sort_keys=True).encode()
    version = CHECKPOINT_VERSION.encode()
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", len(version)), version,
        struct.pack("<Q", len(head)), head,
        *blobs,
    ])
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointChecksumError(f"{path}: not a trajvad checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (vlen,) = struct.unpack_from("<I", raw, pos)
        version = raw[pos + 4:pos + 4 + vlen].decode()
    except (struct.error, UnicodeDecodeError):
        raise CheckpointChecksumError(f"{path}: truncated checkpoint") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version!r} is not supported "
            f"by reader version {CHECKPOINT_VERSION!r}")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < 32 or hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos += 4 + vlen
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    head = json.loads(raw[pos:pos + hlen])
    pos += hlen
    tensors = {}
    for entry in head["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return head["config"], tensors
