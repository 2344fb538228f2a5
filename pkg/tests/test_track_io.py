import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajvad import track_io
from trajvad.track_io import (CheckpointChecksumError, CheckpointVersionError, FrameScoreSeries,
                              GroundTruth, IngestReport, RawDetection, TrackFormatError,
                              VideoMeta)


def write_scene(tmp_path, dets, metas):
    track_io.write_detections(dets, tmp_path / "tracks.csv")
    track_io.write_meta(metas, tmp_path / "meta.csv")
    return tmp_path / "tracks.csv", tmp_path / "meta.csv"


def det(frame, box, tid=1, cls=0, conf=0.9, vid="v"):
    return RawDetection(vid, frame, tid, cls, box, conf)


def test_normalize_box_example():
    meta = VideoMeta("v", 1920, 1080, 10)
    out = track_io.normalize_box((960, 540, 100, 200), meta)
    np.testing.assert_allclose(out, [0.5, 0.5, 100 / 1920, 200 / 1080], rtol=0, atol=1e-15)
    assert abs(out[2] - 0.052083333) < 1e-8 and abs(out[3] - 0.185185185) < 1e-8


@given(st.floats(1, 4000), st.floats(1, 4000), st.floats(1, 500), st.floats(1, 500),
       st.integers(16, 4096), st.integers(16, 4096))
def test_normalization_round_trip(cx, cy, w, h, fw, fh):
    meta = VideoMeta("v", fw, fh, 1)
    box = np.array([cx, cy, w, h])
    back = track_io.denormalize_box(track_io.normalize_box(box, meta), meta)
    np.testing.assert_allclose(back, box, rtol=1e-9)


def test_gap_interpolation(tmp_path):
    dets = [det(3, (100, 100, 10, 10)), det(4, (110, 100, 10, 10)),
            det(6, (130, 120, 20, 10), conf=0.5)]
    paths = write_scene(tmp_path, dets, [VideoMeta("v", 1000, 1000, 10)])
    report = IngestReport()
    tracks = track_io.parse_tracks(*paths, gap_tolerance=2, report=report)
    assert len(tracks) == 1
    tr = tracks[0]
    assert (tr.start_frame, tr.end_frame) == (3, 6)
    np.testing.assert_allclose(tr.boxes[2], [0.120, 0.110, 0.015, 0.010])
    assert tr.confidences[2] == pytest.approx(0.7)
    assert report.interpolated_frames == 1


def test_gap_beyond_tolerance_splits(tmp_path):
    dets = [det(f, (100, 100, 10, 10)) for f in (0, 1, 2, 20, 21)]
    paths = write_scene(tmp_path, dets, [VideoMeta("v", 1000, 1000, 30)])
    report = IngestReport()
    tracks = track_io.parse_tracks(*paths, report=report)
    assert [t.track_id for t in tracks] == ["1_0", "1_1"]
    assert [len(t) for t in tracks] == [3, 2]
    assert report.splits == 1


def test_modal_class_vote(tmp_path):
    dets = [det(f, (100, 100, 10, 10), cls=1 if f == 4 else 0) for f in range(10)]
    paths = write_scene(tmp_path, dets, [VideoMeta("v", 1000, 1000, 10)])
    assert track_io.parse_tracks(*paths)[0].class_id == 0


def test_rejects_non_positive_boxes_and_unknown_video(tmp_path):
    dets = [det(0, (100, 100, 0, 10)), det(1, (100, 100, 10, 10))]
    paths = write_scene(tmp_path, dets, [VideoMeta("v", 1000, 1000, 10)])
    report = IngestReport()
    tracks = track_io.parse_tracks(*paths, report=report)
    assert report.rejected == 1 and len(tracks[0]) == 1
    paths = write_scene(tmp_path, [det(0, (1, 1, 1, 1), vid="other")],
                        [VideoMeta("v", 1000, 1000, 10)])
    with pytest.raises(KeyError, match="other"):
        track_io.parse_tracks(*paths)


def test_malformed_row_names_line(tmp_path):
    (tmp_path / "meta.csv").write_text("video_id,frame_width,frame_height,frame_count,fps\n"
                                       "v,100,100,5,30\n")
    (tmp_path / "tracks.csv").write_text(
        ",".join(track_io.TRACK_COLUMNS) + "\nv,0,1,0,1,1,1,1,0.9\nv,zero,1,0,1,1,1,1,0.9\n")
    with pytest.raises(TrackFormatError, match=":3:"):
        track_io.parse_tracks(tmp_path / "tracks.csv", tmp_path / "meta.csv")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 60)), min_size=1, max_size=80))
def test_ingest_never_overlaps(tmp_path_factory, pairs):
    tmp = tmp_path_factory.mktemp("ingest")
    dets = [det(f, (50 + f, 50, 10, 10), tid=t) for t, f in pairs]
    paths = write_scene(tmp, dets, [VideoMeta("v", 1000, 1000, 61)])
    tracks = track_io.parse_tracks(*paths)
    by_src = {}
    for tr in tracks:
        assert len(tr) >= 1
        by_src.setdefault(tr.source_track_id, []).append(tr.frame_range)
    for ranges in by_src.values():
        frames = [f for r in ranges for f in r]
        assert len(frames) == len(set(frames))


def _pose_file(tmp_path, rows):
    track_io.write_poses(rows, tmp_path / "poses.csv")
    return tmp_path / "poses.csv"


def test_parse_pose_alignment(tmp_path):
    dets = [det(f, (100, 100, 10, 20)) for f in range(5)] + [det(0, (300, 300, 10, 20), tid=2)]
    metas = [VideoMeta("v", 1000, 500, 10)]
    paths = write_scene(tmp_path, dets, metas)
    tracks = track_io.parse_tracks(*paths)
    kp = np.full((17, 2), 100.0)
    rows = [("v", 1, 2, kp, np.ones(17)), ("v", 1, 9, kp, np.ones(17))]
    report = IngestReport()
    track_io.parse_pose(_pose_file(tmp_path, rows), tracks, track_io.read_meta(paths[1]), report)
    t1, t2 = tracks
    assert report.pose_dropped == 1
    assert t1.pose_present.tolist() == [False, False, True, False, False]
    np.testing.assert_allclose(t1.keypoints[2, 0::2], 0.1)
    np.testing.assert_allclose(t1.keypoints[2, 1::2], 0.2)
    assert t1.keypoint_conf[2].mean() == 1.0
    assert not t2.has_pose


def test_labels_round_trip(tmp_path):
    truths = [GroundTruth("b", np.array([0, 1, 1]), np.array([1, 0, 1])),
              GroundTruth("a", np.array([1, 0, 0]))]
    track_io.write_labels(truths, tmp_path / "l.txt")
    back = track_io.read_labels(tmp_path / "l.txt")
    assert back["b"].labels.tolist() == [0, 1, 1] and back["b"].hr_mask.tolist() == [1, 0, 1]
    assert back["a"].hr_mask is None


def test_write_scores_examples(tmp_path):
    track_io.write_scores([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "video_id,frame_index,score\n"
    s = [FrameScoreSeries("b", np.array([3.0, 4.0]), np.ones(2, bool)),
         FrameScoreSeries("a", np.array([1.0, 2.0, 0.5]), np.ones(3, bool))]
    track_io.write_scores(s, tmp_path / "s1.csv", {"smooth_sigma": 2.0})
    track_io.write_scores(s, tmp_path / "s2.csv", {"smooth_sigma": 2.0})
    text = (tmp_path / "s1.csv").read_text()
    assert text == (tmp_path / "s2.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "# smooth_sigma=2.0"
    assert [ln.split(",")[:2] for ln in lines[2:]] == [
        ["a", "0"], ["a", "1"], ["a", "2"], ["b", "0"], ["b", "1"]]
    back = track_io.read_scores(tmp_path / "s1.csv")
    assert back["a"].tolist() == [1.0, 2.0, 0.5]


def test_checkpoint_round_trip_and_errors(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "c": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    track_io.save_checkpoint(path, {"k": 1}, tensors)
    header, back = track_io.load_checkpoint(path)
    assert header == {"k": 1}
    for k, v in tensors.items():
        assert back[k].shape == np.shape(v) and np.array_equal(back[k], v)

    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointChecksumError):
        track_io.load_checkpoint(path)
    # version "2" (same length) must be refused before any checksum test
    bad = bytearray(raw)
    i = len(track_io.CHECKPOINT_MAGIC) + 4
    assert bad[i:i + 1] == b"1"
    bad[i:i + 1] = b"2"
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointVersionError, match="'2'"):
        track_io.load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[-40] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointChecksumError):
        track_io.load_checkpoint(path)
