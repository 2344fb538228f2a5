import numpy as np
import pytest

from trajvad.flow import FlowStack
from trajvad.track_io import Track


def make_track(boxes, conf=None, class_id=0, start=0, video_id="v", track_id="0",
               keypoints=None, keypoint_conf=None, pose_present=None):
    boxes = np.asarray(boxes, dtype=np.float64)
    if conf is None:
        conf = np.full(len(boxes), 0.9)
    return Track(video_id=video_id, track_id=track_id, class_id=class_id, start_frame=start,
                 boxes=boxes, confidences=np.asarray(conf, dtype=np.float64),
                 source_track_id=int(str(track_id).split("_")[0]), keypoints=keypoints,
                 keypoint_conf=keypoint_conf, pose_present=pose_present)


def randomize(flow: FlowStack, rng, scale=0.3):
    """Perturb every parameter so that no coupling is the identity."""
    for p in flow.params().values():
        p += rng.normal(0.0, scale, size=p.shape)
    flow.actnorm.initialized = True
    return flow


def random_flow(width, K, cond_dim=0, hidden=8, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    flow = FlowStack(width=width, n_couplings=K, hidden=hidden, cond_dim=cond_dim, seed=seed)
    return randomize(flow, rng, scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from harness import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
