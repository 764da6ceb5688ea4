import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bipedplan.scene import (
    Box,
    CameraModel,
    DepthFrame,
    Disk,
    Sample,
    Scene2D,
    SceneError,
    load_dataset,
    load_sample,
    load_scene,
    project,
    read_pgm16,
    render_depth,
    save_sample,
    save_scene,
)

BIG = (-50.0, -50.0, 50.0, 50.0)


def _cam(pitch=0.0, **kw):
    return CameraModel.with_fov(9, 5, pitch=pitch, **kw)


def test_center_ray_empty_scene_is_sentinel():
    cam = _cam()
    frame = render_depth(Scene2D(bounds=BIG), (0, 0, 0), cam)
    assert frame.values[2, 4] == cam.max_range
    assert frame.sentinel[2, 4]


def test_wall_two_meters_ahead():
    scene = Scene2D((Box((2.0, -20.0), (3.0, 20.0), 2.0),), BIG)
    frame = render_depth(scene, (0, 0, 0), _cam())
    assert frame.values[2, 4] == pytest.approx(2.0, abs=1e-12)


def test_wall_at_rotated_pose():
    scene = Scene2D((Box((-20.0, 3.0), (20.0, 4.0), 2.0),), BIG)
    frame = render_depth(scene, (1.0, 1.0, math.pi / 2), _cam())
    assert frame.values[2, 4] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("pitch", [0.2, 0.35, 0.6])
def test_ground_hits_match_closed_form(pitch):
    cam = CameraModel(pitch=pitch, max_range=50.0)
    frame = render_depth(Scene2D(bounds=(-100, -100, 100, 100)), (0, 0, 0), cam)
    rays = cam.body_rays()
    below = rays[..., 2] < -1e-3
    angle = np.arcsin(-rays[..., 2][below])
    expected = cam.mount_height / np.sin(angle)
    keep = expected < cam.max_range
    np.testing.assert_allclose(frame.values[below][keep], expected[keep], rtol=1e-12)
    # principal ray: h / sin(pitch)
    center = CameraModel.with_fov(9, 5, pitch=pitch, max_range=50.0)
    c = render_depth(Scene2D(bounds=(-100, -100, 100, 100)), (0, 0, 0), center).values[2, 4]
    assert c == pytest.approx(cam.mount_height / math.sin(pitch), rel=1e-12)


def test_disk_front_face():
    scene = Scene2D((Disk((3.0, 0.0), 0.5, 1.0),), BIG)
    assert render_depth(scene, (0, 0, 0), _cam()).values[2, 4] == pytest.approx(2.5, abs=1e-12)


def test_project_principal_ray():
    cam = _cam()
    values = np.full((5, 9), cam.max_range)
    values[2, 4] = 2.0
    pts = project(DepthFrame(cam, values), (0, 0, 0))
    np.testing.assert_allclose(pts, [[2.0, 0.0, cam.mount_height]], atol=1e-12)


def test_project_all_sentinel_is_empty():
    cam = _cam()
    assert project(DepthFrame(cam, np.full((5, 9), cam.max_range)), (0, 0, 0)).shape == (0, 3)


def test_projection_round_trip():
    rng = np.random.default_rng(0)
    cam = CameraModel()
    for _ in range(5):
        pose = rng.uniform(-2, 2, size=3)
        values = rng.uniform(0.2, cam.max_range, size=(cam.height, cam.width))
        values[rng.random(values.shape) < 0.2] = cam.max_range
        frame = DepthFrame(cam, values)
        pts = project(frame, pose)
        origin = np.array([pose[0], pose[1], cam.mount_height])
        ranges = np.linalg.norm(pts - origin, axis=1)
        np.testing.assert_allclose(ranges, values[~frame.sentinel], atol=1e-9, rtol=0)


def test_projected_points_lie_on_rendered_surfaces():
    scene = Scene2D((Disk((2.0, 0.3), 0.4, 0.8), Box((3.0, -1.5), (3.5, -0.5), 0.5)), (-1, -3, 5, 3))
    frame = render_depth(scene, (0.1, -0.2, 0.1))
    pts = project(frame, (0.1, -0.2, 0.1))
    on_floor = np.abs(pts[:, 2]) < 1e-9
    clear = scene.clearance(pts[~on_floor, :2])
    # every non-floor return lies on an obstacle surface or a bounds wall
    assert np.all(clear < 1e-6)
    assert np.any(np.abs(clear) < 1e-6)


def test_pgm_quantization(tmp_path):
    cam = _cam()
    values = np.full((5, 9), cam.max_range)
    values[0, 0] = 4.0
    s = Sample(DepthFrame(cam, values), (1.0, 0.5), (0, 0, 0))
    save_sample(tmp_path / "a", s)
    assert read_pgm16(tmp_path / "a.pgm")[0, 0] == 4000


def test_sample_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    cam = CameraModel()
    values = rng.uniform(0.1, cam.max_range, size=(cam.height, cam.width))
    values[:3] = cam.max_range
    s = Sample(DepthFrame(cam, values), rng.normal(size=2), rng.normal(size=3), 1, "corridor", {"k": 1})
    save_sample(tmp_path / "s", s)
    back = load_sample(tmp_path / "s")
    assert np.max(np.abs(back.depth.values - values)) <= 0.0005 + 1e-12
    assert np.all(back.depth.sentinel[:3])
    np.testing.assert_array_equal(back.goal, s.goal)
    assert back.stance_parity == 1 and back.scene == "corridor" and back.meta == {"k": 1}
    assert len(load_dataset(tmp_path)) == 1


def test_missing_sidecar(tmp_path):
    cam = _cam()
    save_sample(tmp_path / "s", Sample(DepthFrame(cam, np.ones((5, 9))), (0, 0), (0, 0, 0)))
    (tmp_path / "s.json").unlink()
    with pytest.raises(SceneError, match="missing metadata"):
        load_sample(tmp_path / "s")


def test_invalid_inputs_rejected():
    with pytest.raises(SceneError):
        Disk((0, 0), -1.0, 1.0)
    with pytest.raises(SceneError):
        DepthFrame(_cam(), np.zeros((5, 9)))
    with pytest.raises(SceneError):
        render_depth(Scene2D(bounds=(-1, -1, 1, 1)), (5, 0, 0))
    with pytest.raises(SceneError):
        Sample(DepthFrame(_cam(), np.ones((5, 9))), (0, 0), (0, 0, 0), stance_parity=2)


def test_scene_json_round_trip(tmp_path):
    scene = Scene2D((Disk((1.0, 2.0), 0.3, 0.5), Box((0, 0), (1, 1), 0.4)), (-2, -2, 3, 3), "x")
    save_scene(tmp_path / "s.json", scene, start=(0, 0, 0))
    back, record = load_scene(tmp_path / "s.json")
    assert back == scene and record["start"] == [0, 0, 0]


def test_rendering_is_deterministic():
    scene = Scene2D((Disk((2.0, 0.0), 0.3, 0.5),), (-1, -3, 5, 3))
    a = render_depth(scene, (0, 0, 0), noise_sigma=0.01, rng=np.random.default_rng(5))
    b = render_depth(scene, (0, 0, 0), noise_sigma=0.01, rng=np.random.default_rng(5))
    assert a.values.tobytes() == b.values.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_translation_equivariance(dx, dy):
    scene = Scene2D((Disk((2.0, 0.3), 0.4, 0.8), Box((1.0, -1.5), (1.5, -0.5), 0.5)), (-1, -3, 5, 3))
    pose = np.array([0.2, 0.1, 0.15])
    a = render_depth(scene, pose).values
    b = render_depth(scene.shifted(dx, dy), pose + [dx, dy, 0]).values
    np.testing.assert_allclose(a, b, atol=1e-9)
