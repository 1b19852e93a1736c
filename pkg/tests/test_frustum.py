import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import naive_components
from wlst.config import LabelerConfig, SceneSpec
from wlst.frustum import (
    DegenerateFit,
    EmptyFrustum,
    FrameTag,
    NoForeground,
    apply_transform,
    autolabel,
    autolabel_detail,
    autolabel_frame,
    euclidean_clusters,
    extract_frustum,
    fit_box_bev,
    largest_cluster,
    lidar_to_camera_flu,
    rigid_inverse,
    segment_foreground,
    to_frustum_coord,
    to_mask_coord,
)
from wlst.geometry import iou_3d, points_in_box, project_to_image
from wlst.simulate import generate_scene, weak_box_for
from wlst.structures import Box2D, Box3D, PointCloud

CFG = LabelerConfig()


def scene_cloud(seed=0, frame=0, **kw):
    return generate_scene(SceneSpec(seed=seed, **kw), frame)


class TestExtractFrustum:
    def test_center_point_included(self, cam):
        p = np.array([[20.0, 0.0, 0.0]])
        u, v, _ = project_to_image(p, cam)[0]
        fp = extract_frustum(PointCloud(p), Box2D(u - 5, v - 5, u + 5, v + 5), cam)
        assert list(fp.indices) == [0]
        assert fp.frame_tag is FrameTag.CAMERA

    def test_behind_excluded(self, cam):
        pts = np.array([[20.0, 0.0, 0.0], [-20.0, 0.0, 0.0]])
        with pytest.raises(EmptyFrustum):
            extract_frustum(PointCloud(pts[1:]), Box2D(0, 0, 1242, 375), cam)
        assert list(extract_frustum(PointCloud(pts), Box2D(0, 0, 1242, 375), cam).indices) == [0]

    def test_matches_brute_force(self, cam):
        fr = scene_cloud(1)
        box = Box2D(400, 120, 800, 260)
        fp = extract_frustum(fr.cloud, box, cam)
        ref = []
        for i, p in enumerate(fr.cloud.points):
            u, v, d = project_to_image(p[None], cam)[0]
            if CFG.near <= d <= CFG.far and box.contains(u, v):
                ref.append(i)
        assert list(fp.indices) == ref

    def test_camera_points_roundtrip(self, cam):
        fr = scene_cloud(2)
        fp = extract_frustum(fr.cloud, Box2D(300, 100, 900, 300), cam)
        back = apply_transform(rigid_inverse(lidar_to_camera_flu(cam)), fp.points)
        assert np.allclose(back, fr.cloud.points[fp.indices], atol=1e-9)


class TestFrustumCoord:
    def test_optical_axis_is_identity(self, cam):
        cu, cv = cam.projection[0, 2], cam.projection[1, 2]
        fr = scene_cloud(0)
        fp = extract_frustum(fr.cloud, Box2D(cu - 200, cv - 100, cu + 200, cv + 100), cam)
        out = to_frustum_coord(fp)
        assert np.allclose(out.transform_log, np.eye(4), atol=1e-12)
        assert out.frame_tag is FrameTag.FRUSTUM

    def test_rigid_and_idempotent(self, cam):
        fr = scene_cloud(3)
        fp = extract_frustum(fr.cloud, Box2D(100, 100, 400, 300), cam)
        out = to_frustum_coord(fp)
        i, j = np.random.default_rng(0).integers(0, len(fp), (2, 50))
        d0 = np.linalg.norm(fp.points[i] - fp.points[j], axis=1)
        d1 = np.linalg.norm(out.points[i] - out.points[j], axis=1)
        assert np.allclose(d0, d1, atol=1e-9)
        again = to_frustum_coord(out)
        assert np.allclose(again.points, out.points, atol=1e-9)
        assert np.allclose(out.camera_points(), fp.points, atol=1e-9)

    def test_lateral_offset_reduced_random_frustums(self, cam):
        rng = np.random.default_rng(0)
        checked = 0
        for f in range(20):
            fr = scene_cloud(1, f)
            for _ in range(20):
                x0, y0 = rng.uniform(0, 1100), rng.uniform(0, 300)
                box = Box2D(x0, y0, min(x0 + rng.uniform(20, 400), 1242), min(y0 + rng.uniform(20, 200), 375))
                try:
                    fp = extract_frustum(fr.cloud, box, cam)
                except EmptyFrustum:
                    continue
                out = to_frustum_coord(fp)
                checked += 1
                assert abs(out.points[:, 1].mean()) <= abs(fp.points[:, 1].mean()) + 1e-9, box.as_tuple()
        assert checked > 100

    def test_lateral_offset_reduced_object_frustums(self, cam):
        checked = 0
        for f in range(20):
            fr = scene_cloud(1, f)
            for wb in fr.weak:
                fp = extract_frustum(fr.cloud, wb, cam)
                out = to_frustum_coord(fp)
                checked += 1
                assert abs(out.points[:, 1].mean()) <= abs(fp.points[:, 1].mean()) + 1e-9
        assert checked > 100


def plane_and_cluster(rng, n_plane=400, n_obj=50):
    plane = np.column_stack([rng.uniform(5, 25, n_plane), rng.uniform(-5, 5, n_plane), np.zeros(n_plane)])
    obj = rng.uniform([14, -1, 0.5], [16, 1, 1.5], (n_obj, 3))
    return np.vstack([plane, obj])


def fake_frustum(pts, cam):
    from wlst.frustum import Frustum, FrustumPoints

    fr = Frustum(Box2D(0, 0, 10, 10), cam)
    return FrustumPoints(pts, np.zeros(len(pts)), np.arange(len(pts)), FrameTag.FRUSTUM, np.eye(4), fr)


class TestSegmentForeground:
    def test_plane_plus_cluster(self, cam):
        rng = np.random.default_rng(0)
        pts = plane_and_cluster(rng)
        fg = segment_foreground(fake_frustum(pts, cam), CFG, seed=1)
        assert sorted(fg) == list(range(400, 450))

    def test_only_plane(self, cam):
        rng = np.random.default_rng(1)
        pts = plane_and_cluster(rng, n_obj=0)
        with pytest.raises(NoForeground):
            segment_foreground(fake_frustum(pts, cam), CFG, seed=1)

    def test_too_few_points(self, cam):
        with pytest.raises(NoForeground):
            segment_foreground(fake_frustum(np.zeros((3, 3)), cam), CFG)

    def test_clusters_match_flood_fill(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pts = np.vstack([rng.normal(c, 0.4, (40, 3)) for c in rng.uniform(-4, 4, (4, 3))])
            labels = euclidean_clusters(pts, 0.7)
            ours = {frozenset(np.flatnonzero(labels == k)) for k in np.unique(labels)}
            ref = {frozenset(c) for c in naive_components(pts, 0.7)}
            assert ours == ref
            big = max(len(c) for c in ref)
            assert len(largest_cluster(labels)) == big

    def test_largest_cluster_tie_goes_to_lowest_index(self):
        labels = np.array([1, 1, 0, 0, 2])
        assert list(largest_cluster(labels)) == [0, 1]


class TestMaskCoord:
    def test_single_point(self, cam):
        fp = fake_frustum(np.array([[3.0, 1.0, -2.0]]), cam)
        out = to_mask_coord(fp, [0])
        assert np.allclose(out.points, 0.0)
        assert out.frame_tag is FrameTag.MASK

    def test_centroid_and_roundtrip(self, cam):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-10, 10, (100, 3))
        fp = fake_frustum(pts, cam)
        idx = np.arange(10, 70)
        out = to_mask_coord(fp, idx)
        assert np.allclose(out.points.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(out.camera_points(), pts[idx], atol=1e-9)


def rect_outline(l, w, yaw, n=200, center=(0.0, 0.0)):
    t = np.linspace(0, 4, n, endpoint=False)
    pts = []
    for s in t:
        side, f = int(s), s - int(s)
        corners = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
        a, b = np.array(corners[side]), np.array(corners[(side + 1) % 4])
        pts.append(a + f * (b - a))
    pts = np.array(pts)
    c, s_ = math.cos(yaw), math.sin(yaw)
    xy = pts @ np.array([[c, s_], [-s_, c]]) + center
    z = np.tile([0.0, 1.5], n // 2)
    return np.column_stack([xy, z])


class TestFitBoxBev:
    def test_rectangle_outline(self):
        yaw = math.radians(30)
        box, score = fit_box_bev(rect_outline(4, 2, yaw), CFG)
        assert abs(math.remainder(box.yaw - yaw, math.pi)) <= math.radians(1) + 1e-12
        assert (box.l, box.w) == pytest.approx((4, 2), abs=1e-6)
        assert score == 1.0

    def test_square(self):
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), rng.uniform(0, 1, 300)])
        pts[:4, :2] = [[-1, -1], [1, -1], [1, 1], [-1, 1]]
        box, _ = fit_box_bev(pts, CFG)
        assert math.remainder(box.yaw, math.pi / 2) == pytest.approx(0, abs=1e-12)

    def test_area_below_axis_aligned(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pts = rng.normal(0, 1, (40, 3)) * [rng.uniform(0.5, 3), rng.uniform(0.5, 3), 0.5]
            box, _ = fit_box_bev(pts, CFG)
            aabb = np.ptp(pts[:, 0]) * np.ptp(pts[:, 1])
            assert box.l * box.w <= aabb + 1e-9 or min(box.l, box.w) == CFG.min_dim

    def test_degenerate(self):
        with pytest.raises(DegenerateFit):
            fit_box_bev(np.zeros((20, 3)), CFG)
        with pytest.raises(DegenerateFit):
            fit_box_bev(np.zeros((3, 3)), CFG)

    def test_min_dim_clamp(self):
        pts = np.column_stack([np.linspace(0, 3, 30), np.zeros(30), np.zeros(30)])
        box, _ = fit_box_bev(pts, CFG)
        assert box.w == CFG.min_dim and box.h == CFG.min_dim

    def test_faces_away_from_sensor(self):
        box, _ = fit_box_bev(rect_outline(4, 2, 0.0, center=(-10, 0)), CFG, sensor_xy=(0.0, 0.0))
        assert math.cos(box.yaw) * (box.x - 0.0) > 0


def ideal_car(cam, yaw=0.4, x=15.0, y=1.0):
    gt = Box3D(x, y, -1.73 + 0.78, 3.9, 1.6, 1.56, yaw)
    rng = np.random.default_rng(0)
    # Dense surface sampling on all faces.
    local = []
    for axis in range(3):
        for sgn in (-1, 1):
            p = rng.uniform(-0.5, 0.5, (600, 3))
            p[:, axis] = 0.5 * sgn
            local.append(p)
    local = np.vstack(local) * [gt.l, gt.w, gt.h]
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    obj = local @ R.T + gt.center
    g = np.column_stack([rng.uniform(3, 40, 4000), rng.uniform(-15, 15, 4000), np.full(4000, -1.73)])
    g = np.delete(g, points_in_box(g, replace(gt, z=gt.z - 0.5, h=gt.h + 1)), axis=0)
    return gt, PointCloud(np.vstack([obj, g]))


class TestAutolabel:
    @pytest.mark.parametrize("yaw", [0.0, 0.4, -1.2, 2.5])
    def test_ideal_car(self, cam, yaw):
        gt, cloud = ideal_car(cam, yaw)
        wb = weak_box_for(gt, cam)
        lab = autolabel(cloud, wb, cam, CFG, seed=0)
        assert iou_3d(lab.box, gt) >= 0.7
        assert 0 < lab.score <= 1

    def test_empty_frustum(self, cam):
        with pytest.raises(EmptyFrustum):
            autolabel(PointCloud(np.zeros((0, 3))), Box2D(0, 0, 100, 100), cam)

    def test_center_reprojects_into_box(self, cam):
        for f in range(5):
            fr = scene_cloud(5, f)
            for i, wb in enumerate(fr.weak):
                try:
                    res = autolabel_detail(fr.cloud, wb, cam, CFG, seed=[5, f, i])
                except (EmptyFrustum, NoForeground, DegenerateFit):
                    continue
                u, v, d = project_to_image(res.label.box.center[None], cam)[0]
                assert d > 0 and wb.expanded(0.1).contains(u, v)

    def test_frame_skips_and_weak_index(self, cam):
        fr = scene_cloud(6, 0)
        weak = list(fr.weak) + [Box2D(0, 0, 3, 3)]
        labels, skips = autolabel_frame(fr.cloud, weak, cam, CFG, 6, 0)
        assert sum(skips.values()) >= 1
        assert all(lab.weak_index is not None and lab.weak_index < len(weak) for lab in labels)
        again, _ = autolabel_frame(fr.cloud, weak, cam, CFG, 6, 0)
        assert labels == again
