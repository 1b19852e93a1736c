"""Property tests for the stated invariants of geometry, frustum labeling,
fusion and evaluation. Every property runs on at least 1000 generated cases."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, Phase, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import angle, boxes, labels
from gap_table import CELLS
from wlst.codec import decode_box, encode_box
from wlst.config import FusionConfig, LabelerConfig, SceneSpec
from wlst.evaluation import TP, ap40, closed_gap, match_detections, precision_recall
from wlst.frustum import (
    DegenerateFit,
    EmptyFrustum,
    FrameTag,
    Frustum,
    FrustumPoints,
    NoForeground,
    autolabel,
    fit_box_bev,
    rigid_inverse,
    rot_z,
    to_frustum_coord,
    to_mask_coord,
    translation,
)
from wlst.fusion import canonical_order, consistency_fusion, fuse_with_stats, score_filter
from wlst.geometry import (
    box_from_corners,
    corners_3d,
    iou_3d,
    iou_bev,
    nms_3d,
    points_in_box,
    polygon_rect_iou,
    project_to_image,
    rect_vertices,
    transform_box,
)
from wlst.simulate import default_camera, generate_scene
from wlst.structures import Box2D, Box3D, CameraModel, PseudoLabel, PseudoLabelSet, Source

PROPS = settings(max_examples=1000, deadline=None, derandomize=True, suppress_health_check=list(HealthCheck))
# Counterexamples are reported unshrunk where shrinking is slow and adds nothing.
PROPS_NO_SHRINK = settings(PROPS, phases=[Phase.explicit, Phase.reuse, Phase.generate])
CAM = default_camera()
IOUS = {"bev": iou_bev, "3d": iou_3d}


def rigid(theta: float, t) -> np.ndarray:
    return translation(t) @ rot_z(theta)


coord = st.floats(-30, 30, allow_nan=False, allow_infinity=False)
shift = st.tuples(coord, coord, st.floats(-3, 3))


@st.composite
def rects(draw, lo=0.0, hi=1200.0):
    x0 = draw(st.floats(lo, hi - 20))
    y0 = draw(st.floats(lo, hi - 20))
    return Box2D(x0, y0, draw(st.floats(x0 + 1, hi)), draw(st.floats(y0 + 1, hi)))


@st.composite
def convex_polys(draw):
    # Vertices on a random ellipse are always convex and CCW.
    cx, cy = draw(st.floats(100, 1000)), draw(st.floats(50, 300))
    rx, ry = draw(st.floats(5, 300)), draw(st.floats(5, 200))
    n = draw(st.integers(3, 8))
    ts = sorted(set(draw(st.lists(st.floats(0, 2 * math.pi, exclude_max=True), min_size=n, max_size=n))))
    assume(len(ts) >= 3)
    poly = [(cx + rx * math.cos(t), cy + ry * math.sin(t)) for t in ts]
    area = 0.5 * sum(a[0] * b[1] - b[0] * a[1] for a, b in zip(poly, poly[1:] + poly[:1]))
    assume(area > 1.0)
    return poly


# -- core geometry ------------------------------------------------------------


class TestIouProperties:
    @pytest.mark.parametrize("kind", ["bev", "3d"])
    @PROPS
    @given(a=boxes(), b=boxes())
    def test_symmetric_bounded(self, kind, a, b):
        fn = IOUS[kind]
        ab, ba = fn(a, b), fn(b, a)
        assert 0.0 <= ab <= 1.0
        assert abs(ab - ba) <= 1e-12

    @pytest.mark.parametrize("kind", ["bev", "3d"])
    @PROPS
    @given(a=boxes(), field=st.sampled_from(["x", "y", "z", "l", "w", "h", "yaw"]), delta=st.floats(1e-4, 0.5), sign=st.sampled_from([-1, 1]))
    def test_one_iff_identical(self, kind, a, field, delta, sign):
        fn = IOUS[kind]
        assert fn(a, a) >= 1.0 - 1e-9
        if kind == "bev" and field in ("z", "h"):
            return  # a footprint does not see height changes
        value = getattr(a, field) + sign * delta
        assume(field not in ("l", "w", "h") or value > 0.05)
        if field == "yaw":
            # A square footprint rotated by a quarter turn is the same shape.
            assume(abs(a.l - a.w) > 1e-3 or delta < 0.4)
        b = replace(a, **{field: value})
        assert fn(a, b) < 1.0 - 1e-9

    @pytest.mark.parametrize("kind", ["bev", "3d"])
    @PROPS
    @given(a=boxes(), b=boxes(), theta=angle, t=shift)
    def test_rigid_invariance(self, kind, a, b, theta, t):
        fn = IOUS[kind]
        T = rigid(theta, t)
        assert abs(fn(transform_box(a, T), transform_box(b, T)) - fn(a, b)) <= 1e-9

    @PROPS
    @given(poly=convex_polys(), rect=rects())
    def test_polygon_rect_bounded(self, poly, rect):
        v = polygon_rect_iou(poly, rect)
        assert 0.0 <= v <= 1.0

    @PROPS
    @given(r1=rects(), r2=rects())
    def test_polygon_rect_symmetric(self, r1, r2):
        assert abs(polygon_rect_iou(rect_vertices(r1), r2) - polygon_rect_iou(rect_vertices(r2), r1)) <= 1e-12

    @PROPS
    @given(r=rects(), dx=st.floats(1e-3, 50), edge=st.integers(0, 3))
    def test_polygon_rect_one_iff_identical(self, r, dx, edge):
        assert polygon_rect_iou(rect_vertices(r), r) >= 1.0 - 1e-9
        x0, y0, x1, y1 = r.as_tuple()
        moved = [Box2D(x0 - dx, y0, x1, y1), Box2D(x0, y0 - dx, x1, y1), Box2D(x0, y0, x1 + dx, y1), Box2D(x0, y0, x1, y1 + dx)][edge]
        assert polygon_rect_iou(rect_vertices(r), moved) < 1.0 - 1e-9

    @PROPS
    @given(poly=convex_polys(), rect=rects(), tx=st.floats(-500, 500), ty=st.floats(-500, 500), quarter=st.integers(0, 3))
    def test_polygon_rect_rigid(self, poly, rect, tx, ty, quarter):
        # Rectangles stay axis-aligned only under translations and quarter turns.
        def move(p):
            x, y = p
            for _ in range(quarter):
                x, y = -y, x
            return (x + tx, y + ty)

        corners = [move(p) for p in rect_vertices(rect)]
        xs, ys = [c[0] for c in corners], [c[1] for c in corners]
        moved = Box2D(min(xs), min(ys), max(xs), max(ys))
        assert abs(polygon_rect_iou([move(p) for p in poly], moved) - polygon_rect_iou(poly, rect)) <= 1e-9


class TestGeometryProperties:
    @PROPS
    @given(b=boxes(spread=60))
    def test_corners_roundtrip(self, b):
        r = box_from_corners(corners_3d(b))
        assert np.allclose(r.as_array()[:6], b.as_array()[:6], atol=1e-9, rtol=0)
        assert abs(math.remainder(r.yaw - b.yaw, 2 * math.pi)) <= 1e-9

    @pytest.mark.parametrize("kind", ["bev", "3d"])
    @PROPS
    @given(labs=st.lists(labels(spread=4.0), max_size=12), thr=st.floats(0.05, 0.95))
    def test_nms_subset_and_separated(self, kind, labs, thr):
        kept = nms_3d(labs, thr, kind)
        assert all(any(k is lab for lab in labs) for k in kept)
        assert len({id(k) for k in kept}) == len(kept)
        fn = IOUS[kind]
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert fn(a.box, b.box) <= thr

    @PROPS
    @given(
        pts=hnp.arrays(float, (6, 3), elements=st.floats(-40, 40)),
        t=st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(-10, 10)),
        theta=angle,
    )
    def test_projection_equivariance(self, pts, t, theta):
        cam = CameraModel(CAM.lidar_to_cam @ rot_z(theta), CAM.projection, CAM.image_size)
        uvd = project_to_image(pts, cam)
        assume(np.all(uvd[:, 2] >= 1.0))
        moved = CameraModel(cam.lidar_to_cam @ translation(-np.array(t)), cam.projection, cam.image_size)
        again = project_to_image(pts + np.array(t), moved)
        assert np.allclose(again, uvd, atol=1e-9, rtol=1e-12)


# -- frustum labeler ----------------------------------------------------------


@st.composite
def frustum_points(draw):
    pts = draw(hnp.arrays(float, st.tuples(st.integers(2, 30), st.just(3)), elements=st.floats(-60, 60)))
    box2d = draw(rects(0, 375))
    fp = FrustumPoints(pts, np.zeros(len(pts)), np.arange(len(pts)), FrameTag.CAMERA, np.eye(4), Frustum(box2d, CAM))
    return fp


def pairwise(p: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)


class TestFrustumProperties:
    @PROPS
    @given(fp=frustum_points(), data=st.data())
    def test_transforms_rigid(self, fp, data):
        f1 = to_frustum_coord(fp)
        fg = data.draw(st.lists(st.integers(0, len(fp) - 1), min_size=1, unique=True))
        f2 = to_mask_coord(f1, np.array(sorted(fg)))
        assert np.allclose(pairwise(f1.points), pairwise(fp.points), atol=1e-9, rtol=0)
        assert np.allclose(pairwise(f2.points), pairwise(fp.points[sorted(fg)]), atol=1e-9, rtol=0)
        for f in (f1, f2):
            T = f.transform_log
            assert np.allclose(T @ rigid_inverse(T), np.eye(4), atol=1e-12)
            assert np.allclose(rigid_inverse(T) @ T, np.eye(4), atol=1e-12)
        assert np.allclose(f2.camera_points(), fp.points[sorted(fg)], atol=1e-9, rtol=0)

    @PROPS
    @given(seed=st.integers(0, 2**31), pick=st.integers(0, 10), grow=st.floats(-0.2, 0.4), du=st.floats(-15, 15))
    def test_autolabel_center_in_frustum(self, seed, pick, grow, du):
        frame = generate_scene(SceneSpec(seed=seed, num_objects=3, ground_points=4000), 0)
        assume(frame.weak)
        w = frame.weak[pick % len(frame.weak)].expanded(grow)
        w = Box2D(w.x_min + du, w.y_min, w.x_max + du, w.y_max)
        try:
            lab = autolabel(frame.cloud, w, frame.cam, LabelerConfig(), seed)
        except (EmptyFrustum, NoForeground, DegenerateFit):
            return
        u, v, d = project_to_image(lab.box.center, frame.cam)[0]
        assert d > 0 and w.expanded(0.1).contains(u, v)

    @PROPS
    @given(b=boxes(spread=80))
    def test_codec_bijection(self, b):
        r = decode_box(encode_box(b))
        assert np.allclose(r.as_array()[:6], b.as_array()[:6], atol=1e-9, rtol=0)
        assert abs(math.remainder(r.yaw - b.yaw, 2 * math.pi)) <= 1e-9

    @PROPS
    @given(pts=hnp.arrays(float, st.tuples(st.integers(8, 200), st.just(3)), elements=st.floats(-5, 5)))
    def test_fit_contains_points(self, pts):
        try:
            box, frac = fit_box_bev(pts)
        except DegenerateFit:
            return
        assert frac >= 0.95
        assert len(points_in_box(pts, box)) / len(pts) == frac


# -- fusion -------------------------------------------------------------------

det_sets = st.lists(labels(Source.DETECTOR), max_size=10)
aut_sets = st.lists(labels(Source.AUTOLABELER), max_size=10)


def pset(labs):
    return PseudoLabelSet("000000", tuple(labs))


class TestFusionProperties:
    @PROPS
    @given(det=det_sets, aut=aut_sets)
    def test_cardinality_and_provenance(self, det, aut):
        out, stats = fuse_with_stats(pset(det), pset(aut))
        assert len(out) <= len(det) + len(aut) - stats.matched
        pool = [(lab.box, lab.source) for lab in det + aut]
        for lab in out:
            if lab.source is Source.FUSED:
                src = next(i for i, (b, _) in enumerate(pool) if b == lab.box)
            else:
                src = pool.index((lab.box, lab.source))
            pool.pop(src)

    @PROPS
    @given(det=det_sets, aut=aut_sets)
    def test_score_direction(self, det, aut):
        for lab in consistency_fusion(pset(det), pset(aut)):
            same = [x for x in det + aut if x.box == lab.box]
            if lab.source is Source.FUSED:
                assert any(x.score == lab.score for x in same)
            else:
                assert any(x.score * x.prob == lab.score and lab.score <= x.score for x in same if x.source is lab.source)

    @PROPS
    @given(det=det_sets, aut=aut_sets, t=st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99)))
    def test_raising_T_monotone(self, det, aut, t):
        lo, hi = sorted(t)
        a = consistency_fusion(pset(det), pset(aut), FusionConfig(T=lo))
        b = consistency_fusion(pset(det), pset(aut), FusionConfig(T=hi))
        assert len(b) <= len(a)

    @PROPS_NO_SHRINK
    @given(det=det_sets, aut=aut_sets, t=st.tuples(st.floats(0.01, 0.99), st.floats(0.01, 0.99)))
    def test_raising_T_exist_monotone(self, det, aut, t):
        lo, hi = sorted(t)
        a = consistency_fusion(pset(det), pset(aut), FusionConfig(T_exist=lo))
        b = consistency_fusion(pset(det), pset(aut), FusionConfig(T_exist=hi))
        assert len(b) <= len(a)

    @PROPS
    @given(det=det_sets, T=st.floats(0.01, 0.99))
    def test_degenerate_equivalence(self, det, T):
        det = [replace(lab, prob=1.0) for lab in det]
        cfg = FusionConfig(T=T)
        out = consistency_fusion(pset(det), pset([]), cfg)
        assert list(out.labels) == canonical_order(score_filter(pset(det), T).labels)

    @PROPS
    @given(det=det_sets, aut=aut_sets, data=st.data())
    def test_permutation_invariant(self, det, aut, data):
        a = consistency_fusion(pset(det), pset(aut))
        det2 = data.draw(st.permutations(det))
        aut2 = data.draw(st.permutations(aut))
        assert consistency_fusion(pset(det2), pset(aut2)) == a


# -- evaluation ---------------------------------------------------------------

grid_score = st.integers(0, 1000).map(lambda k: k / 1000)


@st.composite
def eval_instance(draw):
    n_frames = draw(st.integers(1, 3))
    gts, preds = [], []
    for _ in range(n_frames):
        g = draw(st.lists(boxes(spread=6.0), max_size=5))
        p = []
        for box in draw(st.lists(boxes(spread=6.0), max_size=5)):
            p.append(PseudoLabel(box, draw(grid_score)))
        # Near-copies of GT give real true positives.
        for box in g:
            if draw(st.booleans()):
                p.append(PseudoLabel(replace(box, x=box.x + draw(st.floats(-0.2, 0.2))), draw(grid_score)))
        gts.append(g)
        preds.append(p)
    return preds, gts


MONOTONE = {
    "cube": lambda s: s**3,
    "sqrt": math.sqrt,
    "affine": lambda s: 0.25 + 0.5 * s,
    "exp": lambda s: math.expm1(s) / math.expm1(1.0),
}


class TestEvaluationProperties:
    @pytest.mark.parametrize("name", sorted(MONOTONE))
    @PROPS
    @given(inst=eval_instance())
    def test_ap_monotone_score_transform(self, name, inst):
        # Scores sit on a 1e-3 grid so no transform merges two distinct scores.
        f = MONOTONE[name]
        preds, gts = inst
        moved = [[replace(p, score=f(p.score)) for p in ps] for ps in preds]
        assert ap40(moved, gts, iou_3d, 0.7) == ap40(preds, gts, iou_3d, 0.7)
        assert ap40(moved, gts, iou_bev, 0.5) == ap40(preds, gts, iou_bev, 0.5)

    @PROPS
    @given(inst=eval_instance())
    def test_low_fp_never_helps(self, inst):
        preds, gts = inst
        before = ap40(preds, gts, iou_3d, 0.7)
        low = min([p.score for ps in preds for p in ps], default=0.5) / 2
        fp = PseudoLabel(Box3D(500, 500, 0, 4, 2, 1.5, 0), low)
        after = ap40([preds[0] + [fp]] + preds[1:], gts, iou_3d, 0.7)
        assert after <= before + 1e-12

    @PROPS
    @given(inst=eval_instance(), data=st.data())
    def test_removing_tp_never_raises_recall(self, inst, data):
        preds, gts = inst
        assigns = [match_detections(p, g, iou_3d, 0.7) for p, g in zip(preds, gts)]
        tps = [(f, i) for f, a in enumerate(assigns) for i, o in enumerate(a.outcomes) if o == TP]
        assume(tps)
        f, i = data.draw(st.sampled_from(tps))
        fewer = list(preds)
        fewer[f] = [p for k, p in enumerate(preds[f]) if k != i]
        r_before = precision_recall(assigns)[1]
        r_after = precision_recall([match_detections(p, g, iou_3d, 0.7) for p, g in zip(fewer, gts)])[1]
        assert r_after <= r_before

    @PROPS
    @given(inst=eval_instance(), thr=st.sampled_from([0.3, 0.5, 0.7]))
    def test_bounds(self, inst, thr):
        preds, gts = inst
        assigns = [match_detections(p, g, iou_3d, thr) for p, g in zip(preds, gts)]
        p, r = precision_recall(assigns)
        assert 0.0 <= p <= 1.0 and 0.0 <= r <= 1.0
        assert 0.0 <= ap40(preds, gts, iou_3d, thr) <= 100.0
        assert sum(a.tp + a.fn for a in assigns) == sum(len(g) for g in gts)


@pytest.mark.parametrize("cell", CELLS, ids=lambda c: f"{c[0]}-{c[1]}-{c[2]}")
def test_table_closed_gap_cells(cell):
    *_, ap, src, oracle, printed = cell
    assert closed_gap(ap, src, oracle) == pytest.approx(printed, abs=0.02)
