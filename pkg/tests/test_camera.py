import math

import numpy as np
import pytest

from fusionprobe.camera import (CameraConfig, RenderResult, background_depth, composite, mask_box2,
                                occlusion_ratios, rasterize_instances, rasterize_triangles, splat_depth,
                                tone_match)
from fusionprobe.geometry import Box2, Box3, Calibration, GroundTruth, PointCloud, Pose3, iou_2d, projected_box2
from fusionprobe.kitti_io import Frame
from fusionprobe.mesh import ObjectInstance, load_mesh
from fusionprobe.synthetic import car_mesh

from test_mesh import CUBE

W, H = 1242, 375


def frame_with(points, calib, image=None):
    img = image if image is not None else np.full((H, W, 3), 90, np.uint8)
    return Frame("f", PointCloud(points, np.zeros(len(points))), img, calib)


def point_for_pixel(u, v, depth, calib):
    """LiDAR-frame point that projects to (u, v) at the given camera depth (simple_calib axes)."""
    xc, yc = (u - 600) / 700 * depth, (v - 180) / 700 * depth
    return np.array([depth, -xc, -yc])


class TestBackgroundDepth:
    def test_single_point(self, simple_calib):
        d = splat_depth(point_for_pixel(300, 100, 10.0, simple_calib)[None], simple_calib)
        assert d[100, 300] == pytest.approx(10.0)
        assert np.isnan(d[10, 10]) and np.isfinite(d).sum() == 1

    def test_min_of_two(self, simple_calib):
        pts = np.array([point_for_pixel(300, 100, 10.0, simple_calib), point_for_pixel(300, 100, 5.0, simple_calib)])
        assert splat_depth(pts, simple_calib)[100, 300] == pytest.approx(5.0)

    def test_dilation_radius(self, simple_calib):
        f = frame_with(point_for_pixel(300, 100, 10.0, simple_calib)[None], simple_calib)
        d = background_depth(f, 5)
        assert d[100, 305] == pytest.approx(10.0) and np.isnan(d[100, 306]) and np.isnan(d[104, 304])

    def test_wall_plane(self, simple_calib):
        # plane x = 15 + 0.3 y in LiDAR frame, scanned by a dense fan of rays
        az = np.radians(np.arange(-18, 18, 0.1))
        el = np.radians(np.linspace(-6, 6, 64))
        a, e = np.meshgrid(az, el)
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], -1).reshape(-1, 3)
        t = 15.0 / (d[:, 0] - 0.3 * d[:, 1])
        pts = d * t[:, None]
        depth = background_depth(frame_with(pts, simple_calib), 5)
        uu, vv = np.meshgrid(np.arange(450, 750), np.arange(140, 220))
        aa = (uu - 600) / 700.0
        analytic = 15.0 / (1 + 0.3 * aa)
        got = depth[140:220, 450:750]
        ok = np.abs(got - analytic) < 0.3
        assert ok.mean() >= 0.95


def cube_at(x, y=0.0, z=-0.5, scale=1.0):
    m = load_mesh(CUBE, target_length=scale)
    return ObjectInstance.place(m, Pose3(x, y, z))


class TestRasterize:
    def test_cube_width(self, simple_calib):
        r = rasterize_instances([cube_at(10.5)], simple_calib)
        cols = np.nonzero((r.owner == 0).any(axis=0))[0]
        assert abs(len(cols) - 70) <= 1

    def test_rear_instance_hidden(self, simple_calib):
        insts = [cube_at(10.5), cube_at(20.0, scale=0.5, z=-0.25)]
        r = rasterize_instances(insts, simple_calib)
        res = composite(frame_with(np.zeros((0, 3)), simple_calib), r, np.full((H, W), np.nan), n_instances=2)
        assert res.masks[0].any() and not res.masks[1].any() and res.fully_occluded == [False, True]

    def test_random_triangle_membership(self, simple_calib, rng):
        for _ in range(20):
            tri = np.column_stack([rng.uniform(-3, 3, 3), rng.uniform(-1.5, 1.5, 3), rng.uniform(6, 20, 3)])
            r = rasterize_triangles(tri[None], np.full((1, 3), 200.0), np.zeros(1, np.int64), simple_calib)
            q = tri @ simple_calib.cam_projection[:, :3].T
            s = q[:, :2] / q[:, 2:3]
            uu, vv = np.meshgrid(np.arange(W), np.arange(H))
            m = np.array([[s[1, 0] - s[0, 0], s[2, 0] - s[0, 0]], [s[1, 1] - s[0, 1], s[2, 1] - s[0, 1]]])
            inv = np.linalg.inv(m)
            rel = np.stack([uu - s[0, 0], vv - s[0, 1]], -1) @ inv.T
            lam = np.stack([1 - rel[..., 0] - rel[..., 1], rel[..., 0], rel[..., 1]], -1)
            inside = (lam >= 0).all(-1)
            clear = np.abs(lam).min(-1) > 1e-9
            assert np.array_equal((r.owner == 0)[clear], inside[clear])

    def test_zbuffer_oracle(self, rng):
        calib = Calibration(np.array([[60.0, 0, 40, 0], [0, 60, 30, 0], [0, 0, 1, 0]]), np.eye(4), (80, 60))
        tris = np.stack([rng.uniform(-4, 4, (12, 3)), rng.uniform(-3, 3, (12, 3)), rng.uniform(4, 12, (12, 3))], -1)
        r = rasterize_triangles(tris, np.full((12, 3), 100.0), np.arange(12), calib)
        for row in range(60):
            for col in range(80):
                ray = np.array([(col - 40) / 60, (row - 30) / 60, 1.0])
                best = np.inf
                for t in tris:
                    n = np.cross(t[1] - t[0], t[2] - t[0])
                    den = n @ ray
                    if abs(den) < 1e-12:
                        continue
                    z = (n @ t[0]) / den
                    p = z * ray
                    c0 = np.cross(t[1] - t[0], p - t[0]) @ n
                    c1 = np.cross(t[2] - t[1], p - t[1]) @ n
                    c2 = np.cross(t[0] - t[2], p - t[2]) @ n
                    if min(c0, c1, c2) > 1e-9 * (n @ n) and z > 0:
                        best = min(best, z)
                if np.isfinite(best):
                    assert r.depth[row, col] == pytest.approx(best, rel=1e-9)

    def test_perspective_law(self, simple_calib):
        diag = []
        for x in (10, 20, 40):
            r = rasterize_instances([ObjectInstance.place(car_mesh(), Pose3(x, 0, -1.73))], simple_calib)
            diag.append(mask_box2(r.owner == 0, (W, H)).diagonal)
        assert diag[0] > diag[1] > diag[2]

    def test_projected_box_consistency(self, calib, rng):
        for _ in range(10):
            inst = ObjectInstance.place(car_mesh(), Pose3(rng.uniform(8, 40), rng.uniform(-4, 4), -1.73,
                                                          rng.uniform(-math.pi, math.pi)))
            r = rasterize_instances([inst], calib)
            b = mask_box2(r.owner == 0, calib.image_size)
            assert iou_2d(b, projected_box2(inst.box, calib)) >= 0.6


class TestComposite:
    def setup_method(self):
        p2 = np.array([[700.0, 0, 600, 0], [0, 700, 180, 0], [0, 0, 1, 0]])
        v2c = np.array([[0.0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]])
        self.calib = Calibration(p2, v2c, (W, H))
        self.raster = rasterize_instances([cube_at(10.5)], self.calib)

    def test_wall_in_front(self):
        res = composite(frame_with(np.zeros((0, 3)), self.calib), self.raster, np.full((H, W), 5.0))
        assert not res.win.any() and res.box2[0] is None

    def test_unknown_background(self):
        f = frame_with(np.zeros((0, 3)), self.calib)
        res = composite(f, self.raster, np.full((H, W), np.nan))
        assert np.array_equal(res.masks[0], self.raster.owner == 0)

    def test_mixed_scene_oracle(self, rng):
        bg = rng.uniform(5, 20, (H, W))
        bg[rng.random((H, W)) < 0.3] = np.nan
        img = rng.integers(0, 256, (H, W, 3), dtype=np.uint8)
        f = frame_with(np.zeros((0, 3)), self.calib, img)
        res = composite(f, self.raster, bg, CameraConfig())
        for r in range(H):
            for c in range(0, W, 7):
                want = self.raster.owner[r, c] >= 0 and (np.isnan(bg[r, c]) or self.raster.depth[r, c] < bg[r, c] - 0.2)
                assert res.win[r, c] == want
        assert np.array_equal(res.image[~res.win], img[~res.win])
        assert res.box2[0] == mask_box2(res.masks[0], (W, H))


def result_with(win, depth):
    return RenderResult(np.zeros((H, W, 3), np.uint8), [win], [mask_box2(win, (W, H))], win,
                        np.where(win, depth, np.inf))


class TestOcclusion:
    def test_cases(self, simple_calib):
        gt = GroundTruth(Box3((20.0, 0, 0), 4, 2, 1.5), Box2(100, 100, 200, 150))
        none = np.zeros((H, W), bool)
        full = none.copy()
        full[90:160, 90:210] = True
        half = none.copy()
        half[:, 100:150] = True
        far = result_with(full, 30.0)
        assert occlusion_ratios([gt], result_with(none, 5.0), simple_calib) == [(0.0, False)]
        assert occlusion_ratios([gt], result_with(full, 5.0), simple_calib) == [(1.0, True)]
        assert occlusion_ratios([gt], far, simple_calib)[0] == (0.0, False)
        r, dc = occlusion_ratios([gt], result_with(half, 5.0), simple_calib)[0]
        assert abs(r - 0.5) <= 1 / 100 and not dc


class TestToneMatch:
    def test_identity(self, rng):
        px = rng.uniform(50, 200, (500, 3))
        assert np.allclose(tone_match(px, px), px)

    def test_uniform(self):
        out = tone_match(np.full((40, 3), 255.0), np.full((100, 3), 128.0))
        assert np.allclose(out.mean(axis=0), 128.0)

    def test_random_textures(self, rng):
        obj = rng.uniform(0, 255, (2000, 3))
        ref = rng.normal([90, 120, 150], [15, 20, 25], (5000, 3))
        out = tone_match(obj, ref)
        assert np.all(np.abs(out.mean(axis=0) - ref.mean(axis=0)) < 2.0)

    def test_empty_reference(self, rng):
        obj = rng.uniform(0, 255, (10, 3))
        assert np.array_equal(tone_match(obj, np.zeros((0, 3))), obj)
