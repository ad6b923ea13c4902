import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.autodiff import tensor as T
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import Value, backward
from src.geometry.mesh import Pose, TexturedMesh, make_icosphere, transform_mesh
from src.sensors.camera import (CameraImage, CameraModel, DirectionalLight, SoftRasterConfig, composite_image,
                                project_points)
from src.sensors.depth import densify_depth, sparse_depth
from src.sensors.lidar import (LidarSpec, LidarSweep, SensorError, assign_ray_ids, generate_rays,
                               intersect_ray_mesh, merge_sweeps, simulate_lidar)
from src.sensors.raster import rasterize_hard, rasterize_soft
from src.sensors.sensor_io import (load_pgm, load_png, load_sweep, quantize_depth, quantize_image, save_pgm,
                                   save_png, save_sweep)


def wall(x: float = 10.0, half: float = 5.0, textures=None) -> TexturedMesh:
    verts = np.array([[x, -half, -half], [x, half, -half], [x, half, half], [x, -half, half]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    textures = np.full((2, 1, 1, 3), 0.5) if textures is None else textures
    return TexturedMesh(Value(verts), faces, Value(textures))


def small_spec() -> LidarSpec:
    return LidarSpec((0.05,), 0.1, (-0.2, 0.2), (0.0, 0.0, 0.0))


class TestLidar(unittest.TestCase):
    def setUp(self):
        self.spec = small_spec()

    def test_spec_validation(self):
        with self.assertRaises(SensorError):
            LidarSpec((0.0,), 0.3, (0.0, 1.0))
        with self.assertRaises(SensorError):
            LidarSpec((), 0.1, (0.0, 1.0))

    def test_generate_rays(self):
        origins, directions, ids = generate_rays(self.spec)
        self.assertEqual(len(directions), self.spec.num_rays)
        self.assertEqual(self.spec.num_rays, 4)
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
        np.testing.assert_array_equal(ids, np.arange(4))

    def test_single_ray_hit_and_miss(self):
        mesh = wall(5.0)
        hit = intersect_ray_mesh((0, 0, 0.3), (1, 0, 0), mesh)
        self.assertIsNotNone(hit)
        self.assertAlmostEqual(hit.t.item(), 5.0)
        self.assertAlmostEqual(sum(hit.barycentric), 1.0)
        self.assertIsNone(intersect_ray_mesh((0, 0, 0.3), (-1, 0, 0), mesh))
        self.assertIsNone(intersect_ray_mesh((0, 0, 0.3), (0, 1, 0), mesh))

    def test_matches_plane_barycentric_oracle(self):
        rng = np.random.default_rng(11)
        agree = 0
        for _ in range(1000):
            tri = rng.uniform(-2.0, 2.0, size=(3, 3))
            origin = rng.uniform(-5.0, 5.0, size=3)
            direction = tri.mean(axis=0) + rng.normal(scale=1.5, size=3) - origin
            direction /= np.linalg.norm(direction)
            n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            denom = n @ direction
            t = n @ (tri[0] - origin) / denom
            p = origin + t * direction
            # barycentric coordinates from sub-triangle areas along the normal
            w = [np.cross(tri[(i + 2) % 3] - p, tri[(i + 1) % 3] - p) @ n / (n @ n) for i in range(3)]
            if abs(denom) < 1e-6 or min(abs(x) for x in w) < 1e-7 or abs(t) < 1e-7:
                continue
            expected = t > 0 and min(w) > 0
            mesh = TexturedMesh(Value(tri), np.array([[0, 1, 2]]), Value(np.full((1, 1, 1, 3), 0.5)))
            hit = intersect_ray_mesh(origin, direction, mesh)
            self.assertEqual(hit is not None, expected)
            if hit is not None:
                self.assertLess(abs(hit.t.item() - t), 1e-9)
            agree += 1
        self.assertGreater(agree, 900)

    def test_simulated_points_lie_on_mesh(self):
        sweep = simulate_lidar(wall(10.0), self.spec)
        self.assertEqual(len(sweep), 4)
        np.testing.assert_allclose(sweep.xyz[:, 0], 10.0)

    def test_max_range(self):
        self.assertEqual(len(simulate_lidar(wall(10.0), self.spec, max_range=9.0)), 0)

    def test_points_are_differentiable_in_vertices(self):
        mesh = wall(10.0)
        faces, textures = mesh.faces, mesh.textures

        def f(v):
            sweep = simulate_lidar(TexturedMesh(v, faces, textures), self.spec)
            return T.reduce_sum(sweep.points * np.array([1.0, 0.3, -0.2]))

        report = grad_check(f, Value(mesh.vertices.data), tol=1e-4)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_merge_keeps_nearer_return(self):
        far = simulate_lidar(wall(10.0), self.spec)
        near = simulate_lidar(wall(6.0, half=0.5), self.spec)
        merged = merge_sweeps(far, near)
        self.assertEqual(len(merged), 4)
        by_id = dict(zip(merged.ray_ids.tolist(), merged.xyz[:, 0].tolist()))
        for ray in near.ray_ids:
            self.assertAlmostEqual(by_id[int(ray)], 6.0)
        self.assertIn(10.0, [round(x, 6) for x in by_id.values()])

    def test_merge_rejects_mixed_specs(self):
        other = LidarSpec((0.0,), 0.1, (-0.2, 0.2), (0.0, 0.0, 0.0))
        with self.assertRaises(SensorError):
            merge_sweeps(LidarSweep.empty(self.spec), LidarSweep.empty(other))

    def test_duplicate_ray_ids_rejected(self):
        with self.assertRaises(SensorError):
            LidarSweep(Value(np.zeros((2, 3))), np.array([1, 1]), self.spec)

    def test_assign_ray_ids_recovers_rays(self):
        sweep = simulate_lidar(wall(10.0), self.spec)
        assigned = assign_ray_ids(sweep.xyz, self.spec)
        np.testing.assert_array_equal(np.sort(assigned.ray_ids), np.sort(sweep.ray_ids))


class TestCamera(unittest.TestCase):
    def setUp(self):
        self.cam = CameraModel.forward_facing(50.0, 40, 60, (0.0, 0.0, 1.0))
        self.light = DirectionalLight()
        verts = np.array([[5.0, 0.5, 0.5], [5.0, -0.5, 0.5], [5.0, 0.0, 1.5]])
        textures = np.zeros((1, 2, 2, 3))
        textures[..., 0] = 1.0
        self.mesh = TexturedMesh(Value(verts), np.array([[0, 1, 2]]), Value(textures))

    def test_projection(self):
        uv, depth, valid = project_points(np.array([[10.0, 0.0, 1.0], [-3.0, 0.0, 1.0]]), self.cam)
        np.testing.assert_allclose(uv.data[0], [30.0, 20.0])
        self.assertAlmostEqual(depth.data[0], 10.0)
        np.testing.assert_array_equal(valid, [True, False])
        self.assertTrue(np.all(np.isfinite(uv.data)))

    def test_principal_point_validation(self):
        with self.assertRaises(SensorError):
            CameraModel(10.0, 10.0, 100.0, 5.0, 10, 10)

    def test_soft_render_covers_triangle(self):
        mesh = self.mesh.with_leaves()
        render = rasterize_soft(mesh, self.cam, self.light, SoftRasterConfig())
        self.assertGreater(render.alpha.data[21, 30], 0.9)
        self.assertLess(render.alpha.data[2, 2], 1e-3)
        self.assertGreater(render.rgb.data[21, 30, 0], render.rgb.data[21, 30, 1])
        self.assertAlmostEqual(render.depth[21, 30], 5.0, places=3)
        self.assertTrue(np.isinf(render.depth[2, 2]))
        backward(T.reduce_sum(render.rgb))
        self.assertGreater(np.abs(mesh.textures.grad).sum(), 0.0)
        self.assertGreater(np.abs(mesh.vertices.grad).sum(), 0.0)

    def micro_sphere(self):
        """20-face sphere with random texels in front of a 32x32 camera."""
        cam = CameraModel.forward_facing(30.0, 32, 32, (0.0, 0.0, 1.0))
        sphere = transform_mesh(make_icosphere(0, 2, radius=0.6), Pose((4.0, 0.2, 1.1), 0.3))
        textures = np.random.default_rng(5).uniform(0.1, 0.9, size=sphere.textures.shape)
        return cam, sphere.vertices.data, sphere.faces, textures

    def test_soft_render_vertex_gradient_matches_finite_differences(self):
        cam, verts, faces, textures = self.micro_sphere()

        def f(v):
            return T.reduce_sum(rasterize_soft(TexturedMesh(v, faces, Value(textures)), cam, self.light).rgb)

        report = grad_check(f, Value(verts), tol=1e-3, atol=1e-4)
        self.assertTrue(report.passed, report.max_rel_error)
        self.assertGreater(np.abs(report.analytic).max(), 1e-2)

    def test_soft_render_texture_gradient_matches_finite_differences(self):
        cam, verts, faces, textures = self.micro_sphere()

        def f(t):
            return T.reduce_sum(rasterize_soft(TexturedMesh(Value(verts), faces, t), cam, self.light).rgb)

        report = grad_check(f, Value(textures), tol=1e-3, atol=1e-4)
        self.assertTrue(report.passed, report.max_rel_error)
        self.assertGreater(np.abs(report.analytic).max(), 1e-2)

    def test_soft_render_behind_camera_is_empty(self):
        verts = self.mesh.vertices.data * np.array([-1.0, 1.0, 1.0])
        mesh = TexturedMesh(Value(verts), self.mesh.faces, self.mesh.textures)
        render = rasterize_soft(mesh, self.cam, self.light)
        self.assertEqual(render.alpha.data.max(), 0.0)

    def test_hard_render_depth_test(self):
        near = self.mesh.vertices.data
        far = near * np.array([2.0, 3.0, 1.0]) + np.array([0.0, 0.0, -0.5])
        verts = np.concatenate([far, near])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        colors = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        image, depth = rasterize_hard(verts, faces, colors, self.cam, self.light,
                                      np.zeros((40, 60, 3)), np.full((40, 60), np.inf))
        self.assertAlmostEqual(depth[21, 30], 5.0, places=6)
        self.assertGreater(image[21, 30, 0], 0.0)
        self.assertEqual(image[21, 30, 1], 0.0)

    def test_composite_respects_occlusion(self):
        original = CameraImage(Value(np.full((40, 60, 3), 0.2)))
        rgb = Value(np.ones((40, 60, 3)))
        alpha = Value(np.ones((40, 60)))
        behind = composite_image(original, rgb, alpha, np.full((40, 60), 10.0), np.full((40, 60), 5.0))
        np.testing.assert_array_equal(behind.pixels.data, original.pixels.data)
        front = composite_image(original, rgb, alpha, np.full((40, 60), 3.0), np.full((40, 60), 5.0))
        np.testing.assert_allclose(front.pixels.data, 1.0)

    def test_composite_shape_mismatch(self):
        original = CameraImage(Value(np.zeros((4, 4, 3))))
        with self.assertRaises(SensorError):
            composite_image(original, np.zeros((4, 5, 3)), np.zeros((4, 5)), np.zeros((4, 4)), np.zeros((4, 4)))


class TestDepth(unittest.TestCase):
    def setUp(self):
        self.cam = CameraModel.forward_facing(50.0, 40, 60, (0.0, 0.0, 1.0))
        self.spec = small_spec()

    def test_single_point_fills_image(self):
        sweep = LidarSweep(Value(np.array([[5.0, 0.0, 1.0]])), np.array([0]), self.spec)
        sparse, known = sparse_depth(sweep, self.cam)
        self.assertEqual(known.sum(), 1)
        self.assertAlmostEqual(sparse[20, 30], 5.0)
        np.testing.assert_allclose(densify_depth(sweep, self.cam), 5.0)

    def test_no_points_uses_far_plane(self):
        dense = densify_depth(LidarSweep.empty(self.spec), self.cam)
        np.testing.assert_allclose(dense, self.cam.far)


class TestSensorIO(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.rng = np.random.default_rng(3)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_png_matches_quantized(self):
        pixels = self.rng.uniform(size=(6, 7, 3))
        loaded = load_png(save_png(pixels, self.tmp / "img.png"))
        np.testing.assert_allclose(loaded, quantize_image(pixels), atol=1e-12)

    def test_pgm_matches_quantized(self):
        depth = self.rng.uniform(1.0, 80.0, size=(5, 9))
        loaded = load_pgm(save_pgm(depth, self.tmp / "depth.pgm"))
        np.testing.assert_allclose(loaded, quantize_depth(depth), atol=1e-9)

    def test_sweep_with_and_without_sidecar(self):
        spec = small_spec()
        sweep = simulate_lidar(wall(10.0), spec)
        path = save_sweep(sweep, self.tmp / "sweep.ply")
        loaded = load_sweep(path)
        np.testing.assert_array_equal(loaded.xyz, sweep.xyz)
        np.testing.assert_array_equal(loaded.ray_ids, sweep.ray_ids)
        path.with_suffix(".json").unlink()
        with self.assertRaises(SensorError):
            load_sweep(path)
        reassigned = load_sweep(path, spec)
        self.assertEqual(len(reassigned), len(sweep))


if __name__ == '__main__':
    unittest.main()
