import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.autodiff import tensor as T
from src.autodiff.gradcheck import grad_check
from src.autodiff.optim import Adam
from src.autodiff.tensor import ShapeError, Value, backward
from src.core.insertion import host_pose, insert_adversary
from src.detector.boxes import DetectionBox, decode_boxes, encode_boxes, heading_residual
from src.detector.checkpoint import (CheckpointCodec, CheckpointError, load_checkpoint, save_checkpoint,
                                     sidecar_path)
from src.detector.losses import assign_anchors, focal_loss, smooth_l1, task_loss
from src.detector.model import detect, init_params, nms, postprocess, voxelize_bev
from src.detector.training import TrainingSample, train_detector, train_step
from src.geometry.mesh import make_icosphere
from src.sensors.camera import CameraImage, project_points
from src.sensors.lidar import LidarSweep, merge_sweeps
from src.utils.config import ConfigError
from tests.fixtures import detector_config, tiny_scenes


class TestDetectorConfig(unittest.TestCase):
    def test_grid_and_anchors(self):
        cfg = detector_config()
        self.assertEqual(cfg.grid_shape, (32, 32))
        self.assertEqual(cfg.head_shape, (8, 8))
        anchors = cfg.anchors()
        self.assertEqual(anchors.shape, (8 * 8 * 2, 5))
        np.testing.assert_allclose(anchors[0], [2.0, -14.0, 4.3, 1.8, 0.0])
        np.testing.assert_allclose(anchors[1, 4], np.pi / 2)

    def test_invalid_configs(self):
        with self.assertRaises(ConfigError):
            detector_config(cell_size=0.3)
        with self.assertRaises(ConfigError):
            detector_config(image_size=[30, 64])
        with self.assertRaises(ConfigError):
            detector_config(pos_iou=0.3, neg_iou=0.5)
        with self.assertRaises(ConfigError):
            detector_config(x_range=[0.0, 30.0])


class TestBoxCoding(unittest.TestCase):
    def test_encode_decode(self):
        anchors = np.array([[10.0, 2.0, 4.3, 1.8, 0.0], [20.0, -3.0, 4.3, 1.8, np.pi / 2]])
        boxes = np.array([[10.5, 1.8, 4.0, 1.7, 0.2], [19.0, -3.5, 4.6, 2.0, np.pi / 2 - 0.3]])
        np.testing.assert_allclose(decode_boxes(encode_boxes(boxes, anchors), anchors), boxes, atol=1e-12)

    def test_heading_residual_folds_half_turn(self):
        self.assertAlmostEqual(float(heading_residual(np.pi, 0.0)), 0.0)
        self.assertAlmostEqual(float(heading_residual(0.3, 0.0)), 0.3)
        r = heading_residual(np.linspace(-4, 4, 17), 0.0)
        self.assertTrue(np.all((r >= -np.pi / 2) & (r < np.pi / 2)))

    def test_box_validation(self):
        with self.assertRaises(ValueError):
            DetectionBox(0.0, 0.0, 0.0, 1.0, 0.0)
        with self.assertRaises(ValueError):
            DetectionBox(0.0, 0.0, 1.0, 1.0, 0.0, score=1.5)


class TestModel(unittest.TestCase):
    def setUp(self):
        self.cfg = detector_config()
        self.scene = tiny_scenes()[0]
        self.params = init_params(self.cfg)

    def sweep(self, points) -> LidarSweep:
        points = points if isinstance(points, Value) else Value(np.asarray(points, dtype=float))
        return LidarSweep(points, np.arange(len(points.data)), self.scene.lidar_spec)

    def test_voxelize_single_point(self):
        occ = voxelize_bev(self.sweep([[2.5, 0.5, 0.5]]), self.cfg)
        self.assertEqual(occ.shape, (3, 32, 32))
        self.assertAlmostEqual(occ.data[0, 2, 16], 1.0)
        self.assertAlmostEqual(occ.data.sum(), 1.0)

    def test_voxelize_drops_out_of_range(self):
        occ = voxelize_bev(self.sweep([[-5.0, 0.0, 0.5], [10.0, 0.0, 9.0]]), self.cfg)
        self.assertEqual(occ.data.sum(), 0.0)

    def test_voxelize_gradient(self):
        weights = np.random.default_rng(0).normal(size=(3, 32, 32))
        points = np.array([[5.3, 1.2, 0.4], [12.7, -3.6, 1.9], [20.45, 7.15, 1.1]])

        def f(v):
            return T.reduce_sum(voxelize_bev(self.sweep(v), self.cfg) * weights)

        report = grad_check(f, Value(points))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_detect_shapes_and_prior(self):
        proposals = detect(self.scene.image, self.scene.sweep, self.params, self.cfg, self.scene.camera)
        self.assertEqual(len(proposals), 128)
        self.assertEqual(proposals.regression.shape, (128, 5))
        np.testing.assert_allclose(proposals.scores.data, 0.01, atol=0.01)

    def test_gradients_reach_both_inputs(self):
        image = CameraImage(Value(self.scene.image.pixels.data.copy(), requires_grad=True),
                            self.scene.image.dense_depth)
        sweep = self.sweep(Value(self.scene.sweep.xyz.copy(), requires_grad=True))
        proposals = detect(image, sweep, self.params.frozen(), self.cfg, self.scene.camera)
        backward(T.reduce_sum(proposals.scores))
        self.assertGreater(np.abs(image.pixels.grad).sum(), 0.0)
        self.assertGreater(np.abs(sweep.points.grad).sum(), 0.0)

    def test_lidar_only(self):
        cfg = detector_config(use_image=False)
        params = init_params(cfg)
        self.assertFalse(any(name.startswith("img.") for name in params))
        proposals = detect(self.scene.image, self.scene.sweep, params, cfg, self.scene.camera)
        self.assertEqual(len(proposals), 128)

    def test_image_size_mismatch(self):
        image = CameraImage(Value(np.zeros((16, 64, 3))))
        with self.assertRaises(ShapeError):
            detect(image, self.scene.sweep, self.params, self.cfg, self.scene.camera)

    def test_nms(self):
        a = DetectionBox(10.0, 0.0, 4.0, 2.0, 0.0, 0.9)
        b = DetectionBox(10.2, 0.1, 4.0, 2.0, 0.05, 0.8)
        c = DetectionBox(20.0, 5.0, 4.0, 2.0, 0.0, 0.7)
        kept = nms([c, b, a], 0.1)
        self.assertEqual(kept, [a, c])

    def test_postprocess_threshold(self):
        proposals = detect(self.scene.image, self.scene.sweep, self.params, self.cfg, self.scene.camera)
        self.assertEqual(postprocess(proposals, self.cfg, score_threshold=1.0), [])
        boxes = postprocess(proposals, self.cfg, score_threshold=0.0)
        self.assertTrue(boxes)
        self.assertEqual(boxes, sorted(boxes, key=lambda b: -b.score))


class TestLosses(unittest.TestCase):
    def setUp(self):
        self.cfg = detector_config()
        self.anchors = self.cfg.anchors()

    def test_assignment(self):
        truth = DetectionBox(*self.anchors[10])
        assign = assign_anchors(self.anchors, [truth], 0.6, 0.45)
        self.assertTrue(assign.positive[10])
        self.assertAlmostEqual(assign.max_iou[10], 1.0)
        self.assertFalse(np.any(assign.positive & assign.negative))
        empty = assign_anchors(self.anchors, [], 0.6, 0.45)
        self.assertEqual(empty.num_positive, 0)
        self.assertTrue(empty.negative.all())

    def test_focal_values(self):
        logits = Value(np.zeros(2))
        pos = focal_loss(logits, np.array([1, 0]), 0.25, 2.0).item()
        self.assertAlmostEqual(pos, 0.25 * 0.25 * np.log(2) + 0.75 * 0.25 * np.log(2))

    def test_focal_gradient(self):
        labels = np.array([1, 0, 1, 0])
        report = grad_check(lambda v: focal_loss(v, labels, 0.25, 2.0), Value(np.array([-1.2, 0.3, 2.0, -0.7])))
        self.assertTrue(report.passed, report.max_rel_error)

    def test_smooth_l1(self):
        self.assertAlmostEqual(smooth_l1(Value(np.array([1.0]))).item(), 1.0 - 0.5 / 9.0)
        self.assertAlmostEqual(smooth_l1(Value(np.array([-0.05]))).item(), 0.5 * 0.0025 * 9.0)

    def test_task_loss_is_finite(self):
        scene = tiny_scenes()[0]
        params = init_params(self.cfg)
        proposals = detect(scene.image, scene.sweep, params, self.cfg, scene.camera)
        loss = task_loss(proposals, scene.ground_truth, self.cfg)
        self.assertTrue(np.isfinite(loss.item()))
        self.assertGreater(loss.item(), 0.0)


    def test_task_loss_gradient_matches_finite_differences(self):
        scene = next(s for s in tiny_scenes() if s.host_candidates)
        params = init_params(self.cfg).frozen()
        inputs = insert_adversary(scene, make_icosphere(0, 1, radius=0.5), host_pose(scene, scene.host_index))
        adversary = inputs.adversary_sweep
        self.assertGreater(len(adversary), 0)
        n = min(len(adversary), 8)
        rest = Value(adversary.xyz[n:])
        pixels = inputs.image.pixels.data

        # a 4x4 pixel patch around the host, the rest of the image held fixed
        height, width, _ = pixels.shape
        box = scene.host_box()
        uv, _, _ = project_points(np.array([[box.x, box.y, 1.0]]), scene.camera)
        u = int(np.clip(np.floor(uv.data[0, 0]), 2, width - 2))
        v = int(np.clip(np.floor(uv.data[0, 1]), 2, height - 2))
        rows, cols = np.mgrid[v - 2:v + 2, u - 2:u + 2]
        patch = ((rows * width + cols)[..., None] * 3 + np.arange(3)).reshape(-1)
        background = pixels.reshape(-1).copy()
        background[patch] = 0.0

        def loss(image_pixels, points):
            sweep = merge_sweeps(scene.sweep, LidarSweep(points, adversary.ray_ids, scene.lidar_spec))
            proposals = detect(CameraImage(image_pixels), sweep, params, self.cfg, scene.camera)
            return task_loss(proposals, scene.ground_truth, self.cfg)

        def with_points(p):
            return p if n == len(adversary) else T.concat([p, rest], axis=0)

        def with_patch(p):
            return T.reshape(T.scatter_add(p, patch, background.size) + background, pixels.shape)

        by_points = grad_check(lambda p: loss(Value(pixels), with_points(p)), Value(adversary.xyz[:n]),
                               tol=1e-3, atol=1e-4)
        self.assertTrue(by_points.passed, by_points.max_rel_error)
        self.assertGreater(np.abs(by_points.analytic).max(), 0.0)
        by_pixels = grad_check(lambda p: loss(with_patch(p), adversary.points), Value(pixels.reshape(-1)[patch]),
                               tol=1e-3, atol=1e-4)
        self.assertTrue(by_pixels.passed, by_pixels.max_rel_error)
        self.assertGreater(np.abs(by_pixels.analytic).max(), 0.0)

class TestTraining(unittest.TestCase):
    def setUp(self):
        self.samples = [TrainingSample.from_scene(s) for s in tiny_scenes()[:4]]

    def test_deterministic(self):
        cfg = detector_config()
        a, history = train_detector(self.samples, cfg, quiet=True)
        b, _ = train_detector(self.samples, cfg, quiet=True)
        self.assertEqual(len(history), 3)
        self.assertTrue(all(r.accepted and np.isfinite(r.loss) for r in history))
        self.assertTrue(a.equals(b))
        self.assertFalse(a.equals(init_params(cfg)))

    def test_overfits_single_sample(self):
        cfg = detector_config(learning_rate=0.01)
        params = init_params(cfg)
        optimizer = Adam(params.values(), lr=cfg.learning_rate)
        losses = [train_step(self.samples[:1], params, optimizer, cfg, i).loss for i in range(25)]
        self.assertLess(np.mean(losses[-5:]), np.mean(losses[:5]))

    def test_empty_batch(self):
        cfg = detector_config()
        params = init_params(cfg)
        with self.assertRaises(ValueError):
            train_step([], params, Adam(params.values(), lr=0.01), cfg)
        with self.assertRaises(ValueError):
            train_detector([], cfg)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.cfg = detector_config()
        self.params = init_params(self.cfg)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_round_trip_with_sidecar(self):
        path, sidecar = save_checkpoint(self.params, self.cfg, self.tmp / "det.advf", {"defense": "none"})
        self.assertEqual(sidecar, sidecar_path(path))
        params, cfg, meta = load_checkpoint(path)
        self.assertTrue(params.equals(self.params))
        self.assertEqual(cfg, self.cfg)
        self.assertEqual(meta, {"defense": "none"})

    def test_missing_sidecar_needs_config(self):
        path, sidecar = save_checkpoint(self.params, self.cfg, self.tmp / "det.advf")
        sidecar.unlink()
        params, _, _ = load_checkpoint(path, self.cfg)
        self.assertTrue(params.equals(self.params))

    def test_config_mismatch(self):
        path, _ = save_checkpoint(self.params, self.cfg, self.tmp / "det.advf")
        with self.assertRaises(CheckpointError):
            load_checkpoint(path, detector_config(use_image=False))

    def test_corrupt_bytes(self):
        blob = CheckpointCodec.serialize(self.params)
        with self.assertRaises(CheckpointError):
            CheckpointCodec.deserialize(b"XXXX" + blob[4:])
        with self.assertRaises(CheckpointError):
            CheckpointCodec.deserialize(blob + b"\x00")
        with self.assertRaises(CheckpointError):
            CheckpointCodec.deserialize(blob[:-3])

    def test_non_finite_weights(self):
        broken = self.params.copy()
        broken["head.cls.b"].data[0] = np.nan
        self.assertIsNotNone(CheckpointCodec.validate(broken, self.cfg))
        path, _ = save_checkpoint(broken, self.cfg, self.tmp / "nan.advf")
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.tmp / "absent.advf", self.cfg)


if __name__ == '__main__':
    unittest.main()
