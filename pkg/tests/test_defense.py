import unittest

import numpy as np

from src.attack.universal import initial_mesh
from src.autodiff import tensor as T
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import ShapeError, Value
from src.defense.adversarial_training import DefenseConfig, add_denoising, free_adv_train
from src.defense.compression import (LUMINANCE_TABLE, compress_pixels, compression_preprocess, dct_compress,
                                     quality_table)
from src.defense.denoise import init_nonlocal_params, nonlocal_block
from src.detector.model import detect, init_params
from src.sensors.camera import CameraImage
from src.utils.config import ConfigError
from tests.fixtures import attack_config, defense_config, detector_config, empty_scene, tiny_scenes


class TestCompression(unittest.TestCase):
    def test_quality_table(self):
        np.testing.assert_array_equal(quality_table(50), LUMINANCE_TABLE)
        np.testing.assert_array_equal(quality_table(100), np.ones((8, 8)))
        self.assertTrue(np.all(quality_table(1) <= 255))
        with self.assertRaises(ConfigError):
            quality_table(0)
        with self.assertRaises(ConfigError):
            compression_preprocess(101)

    def test_flat_image_survives(self):
        pixels = np.full((16, 24, 3), 128.0 / 255.0)
        np.testing.assert_allclose(compress_pixels(pixels, 20), pixels, atol=1e-12)

    def test_ragged_size(self):
        pixels = np.random.default_rng(0).uniform(size=(10, 13, 3))
        out = compress_pixels(pixels, 50)
        self.assertEqual(out.shape, (10, 13, 3))
        self.assertGreaterEqual(out.min(), 0.0)
        self.assertLessEqual(out.max(), 1.0)

    def test_removes_fine_texture(self):
        yy, xx = np.mgrid[:16, :16]
        checker = 0.5 + 0.05 * np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        pixels = np.repeat(checker[..., None], 3, axis=2)
        out = compress_pixels(pixels, 10)
        self.assertLess(out.std(), 0.2 * pixels.std())

    def test_image_wrapper_is_constant(self):
        image = CameraImage(Value(np.full((8, 8, 3), 0.3), requires_grad=True), np.full((8, 8), 7.0))
        out = dct_compress(image, 75)
        self.assertFalse(out.pixels.requires_grad)
        np.testing.assert_array_equal(out.dense_depth, image.dense_depth)
        out = compression_preprocess(75)(image)
        self.assertEqual(out.pixels.shape, (8, 8, 3))


class TestNonLocal(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.features = self.rng.normal(size=(4, 4, 6))

    def test_identity_at_init(self):
        params = init_nonlocal_params(4, self.rng)
        out = nonlocal_block(Value(self.features), params, subsample=2)
        np.testing.assert_allclose(out.data, self.features)

    def test_gradient(self):
        params = init_nonlocal_params(4, self.rng)
        params["img.nl.z.w"] = self.rng.normal(size=params["img.nl.z.w"].shape)
        weights = self.rng.normal(size=self.features.shape)
        for subsample in (1, 2):
            report = grad_check(lambda v: T.reduce_sum(nonlocal_block(v, params, subsample=subsample) * weights),
                                Value(self.features))
            self.assertTrue(report.passed, report.max_rel_error)

    def test_subsample_too_large(self):
        params = init_nonlocal_params(4, self.rng)
        with self.assertRaises(ShapeError):
            nonlocal_block(Value(self.features), params, subsample=5)


class TestDefenseConfig(unittest.TestCase):
    def test_kind_aliases(self):
        self.assertEqual(DefenseConfig(kind="adv-train-fd").kind, "adv_train_fd")
        with self.assertRaises(ConfigError):
            DefenseConfig(kind="dropout")

    def test_validation(self):
        with self.assertRaises(ConfigError):
            DefenseConfig(denoise_block_positions=(2,))
        with self.assertRaises(ConfigError):
            DefenseConfig(clean_fraction=1.5)
        with self.assertRaises(ConfigError):
            DefenseConfig(adversary_updates_per_model_update=-1)
        self.assertEqual(DefenseConfig().to_dict()["denoise_block_positions"], [1])


class TestAdversarialTraining(unittest.TestCase):
    def setUp(self):
        self.scenes = list(tiny_scenes()[:3])
        self.det_cfg = detector_config()
        self.params = init_params(self.det_cfg)
        self.attack_cfg = attack_config()

    def test_denoising_starts_as_identity(self):
        params, cfg = add_denoising(self.params, self.det_cfg)
        self.assertTrue(cfg.denoise)
        self.assertTrue(any(name.startswith("img.nl.") for name in params))
        scene = self.scenes[0]
        plain = detect(scene.image, scene.sweep, self.params, self.det_cfg, scene.camera)
        denoised = detect(scene.image, scene.sweep, params, cfg, scene.camera)
        np.testing.assert_allclose(denoised.scores.data, plain.scores.data, atol=1e-12)
        with self.assertRaises(ConfigError):
            add_denoising(self.params, detector_config(use_image=False))

    def test_free_training(self):
        result = free_adv_train(self.scenes, self.params, self.det_cfg, self.attack_cfg, defense_config(),
                                quiet=True)
        self.assertEqual(len(result.history), 2)
        self.assertEqual([r.mesh_updates for r in result.history], [1, 1])
        self.assertTrue(all(np.isfinite(r.model_loss) for r in result.history))
        self.assertFalse(result.params.equals(self.params))
        self.assertFalse(np.array_equal(result.mesh.vertices.data, initial_mesh(self.attack_cfg).vertices.data))

    def test_feature_denoising_variant(self):
        result = free_adv_train(self.scenes, self.params, self.det_cfg, self.attack_cfg,
                                defense_config(kind="adv_train_fd"), quiet=True)
        self.assertTrue(result.det_cfg.denoise)
        self.assertIn("img.nl.z.w", result.params)

    def test_without_adversary_updates(self):
        result = free_adv_train(self.scenes, self.params, self.det_cfg, self.attack_cfg,
                                defense_config(adversary_updates_per_model_update=0), quiet=True)
        self.assertEqual([r.mesh_updates for r in result.history], [0, 0])
        self.assertIsNone(result.history[0].attack_loss)
        np.testing.assert_array_equal(result.mesh.vertices.data, initial_mesh(self.attack_cfg).vertices.data)

    def test_needs_hosts(self):
        with self.assertRaises(ConfigError):
            free_adv_train([empty_scene()], self.params, self.det_cfg, self.attack_cfg, defense_config(),
                           quiet=True)


if __name__ == '__main__':
    unittest.main()
