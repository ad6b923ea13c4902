import json
import logging
import shutil
import tempfile
import threading
import time
import unittest
from pathlib import Path

from src.utils.concurrency import map_in_threads
from src.utils.logger import ExperimentLogger
from src.utils.manifest import ManifestError, RunManifest, config_hash, sha256_bytes, sha256_file


class TestExperimentLogger(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_file_logging_and_close(self):
        log = ExperimentLogger("advfusion_test.file", str(self.tmp / "logs" / "run.log"))
        log.info("attack started")
        log.debug("hidden at INFO")
        log.close()
        text = (self.tmp / "logs" / "run.log").read_text()
        self.assertIn("advfusion_test.file - INFO - attack started", text)
        self.assertNotIn("hidden", text)
        self.assertFalse(any(isinstance(h, logging.FileHandler) for h in log.logger.handlers))

    def test_console_handler_added_once(self):
        ExperimentLogger("advfusion_test.console")
        log = ExperimentLogger("advfusion_test.console")
        consoles = [h for h in log.logger.handlers if getattr(h, "_advfusion_console", False)]
        self.assertEqual(len(consoles), 1)
        self.assertEqual(consoles[0].level, logging.WARNING)


class TestManifest(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_digests(self):
        self.assertEqual(sha256_bytes(b"abc"),
                         "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        path = self.tmp / "abc.bin"
        path.write_bytes(b"abc")
        self.assertEqual(sha256_file(path), sha256_bytes(b"abc"))
        with self.assertRaises(ManifestError):
            sha256_file(self.tmp / "missing.bin")

    def test_config_hash_ignores_key_order(self):
        self.assertEqual(config_hash({"a": 1, "b": [1, 2]}), config_hash({"b": [1, 2], "a": 1}))
        self.assertNotEqual(config_hash({"a": 1}), config_hash({"a": 2}))

    def test_write(self):
        (self.tmp / "out").mkdir()
        artifact = self.tmp / "out" / "mesh.obj"
        artifact.write_text("v 0 0 0\n")
        manifest = RunManifest("attack", ["attack", "--steps", "2"], {"attack": {"steps": 2}}, {"attack": 0})
        manifest.add_artifacts([artifact, self.tmp / "out" / "absent.csv"], root=self.tmp / "out")
        path = manifest.write(self.tmp / "out")
        data = json.loads(path.read_text())
        self.assertEqual(data["command"], "attack")
        self.assertEqual(list(data["artifacts"]), ["mesh.obj"])
        self.assertEqual(data["artifacts"]["mesh.obj"], sha256_file(artifact))
        self.assertEqual(data["config_sha256"], config_hash({"attack": {"steps": 2}}))
        self.assertIn("numpy", data["versions"])


class TestConcurrency(unittest.TestCase):
    def test_order_is_kept(self):
        def slow_square(x):
            time.sleep(0.01 * (5 - x))
            return x * x

        self.assertEqual(map_in_threads(slow_square, range(5), workers=3), [0, 1, 4, 9, 16])
        self.assertEqual(map_in_threads(slow_square, range(5), workers=1), [0, 1, 4, 9, 16])

    def test_uses_several_threads(self):
        seen = set()

        def record(_):
            seen.add(threading.get_ident())
            time.sleep(0.02)

        map_in_threads(record, range(6), workers=3)
        self.assertGreater(len(seen), 1)

    def test_errors_propagate(self):
        def boom(x):
            if x == 2:
                raise ValueError("bad item")
            return x

        with self.assertRaises(ValueError):
            map_in_threads(boom, range(4), workers=2)


if __name__ == '__main__':
    unittest.main()
