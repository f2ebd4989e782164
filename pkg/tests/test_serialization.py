import json
import os
import tempfile

import numpy as np

from roundpipe.config_loader import (
    AVAILABLE_GPUS,
    load_gpu_spec,
    load_run_config,
    resolve_reference,
)
from roundpipe.models import ConfigReferenceType, RunConfig, ScheduleKind
from roundpipe.serialization import (
    ConfigError,
    dump_json,
    hash_dictionary,
    load_structured_file,
    write_csv,
)

from tests.utils import RoundPipeTestCase


class SerializationTestCase(RoundPipeTestCase):
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()
        super().tearDown()

    def path(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def test_dump_json(self):
        run = RunConfig(model="qwen3-1.7b", gpu="rtx4090", schedule=ScheduleKind.GPIPE)
        data = json.loads(dump_json(run))
        self.assertEqual(data["schedule"], "gpipe")
        self.assertIn('\n    "model"', dump_json(run))

    def test_dump_numpy(self):
        data = json.loads(dump_json({"a": np.int64(3), "b": np.float64(0.5), "c": np.arange(2)}))
        self.assertEqual(data, {"a": 3, "b": 0.5, "c": [0, 1]})

    def test_hash_ignores_key_order(self):
        self.assertEqual(hash_dictionary({"a": 1, "b": 2}), hash_dictionary({"b": 2, "a": 1}))
        self.assertNotEqual(hash_dictionary({"a": 1}), hash_dictionary({"a": 2}))

    def test_run_hash_ignores_outputs(self):
        run = RunConfig(model="qwen3-1.7b", gpu="rtx4090")
        with_outputs = run.model_copy(update={"json_path": "out.json", "svg_path": "out.svg"})
        self.assertEqual(run.hash(), with_outputs.hash())
        self.assertNotEqual(run.hash(), run.model_copy(update={"num_gpus": 4}).hash())

    def test_load_yaml_fallback(self):
        path = self.path("run.yml")
        with open(path, "w") as f:
            f.write("model: qwen3-1.7b\ngpu: rtx4090\nschedule: looped-bfs\nnum_gpus: 4\n")
        run = load_run_config(path)
        self.assertEqual(run.schedule, ScheduleKind.LOOPED_BFS)
        self.assertEqual(run.num_gpus, 4)

    def test_invalid_files(self):
        path = self.path("broken.yml")
        with open(path, "w") as f:
            f.write("just a string")
        with self.assertRaises(ConfigError):
            load_structured_file(path)
        with self.assertRaises(ConfigError):
            load_structured_file(self.path("missing.json"))

    def test_invalid_run_config(self):
        path = self.path("run.json")
        with open(path, "w") as f:
            json.dump({"model": "qwen3-1.7b", "gpu": "rtx4090", "num_gpus": 0}, f)
        with self.assertRaises(ConfigError):
            load_run_config(path)

    def test_write_csv(self):
        path = self.path("rows.csv")
        write_csv(path, ["a", "b"], [[1, 2], [3, 4]])
        with open(path) as f:
            self.assertEqual(f.read().splitlines(), ["a,b", "1,2", "3,4"])


class ConfigReferenceTestCase(RoundPipeTestCase):
    def test_bundled_name(self):
        reference = resolve_reference("rtx4090", AVAILABLE_GPUS)
        self.assertEqual(reference.type, ConfigReferenceType.NAME)

    def test_file_reference(self):
        reference = resolve_reference("./my-gpu.json", AVAILABLE_GPUS)
        self.assertEqual(reference.type, ConfigReferenceType.FILE)

    def test_gpu_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "gpu.json")
            with open(path, "w") as f:
                json.dump(
                    {
                        "name": "custom",
                        "peak_fp16_flops": 100e12,
                        "memory_bytes": 2**34,
                        "link_bandwidth": 25e9,
                    },
                    f,
                )
            self.assertEqual(load_gpu_spec(path).ridge_point, 4000)

    def test_bandwidth_override(self):
        self.assertEqual(load_gpu_spec("rtx4090", "16e9").link_bandwidth, 16e9)
        self.assertEqual(load_gpu_spec("rtx4090", "inf").ridge_point, 0)
        with self.assertRaises(ConfigError):
            load_gpu_spec("rtx4090", "fast")
        with self.assertRaises(ConfigError):
            load_gpu_spec("rtx4090", "0")
