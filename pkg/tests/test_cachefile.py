import os
import struct
import tempfile
import unittest

import numpy as np

from mrfgat.cachefile import CacheFile, read_cache, record_dtype, write_cache
from mrfgat.errors import CacheFormatError, ValidationError


def _cache() -> CacheFile:
    rng = np.random.default_rng(12)
    return CacheFile(
        class_names=["airplane", "bathtub", "démo"],
        points=rng.normal(size=(5, 8, 3)),
        labels=[0, 2, 1, 1, 0],
        splits=[0, 0, 1, 0, 1],
    )


class TestCacheFile(unittest.TestCase):
    def test_round_trip_is_bit_identical(self) -> None:
        cache = _cache()

        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, "nested", "cache.bin")
            written = write_cache(cache, path)
            reread = read_cache(path)

        self.assertEqual(reread.to_bytes(), written)
        self.assertEqual(reread.class_names, cache.class_names)
        self.assertEqual(reread.points.tobytes(), cache.points.tobytes())
        np.testing.assert_array_equal(reread.labels, cache.labels)
        np.testing.assert_array_equal(reread.splits, cache.splits)

    def test_layout(self) -> None:
        data = _cache().to_bytes()

        magic, version, n_points, samples, classes = struct.unpack_from("<4sHIII", data)
        self.assertEqual((magic, version, n_points, samples, classes), (b"MRFG", 1, 8, 5, 3))
        names = sum(4 + len(name.encode("utf-8")) for name in _cache().class_names)
        self.assertEqual(len(data), 18 + names + 5 * record_dtype(8).itemsize)
        self.assertEqual(record_dtype(8).itemsize, 1 + 4 + 8 * 3 * 8)

    def test_split_queries(self) -> None:
        cache = _cache()

        np.testing.assert_array_equal(cache.split_indices("train"), [0, 1, 3])
        self.assertEqual(cache.class_counts("test"), [1, 1, 0])
        with self.assertRaises(ValidationError):
            cache.split_indices("validation")

    def test_truncation_names_the_section(self) -> None:
        data = _cache().to_bytes()
        cases = {10: "header", 20: "label map", len(data) - 7: "body"}
        for size, section in cases.items():
            with self.subTest(section=section), self.assertRaisesRegex(CacheFormatError, section):
                CacheFile.from_bytes(data[:size])

    def test_rejects_foreign_or_future_files(self) -> None:
        data = _cache().to_bytes()

        with self.assertRaisesRegex(CacheFormatError, "magic"):
            CacheFile.from_bytes(b"XXXX" + data[4:])
        with self.assertRaisesRegex(CacheFormatError, "version 2"):
            CacheFile.from_bytes(data[:4] + struct.pack("<H", 2) + data[6:])
        with self.assertRaisesRegex(CacheFormatError, "trailing"):
            CacheFile.from_bytes(data + b"\x00")

    def test_rejects_labels_outside_the_label_map(self) -> None:
        with self.assertRaises(ValidationError):
            CacheFile(class_names=["a"], points=np.zeros((1, 2, 3)), labels=[1], splits=[0])


if __name__ == "__main__":
    unittest.main()
