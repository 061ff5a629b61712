import numpy as np
import pytest

from nsmra.data import (
    IngestError,
    Observations,
    collapse_duplicates,
    ingest,
    read_any,
    read_binary,
    read_text,
    write_binary,
    write_text,
)
from nsmra.geo import GeoBox


def _obs():
    return Observations(np.array([10.0, 20.0, 30.0, 10.0]), np.array([0.0, 75.0, -10.0, 0.0]),
                        np.array([280.0, 290.0, 300.0, 284.0]), np.array([5, 3, 1, 2], dtype=np.int32))


class TestFormats:
    def test_text_roundtrip(self, tmp_path):
        obs = _obs()
        write_text(tmp_path / "a.txt", obs)
        back = read_text(tmp_path / "a.txt")
        for f in ("lon", "lat", "value", "quality"):
            np.testing.assert_array_equal(getattr(back, f), getattr(obs, f))

    def test_binary_roundtrip(self, tmp_path):
        obs = _obs()
        write_binary(tmp_path / "a.bin", obs)
        back = read_any(tmp_path / "a.bin")
        for f in ("lon", "lat", "value", "quality"):
            np.testing.assert_array_equal(getattr(back, f), getattr(obs, f))

    def test_malformed_row_names_line(self, tmp_path):
        (tmp_path / "bad.txt").write_text("lon lat value quality\n1 2 3 4\n1 2 three 4\n")
        with pytest.raises(IngestError, match=r"bad.txt:3"):
            read_text(tmp_path / "bad.txt")

    def test_truncated_binary(self, tmp_path):
        write_binary(tmp_path / "a.bin", _obs())
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "b.bin").write_bytes(raw[:-3])
        with pytest.raises(IngestError, match="truncated"):
            read_binary(tmp_path / "b.bin")


class TestIngest:
    def test_filters(self, tmp_path):
        write_text(tmp_path / "d.txt", _obs())
        obs, rep = ingest([tmp_path / "d.txt"], GeoBox(-180, 180, -60, 60), quality_min=2)
        assert rep["dropped_quality"] == 1
        assert rep["dropped_outside_box"] == 1
        assert rep["collapsed_duplicates"] == 1
        assert rep["retained"] == 1
        assert obs.value[0] == pytest.approx(282.0)
        assert obs.quality[0] == 2

    def test_collapse_is_order_independent(self):
        obs = _obs()
        perm = np.array([3, 1, 0, 2])
        a, _ = collapse_duplicates(obs)
        b, _ = collapse_duplicates(obs.take(perm))
        np.testing.assert_array_equal(a.value, b.value)
        np.testing.assert_array_equal(a.lon, b.lon)
