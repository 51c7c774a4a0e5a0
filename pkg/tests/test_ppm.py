import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentinet import ppm
from sentinet.errors import DataError


def test_known_bytes():
    raw = b"P6\n2 2\n255\n" + bytes(range(12))
    img = ppm.decode_ppm(raw)
    assert img.shape == (2, 2, 3)
    assert img[0, 1].tolist() == [3, 4, 5] and img[1, 0].tolist() == [6, 7, 8]
    assert ppm.encode_ppm(img) == raw


def test_header_comments():
    raw = b"P6 # made by hand\n1 1\n# another\n255\n\x01\x02\x03"
    assert ppm.decode_ppm(raw).tolist() == [[[1, 2, 3]]]


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 1000))
def test_round_trip(tmp_path_factory, h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    ppm.save_image(path, img)
    assert np.array_equal(ppm.load_image(path), img)


def test_ascii_ppm_rejected():
    with pytest.raises(DataError, match="P3"):
        ppm.decode_ppm(b"P3\n1 1\n255\n1 2 3\n")


def test_maxval_rejected():
    with pytest.raises(DataError, match="maxval"):
        ppm.decode_ppm(b"P6\n1 1\n65535\n\x00" * 6)


def test_truncation_reports_offset():
    raw = b"P6\n2 2\n255\n" + bytes(5)
    with pytest.raises(DataError, match="byte offset 16"):
        ppm.decode_ppm(raw)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="nope.ppm"):
        ppm.load_image(tmp_path / "nope.ppm")
