import struct

import numpy as np
import pytest

from avsekd.media import MediaFormatError, read_uvf, read_wav, write_uvf, write_wav


def test_wav_round_trip(tmp_path):
    x = np.array([0.0, 0.5, -0.5, -1.0, 0.999969482421875])
    write_wav(tmp_path / "a.wav", x)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000
    np.testing.assert_array_equal(y, x)


def test_wav_clips_out_of_range(tmp_path):
    write_wav(tmp_path / "a.wav", [2.0, -2.0])
    y, _ = read_wav(tmp_path / "a.wav")
    np.testing.assert_array_equal(y, [32767 / 32768, -1.0])


def test_uvf_layout(tmp_path):
    frames = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_uvf(tmp_path / "v.uvf", frames, 81.5)
    data = (tmp_path / "v.uvf").read_bytes()
    assert data[:4] == b"AVSE"
    assert struct.unpack("<IIIId", data[4:28]) == (1, 2, 3, 4, 81.5)
    assert data[28:] == bytes(range(24))
    back, fps = read_uvf(tmp_path / "v.uvf")
    np.testing.assert_array_equal(back, frames)
    assert fps == 81.5


def test_uvf_float_quantisation(tmp_path):
    write_uvf(tmp_path / "v.uvf", np.array([[[0.0, 1.0, 0.5]]]), 25.0)
    back, _ = read_uvf(tmp_path / "v.uvf")
    assert back.tolist() == [[[0, 255, 128]]]


def test_uvf_rejects_corruption(tmp_path):
    p = tmp_path / "v.uvf"
    write_uvf(p, np.zeros((1, 2, 2), np.uint8), 1.0)
    good = p.read_bytes()
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(MediaFormatError, match="magic"):
        read_uvf(p)
    p.write_bytes(good[:-1])
    with pytest.raises(MediaFormatError, match="pixel bytes"):
        read_uvf(p)
