import struct
from collections import OrderedDict

import numpy as np
import pytest

from egomtl.errors import FormatError
from egomtl.serialization import (decode_checkpoint, decode_clip, encode_checkpoint, encode_clip, load_checkpoint,
                                  read_clip, read_pgm, save_checkpoint, write_clip, write_pgm)


def test_checkpoint_layout_by_hand():
    buf = encode_checkpoint(OrderedDict([("w", np.array([[1.0, 2.0]], np.float32))]),
                            OrderedDict([("w", np.array([[0.5, 0.25]]))]))
    expect = (b"MTLW" + struct.pack("<II", 1, 2)
              + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2) + struct.pack("<2I", 1, 2)
              + struct.pack("<2f", 1.0, 2.0)
              + struct.pack("<H", 5) + b"opt/w" + struct.pack("<B", 2) + struct.pack("<2I", 1, 2)
              + struct.pack("<2f", 0.5, 0.25))
    assert buf == expect


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = OrderedDict([("backbone/stage0/down.weight", rng.standard_normal((4, 3, 3, 3, 3))),
                           ("meta/epoch", np.float32(7)), ("head/A/linear.bias", np.zeros(12))])
    opt = OrderedDict([("backbone/stage0/down.weight", rng.standard_normal((4, 3, 3, 3, 3)))])
    save_checkpoint(tmp_path / "c.mtlw", tensors, opt)
    t2, o2 = load_checkpoint(tmp_path / "c.mtlw")
    assert list(t2) == list(tensors) and list(o2) == list(opt)
    for k in tensors:
        np.testing.assert_array_equal(t2[k], np.asarray(tensors[k], np.float32))
    assert t2["meta/epoch"].shape == () and t2["meta/epoch"] == 7
    assert not (tmp_path / "c.mtlw.tmp").exists()


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:-3], None),
    (lambda b: b + b"\0", None),
])
def test_checkpoint_corruption_reports_offset(mutate, offset):
    buf = encode_checkpoint({"w": np.ones((2, 2))})
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(mutate(buf))
    assert exc.value.offset is not None
    if offset is not None:
        assert exc.value.offset == offset


def test_clip_layout_and_round_trip(tmp_path, rng):
    frames = rng.random((3, 4, 5, 3)).astype(np.float32)
    buf = encode_clip(frames)
    assert buf[:4] == b"MTLC" and struct.unpack("<5I", buf[4:24]) == (1, 3, 4, 5, 3)
    assert buf[24:28] == struct.pack("<f", frames[0, 0, 0, 0])
    write_clip(tmp_path / "a.mtlc", frames)
    np.testing.assert_array_equal(read_clip(tmp_path / "a.mtlc"), frames)


def test_clip_truncated_reports_offset(rng):
    buf = encode_clip(rng.random((2, 2, 2, 3)))
    with pytest.raises(FormatError) as exc:
        decode_clip(buf[:-4])
    assert exc.value.offset == 24
    with pytest.raises(FormatError) as exc:
        decode_clip(buf[:10])
    assert exc.value.offset == 4
    with pytest.raises(FormatError):
        decode_clip(b"MTLW" + buf[4:])


def test_pgm_round_trip(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0], [-1.0, 0.25]])
    write_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 3\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), [[0, 128], [255, 255], [0, 64]])


def test_pgm_rejects_bad_files(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "b.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n255\n\0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "c.pgm")
