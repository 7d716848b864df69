import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from traqpoint import io as tqio
from traqpoint import nets
from traqpoint.geometry import CameraFrame, Intrinsics, Pose
from traqpoint.inference import Keypoint, Match
from traqpoint.scenegen import rotation_from_axis_angle


def test_pgm_matches_hand_fixture(tmp_path):
    img = np.array([[0.0, 1.0], [128 / 255, 64 / 255]])
    tqio.write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n2 2\n255\n\x00\xff\x80\x40"
    assert np.array_equal(tqio.read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_comments_and_clamping(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5 # comment\n# more\n3 1\n255\n\x01\x02\x03")
    assert np.array_equal(tqio.read_pgm(tmp_path / "c.pgm"), [[1 / 255, 2 / 255, 3 / 255]])
    tqio.write_pgm(tmp_path / "d.pgm", np.array([[-0.5, 1.7, 0.5]]))
    assert (tmp_path / "d.pgm").read_bytes()[-3:] == b"\x00\xff\x80"


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    tqio.write_pgm(path, data / 255.0)
    back = tqio.read_pgm(path)
    assert np.array_equal(np.round(back * 255).astype(np.uint8), data)
    raw = path.read_bytes()
    tqio.write_pgm(path, back)
    assert path.read_bytes() == raw


@pytest.mark.parametrize("payload,match", [
    (b"P5\n2 2\n65535\n" + bytes(8), "unsupported maxval"),
    (b"P5\n2 2\n255\n\x00", r"truncated PGM payload at byte 12"),
    (b"P2\n2 2\n255\n0 0 0 0", "not a binary PGM"),
    (b"P5\n2", r"expected height at byte \d+"),
    (b"P5\nx 2\n255\n" + bytes(4), "non-integer"),
])
def test_pgm_errors(tmp_path, payload, match):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(tqio.FormatError, match=match):
        tqio.read_pgm(tmp_path / "bad.pgm")


def test_depth_round_trip_little_endian(tmp_path):
    d = np.array([[1.5, 0.0, 3.25]], dtype=np.float32)
    tqio.write_depth(tmp_path / "d.tqdp", d)
    raw = (tmp_path / "d.tqdp").read_bytes()
    assert raw[:16] == b"TQDP" + struct.pack("<III", 1, 3, 0)
    assert raw[16:20] == struct.pack("<f", 1.5)
    assert np.array_equal(tqio.read_depth(tmp_path / "d.tqdp"), d)
    (tmp_path / "e.tqdp").write_bytes(raw[:-2])
    with pytest.raises(tqio.FormatError, match="expected 12"):
        tqio.read_depth(tmp_path / "e.tqdp")
    (tmp_path / "f.tqdp").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(tqio.FormatError, match="not a TQDP"):
        tqio.read_depth(tmp_path / "f.tqdp")


def test_frame_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    pose = Pose(rotation_from_axis_angle((0.3, 1, 0.2), 0.4), np.array([0.1, -2.0, 1 / 3]))
    frame = CameraFrame(np.round(rng.random((6, 5)) * 255) / 255, rng.random((6, 5)).astype(np.float32),
                        Intrinsics(50.0, 51.5, 2.0, 2.5), pose)
    tqio.write_frame(tmp_path / "f" / "frame_0.pgm", frame)
    back = tqio.read_frame(tmp_path / "f" / "frame_0.pgm")
    assert np.array_equal(back.image, frame.image) and np.array_equal(back.depth, frame.depth)
    assert back.pose == pose and back.intrinsics == frame.intrinsics
    files = sorted(p.name for p in (tmp_path / "f").iterdir())
    before = {n: (tmp_path / "f" / n).read_bytes() for n in files}
    tqio.write_frame(tmp_path / "f" / "frame_0.pgm", back)
    assert {n: (tmp_path / "f" / n).read_bytes() for n in files} == before


def test_text_numbers_name_file_and_line(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 2\n3 oops\n")
    with pytest.raises(tqio.FormatError, match=r"k.txt:2: expected a decimal number, got 'oops'"):
        tqio.read_intrinsics(p)
    p.write_text("1 2 3\n")
    with pytest.raises(tqio.FormatError, match="expected 4 numbers"):
        tqio.read_intrinsics(p)


def test_manifest_round_trip_and_errors(tmp_path):
    entries = [("s0", "s0/frame_0.pgm", ["s0/frame_1.pgm", "s0/frame_2.pgm"]), ("s1", "a", ["b"])]
    tqio.write_manifest(tmp_path / "m.txt", entries)
    assert tqio.read_manifest(tmp_path / "m.txt") == entries
    (tmp_path / "bad.txt").write_text("# header\ns0 only_ref\n")
    with pytest.raises(tqio.FormatError, match=r"bad.txt:2"):
        tqio.read_manifest(tmp_path / "bad.txt")


def test_checkpoint_bytes_and_errors(tmp_path):
    desc = nets.init_descriptor(4).freeze()
    path = tmp_path / "d.tqck"
    tqio.write_checkpoint(path, desc, "descriptor")
    raw = path.read_bytes()
    assert raw[:16] == b"TQCK" + struct.pack("<III", 1, 1, len(nets.DESCRIPTOR_LAYERS)) and raw[-1] == 1
    names = [layer[0] for layer in nets.DESCRIPTOR_LAYERS]
    branch, arrays, frozen = tqio.read_checkpoint(path, names)
    assert branch == "descriptor" and frozen
    assert all(arrays[n].tobytes() == desc[n].tobytes() for n in desc.names())
    nets.save_checkpoint(tmp_path / "again.tqck", nets.load_checkpoint(path, "descriptor"), "descriptor")
    assert (tmp_path / "again.tqck").read_bytes() == raw

    for name, data, match in [
        ("magic", b"XXXX" + raw[4:], "not a TQCK file"),
        ("version", raw[:4] + struct.pack("<I", 9) + raw[8:], "version 9, expected 1"),
        ("trunc", raw[:100], "truncated"),
        ("trailing", raw + b"\x00", "trailing bytes"),
    ]:
        (tmp_path / name).write_bytes(data)
        with pytest.raises(tqio.FormatError, match=match):
            tqio.read_checkpoint(tmp_path / name, names)


def test_config_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nsteps = 10   # trailing\nseq-len=3\ncredit = per_point\nlam = 0.01\n")
    cfg = tqio.parse_config(p, {"seed": 4})
    assert (cfg.steps, cfg.seq_len, cfg.credit, cfg.lam, cfg.seed) == (10, 3, "per_point", 0.01, 4)
    assert cfg.n_global == 192 and cfg.grid == 8
    tqio.write_config(tmp_path / "out.cfg", cfg)
    assert tqio.parse_config(tmp_path / "out.cfg") == cfg


@pytest.mark.parametrize("text,match", [
    ("bogus_key = 1\n", r"run.cfg:1: unknown config key 'bogus_key'"),
    ("\nsteps 10\n", r"run.cfg:2: expected 'key = value'"),
    ("steps = ten\n", r"bad value 'ten' for 'steps'"),
])
def test_config_errors(tmp_path, text, match):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    with pytest.raises(tqio.FormatError, match=match):
        tqio.parse_config(p)


def test_config_range_validation(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seq_len = 1\n")
    with pytest.raises(ValueError, match="seq_len"):
        tqio.parse_config(p)


def test_keypoints_matches_and_csv(tmp_path):
    kps = [Keypoint((3, 4), 0.75), Keypoint((10, 0), 0.5)]
    desc = np.array([[0.6, 0.8], [1.0, 0.0]])
    tqio.write_keypoints(tmp_path / "k.txt", kps, desc)
    assert (tmp_path / "k.txt").read_text().splitlines()[:2] == ["2 2", "3 4 0.75 0.6 0.8"]
    xy, scores, d = tqio.read_keypoints(tmp_path / "k.txt")
    assert xy.tolist() == [[3, 4], [10, 0]] and scores.tolist() == [0.75, 0.5] and np.array_equal(d, desc)
    tqio.write_matches(tmp_path / "m.csv", [Match(0, 1, 0.3)])
    assert tqio.read_csv(tmp_path / "m.csv") == [{"index_a": "0", "index_b": "1", "probability": "0.3"}]
    tqio.write_csv(tmp_path / "x.csv", ["a", "b"], [(0.1 + 0.2, 3)])
    assert (tmp_path / "x.csv").read_text() == "a,b\n0.30000000000000004,3\n"
