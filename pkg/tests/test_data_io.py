import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamseg4d.data_io import (
    FormatError,
    KittiFrame,
    extend_class,
    kitti_to_sequence,
    load_kitti_table,
    read_kitti_dir,
    read_kitti_label,
    read_kitti_scan,
    read_native,
    read_poses,
    sequence_to_kitti,
    write_kitti_dir,
    write_kitti_label,
    write_kitti_scan,
    write_native,
    write_poses,
)
from streamseg4d.scene import SceneConfig, SceneSequence, generate_scene

from conftest import random_transform


def small_seq(n_frames=3, seed=0):
    return generate_scene(SceneConfig(n_bodies=3, n_frames=n_frames, seed=seed, n_static_background_points=300, ego_v=(0.3, 0, 0)))


def test_single_scan_record():
    pc = read_kitti_scan(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    np.testing.assert_array_equal(pc.points, [[1, 2, 3]])
    assert pc.intensity[0] == 0.5


def test_label_bit_split():
    sem, inst = read_kitti_label(struct.pack("<I", 0x00020001))
    assert (sem[0], inst[0]) == (1, 2)


def test_malformed_lengths_report_offset():
    with pytest.raises(FormatError) as e:
        read_kitti_scan(b"\0" * 20)
    assert e.value.field == "scan" and e.value.offset == 16
    with pytest.raises(FormatError) as e:
        read_kitti_label(b"\0" * 7)
    assert e.value.offset == 4


@given(st.binary(max_size=400).map(lambda b: b[: len(b) - len(b) % 16]))
def test_scan_round_trip(data):
    try:
        pc = read_kitti_scan(data)
    except FormatError:
        return  # non-finite payloads are rejected, not decoded
    assert write_kitti_scan(pc) == data


@given(st.binary(max_size=400).map(lambda b: b[: len(b) - len(b) % 4]))
def test_label_round_trip(data):
    assert write_kitti_label(*read_kitti_label(data)) == data


def test_poses_round_trip(rng):
    poses = [random_transform(rng) for _ in range(4)]
    text = write_poses(poses)
    back = read_poses(text)
    assert all(a.allclose(b, atol=1e-12) for a, b in zip(poses, back))
    assert write_poses(back) == text


def test_kitti_dir_round_trip_is_byte_identical(tmp_path):
    frames, poses = sequence_to_kitti(small_seq(4))
    write_kitti_dir(frames, poses, tmp_path / "a")
    write_kitti_dir(*read_kitti_dir(tmp_path / "a"), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_sim_labels_survive_kitti_conversion():
    seq = small_seq(2)
    back = kitti_to_sequence(*sequence_to_kitti(seq), fps=seq.fps)
    sim_names = np.array(seq.classes.names)
    kitti_names = np.array(back.classes.names)
    for a, b in zip(seq.frames, back.frames):
        np.testing.assert_array_equal(sim_names[a.semantic], kitti_names[b.semantic])
        np.testing.assert_array_equal(a.instance, b.instance)
        np.testing.assert_array_equal(a.moving, b.moving)


def test_class_table_extension():
    table, lmap = load_kitti_table()
    assert table.n_classes - 1 == 25
    assert sum(table.thing) == 14
    car, person = table.names.index("car"), table.names.index("person")
    out = extend_class(np.array([car, car, person, 9]), np.array([True, False, True, True]), table)
    assert [table.names[i] for i in out] == ["moving-car", "car", "moving-person", "road"]
    assert lmap[252] == table.names.index("moving-car")


def test_native_round_trip_empty_and_simulated():
    empty = SceneSequence(frames=[], fps=10.0)
    assert write_native(read_native(write_native(empty))) == write_native(empty)
    seq = small_seq(3)
    data = write_native(seq)
    back = read_native(data)
    assert write_native(back) == data
    np.testing.assert_array_equal(back[2].flow, seq[2].flow)
    assert back[1].pose.allclose(seq[1].pose, atol=0)


def test_native_corruptions_name_the_field():
    data = bytearray(write_native(small_seq(1)))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError) as e:
        read_native(bad)
    assert e.value.field == "magic"
    bad = bytearray(data)
    bad[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError) as e:
        read_native(bytes(bad))
    assert e.value.field == "version"
    with pytest.raises(FormatError) as e:
        read_native(bytes(data[:-5]))
    assert e.value.field.startswith("frame[0]")


def _parse_any(blob):
    for parse in (read_kitti_scan, read_kitti_label, read_native, read_poses):
        try:
            parse(blob)
        except FormatError:
            pass


def test_fuzz_parsers_total():
    rng = np.random.default_rng(7)
    valid = write_native(small_seq(1))
    for k in range(1000):
        n = int(rng.integers(0, 256))
        blob = rng.bytes(n)
        if k % 2:
            # splice random bytes into a valid file to reach deeper fields
            cut = int(rng.integers(0, len(valid)))
            blob = valid[:cut] + blob
        _parse_any(blob)


@given(st.binary(max_size=300))
def test_parsers_total_hypothesis(blob):
    _parse_any(blob)
