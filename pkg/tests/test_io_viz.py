"""
Tests for the file formats (PGM/PPM, .flo, metadata, sequence directories,
checkpoints) and the colour-wheel rendering.
"""

import numpy as np
import pytest

from registration.errors import ParseError
from registration.io_viz import (
    decode_checkpoint, encode_checkpoint, flow_hue, flow_to_color, read_checkpoint, read_flo, read_flow_dir,
    read_mask, read_metadata, read_pgm, read_ppm, read_sequence, SequenceDir, write_checkpoint,
    write_flo, write_flow_dir, write_mask, write_metadata, write_pgm, write_ppm, write_sequence,
)
from registration.synth import FlowSpec, circulation_for_max_speed, truth_field
from registration.unet import ArchDescriptor, init
from registration.warp_field import FlowField, Image
from utils.config_utils import ConfigurationError


class TestPgm:

    def test_eight_bit_round_trip_is_exact(self, tmp_path, rng):
        img = Image(rng.integers(0, 256, size=(7, 5)) / 255.0)
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm").pixels, img.pixels)

    def test_sixteen_bit_round_trip(self, tmp_path, speckle):
        write_pgm(tmp_path / "a.pgm", speckle, maxval=65535)
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm").pixels, speckle.pixels, atol=0.5 / 65535)

    def test_full_level_reads_as_one(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm").pixels, [[0.0, 1.0]])

    def test_eight_bit_write_rounds_half_up(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", Image(np.array([[32768 / 65535]])))
        assert (tmp_path / "a.pgm").read_bytes()[-1] == 128

    def test_header_comments(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n# written by hand\n2 1\n255\n\x00\xff")
        assert read_pgm(tmp_path / "a.pgm").shape == (1, 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n2 1\n255\n\x00\xff")
        with pytest.raises(ParseError) as info:
            read_pgm(tmp_path / "a.pgm")
        assert info.value.offset == 0

    def test_truncated_raster(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x01\x02")
        with pytest.raises(ParseError, match="truncated") as info:
            read_pgm(tmp_path / "a.pgm")
        assert info.value.offset == 11

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x01\x02\x03\x04")
        with pytest.raises(ParseError, match="trailing") as info:
            read_pgm(tmp_path / "a.pgm")
        assert info.value.offset == 15

    def test_unsupported_maxval(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n100\n\x00")
        with pytest.raises(ParseError, match="maxval"):
            read_pgm(tmp_path / "a.pgm")

    def test_mask_threshold(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        write_mask(tmp_path / "m.pgm", mask)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), mask)

    def test_ppm_round_trip(self, tmp_path, rng):
        rgb = rng.integers(0, 256, size=(3, 4, 3)).astype(np.uint8)
        write_ppm(tmp_path / "c.ppm", rgb)
        np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), rgb)


class TestFlo:

    def test_layout(self, tmp_path):
        write_flo(tmp_path / "f.flo", FlowField(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        data = (tmp_path / "f.flo").read_bytes()
        assert len(data) == 28
        assert data[:4] == b"PIEH"
        assert np.frombuffer(data[4:12], dtype="<i4").tolist() == [2, 1]
        assert np.frombuffer(data[12:], dtype="<f4").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_round_trip_at_single_precision(self, tmp_path, rng):
        flow = FlowField(rng.normal(size=(5, 6, 2)))
        write_flo(tmp_path / "f.flo", flow)
        np.testing.assert_array_equal(read_flo(tmp_path / "f.flo").vectors,
                                      flow.vectors.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.flo").write_bytes(b"XXXX" + bytes(24))
        with pytest.raises(ParseError) as info:
            read_flo(tmp_path / "f.flo")
        assert info.value.offset == 0

    def test_truncated(self, tmp_path):
        write_flo(tmp_path / "f.flo", FlowField.zeros(2, 2))
        data = (tmp_path / "f.flo").read_bytes()
        (tmp_path / "f.flo").write_bytes(data[:-4])
        with pytest.raises(ParseError, match="truncated"):
            read_flo(tmp_path / "f.flo")

    def test_flow_dir(self, tmp_path):
        flows = [FlowField(np.full((3, 3, 2), float(i))) for i in range(3)]
        write_flow_dir(tmp_path / "flows", flows)
        assert sorted(p.name for p in (tmp_path / "flows").iterdir()) == \
            ["flow_0001.flo", "flow_0002.flo", "flow_0003.flo"]
        loaded = read_flow_dir(tmp_path / "flows")
        assert [f.vectors[0, 0, 0] for f in loaded] == [0.0, 1.0, 2.0]


class TestMetadata:

    def test_round_trip_keeps_order(self, tmp_path):
        write_metadata(tmp_path / "m.txt", {"kind": "rotation", "omega": 0.05, "frames": 8})
        values = read_metadata(tmp_path / "m.txt")
        assert list(values) == ["kind", "omega", "frames"]
        assert values["omega"] == "0.05"

    def test_comments_and_blank_lines(self, tmp_path):
        (tmp_path / "m.txt").write_text("# header\n\nkind = translation\n")
        assert read_metadata(tmp_path / "m.txt") == {"kind": "translation"}

    def test_malformed_line_offset(self, tmp_path):
        (tmp_path / "m.txt").write_text("a = 1\nbroken\n")
        with pytest.raises(ParseError) as info:
            read_metadata(tmp_path / "m.txt")
        assert info.value.offset == 6

    def test_malformed_line_offset_counts_bytes(self, tmp_path):
        (tmp_path / "m.txt").write_bytes("# é\nk = v\nbroken\n".encode("utf-8"))
        with pytest.raises(ParseError) as info:
            read_metadata(tmp_path / "m.txt")
        assert info.value.offset == 11


class TestSequenceDir:

    def test_round_trip(self, tmp_path, speckle):
        mask = np.ones(speckle.shape, dtype=bool)
        mask[0] = False
        flows = [FlowField.zeros(*speckle.shape)]
        write_sequence(tmp_path / "seq", SequenceDir([speckle, speckle], [mask, mask], flows, {"kind": "x"}))
        loaded = read_sequence(tmp_path / "seq")
        assert len(loaded.frames) == 2
        np.testing.assert_allclose(loaded.frames[1].pixels, speckle.pixels, atol=0.5 / 65535)
        np.testing.assert_array_equal(loaded.masks[0], mask)
        assert len(loaded.flows) == 1
        assert loaded.metadata == {"kind": "x"}
        assert loaded.path == str(tmp_path / "seq")

    def test_optional_parts_missing(self, tmp_path, speckle):
        write_sequence(tmp_path / "seq", SequenceDir([speckle, speckle]))
        loaded = read_sequence(tmp_path / "seq")
        assert loaded.masks is None and loaded.flows is None

    def test_numbering_must_be_contiguous(self, tmp_path, speckle):
        write_pgm(tmp_path / "frame_0001.pgm", speckle)
        write_pgm(tmp_path / "frame_0003.pgm", speckle)
        with pytest.raises(ParseError, match="contiguously"):
            read_sequence(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ParseError, match="no frame"):
            read_sequence(tmp_path)

    def test_frames_must_share_dimensions(self, tmp_path, speckle):
        write_pgm(tmp_path / "frame_0001.pgm", speckle)
        write_pgm(tmp_path / "frame_0002.pgm", Image(np.zeros((4, 4))))
        with pytest.raises(ParseError, match="dimensions"):
            read_sequence(tmp_path)


class TestCheckpoint:

    def test_round_trip_is_bit_identical(self, tmp_path, tiny_arch):
        params = init(tiny_arch, 17)
        write_checkpoint(tmp_path / "c.nmsr", params)
        loaded = read_checkpoint(tmp_path / "c.nmsr", expected_arch=tiny_arch)
        assert loaded.arch == tiny_arch
        assert loaded.seed == 17
        assert encode_checkpoint(loaded) == (tmp_path / "c.nmsr").read_bytes()
        for a, b in zip(loaded.arrays(), params.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_architecture_mismatch(self, tmp_path, tiny_arch):
        write_checkpoint(tmp_path / "c.nmsr", init(tiny_arch, 0))
        with pytest.raises(ConfigurationError):
            read_checkpoint(tmp_path / "c.nmsr", expected_arch=ArchDescriptor((2, 2), (2, 2)))

    def test_bad_magic(self, tiny_arch):
        data = encode_checkpoint(init(tiny_arch, 0))
        with pytest.raises(ParseError):
            decode_checkpoint(b"X" + data[1:])

    def test_truncated(self, tiny_arch):
        data = encode_checkpoint(init(tiny_arch, 0))
        with pytest.raises(ParseError, match="truncated"):
            decode_checkpoint(data[:-1])


class TestFlowToColor:

    def test_zero_field_is_white(self):
        rgb = flow_to_color(FlowField.zeros(4, 5))
        assert rgb.shape == (4, 5, 3)
        assert rgb.dtype == np.uint8
        assert (rgb == 255).all()

    def test_rightward_field_is_red(self):
        flow = FlowField(np.broadcast_to([2.0, 0.0], (3, 3, 2)).copy())
        rgb = flow_to_color(flow, max_magnitude=2.0)
        assert (rgb.reshape(-1, 3) == [255, 0, 0]).all()

    def test_hue_is_continuous(self):
        angles = np.radians(np.arange(361))
        vectors = 0.5 * np.stack([np.cos(angles), np.sin(angles)], axis=-1)[None]
        rgb = flow_to_color(FlowField(vectors), max_magnitude=1.0).astype(int)
        assert np.abs(np.diff(rgb[0], axis=0)).max() < 16

    def test_vortex_sweeps_every_hue(self):
        spec = FlowSpec(kind="lamb_oseen", height=32, width=32, core_radius=6.0,
                        circulation=circulation_for_max_speed(2.0, 6.0))
        vortex = truth_field(spec)
        counts, _ = np.histogram(flow_hue(vortex), bins=12, range=(0.0, 1.0))
        assert (counts > 0).all()
        rgb = flow_to_color(vortex).reshape(-1, 3).astype(int)
        for channel in range(3):
            others = np.delete(rgb, channel, axis=1)
            assert (rgb[:, channel] > others.max(axis=1)).any(), channel

    def test_saturation_grows_with_magnitude(self):
        flow = FlowField(np.array([[[0.5, 0.0], [1.0, 0.0]]]))
        rgb = flow_to_color(flow, max_magnitude=1.0)
        assert rgb[0, 1, 1] < rgb[0, 0, 1]

    def test_rejects_non_positive_maximum(self):
        with pytest.raises(ValueError):
            flow_to_color(FlowField.zeros(2, 2), max_magnitude=0.0)
