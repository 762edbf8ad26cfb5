import math

import numpy as np
import pytest

from vit5 import data as D
from vit5.data import SynthSpec


def test_duplicate_index_bit_identical():
    spec = SynthSpec(noise_std=0.0)
    a = D.generate(spec, "train", [5, 5, 9])
    assert a.images[0].tobytes() == a.images[1].tobytes()
    assert a.images[0].tobytes() != a.images[2].tobytes()


def test_same_spec_same_bytes_with_noise():
    spec = SynthSpec(seed=11)
    assert D.generate(spec, "eval", range(8)).images.tobytes() == D.generate(spec, "eval", range(8)).images.tobytes()


def test_batch_contract():
    spec = SynthSpec.for_task("shape_quadrant", channels=3)
    b = D.generate(spec, "train", range(20))
    assert b.images.shape == (20, 3, 32, 32) and b.images.dtype == np.float32
    assert b.images.min() >= 0 and b.images.max() <= 1
    assert b.labels.max() < spec.num_classes


def test_quadrant_has_16_classes():
    assert SynthSpec.for_task("shape_quadrant").num_classes == len(D.SHAPES) * 4 == 16
    with pytest.raises(ValueError):
        SynthSpec(task="shape_quadrant", num_classes=4)


@pytest.mark.parametrize("task", D.TASKS)
def test_histogram_within_three_sigma(task):
    n = 10000
    spec = SynthSpec.for_task(task, train_size=n)
    k = spec.num_classes
    counts = np.bincount([D.label_of(D.scene_for(spec, "train", i), task) for i in range(n)], minlength=k)
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) <= 3 * sigma), counts


def test_quadrant_scene_inside_its_quadrant():
    spec = SynthSpec.for_task("shape_quadrant")
    for i in range(200):
        s = D.scene_for(spec, "train", i)
        label = D.label_of(s, spec.task)
        assert D.quadrant(s) == label % 4 and s.shape == label // 4
        assert s.size <= s.cx <= D.UNIT - s.size and s.size <= s.cy <= D.UNIT - s.size


def test_crossing_quadrant_boundary_changes_label():
    s = D.Scene(shape=2, cx=D.UNIT // 2 - 1, cy=100, size=50)
    moved = s.translated(1, 0)
    assert D.label_of(s, "shape_quadrant") != D.label_of(moved, "shape_quadrant")
    assert D.label_of(s, "shape_class") == D.label_of(moved, "shape_class")


def test_same_geometry_across_resolutions():
    s = D.Scene(shape=1, cx=512, cy=512, size=256)
    lo, hi = D.coverage(s, 16), D.coverage(s, 32)
    # the axis-aligned square covers exactly the centre half at both scales
    assert lo.sum() * 4 == hi.sum() == 16 * 16
    assert np.all(np.isin(D.coverage(D.Scene(0, 400, 600, 200), 24) * 16, np.arange(17)))


def test_resolution_floor():
    with pytest.raises(ValueError):
        D.generate(SynthSpec(), "train", range(2), resolution=12)


def test_index_out_of_split():
    with pytest.raises(IndexError):
        D.scene_for(SynthSpec(eval_size=4), "eval", 4)


class TestPnm:
    def test_pgm_scaling(self, tmp_path):
        (tmp_path / "3_a.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 51, 204]))
        (b,) = list(D.load_ppm_dir(tmp_path, 2))
        assert b.labels.tolist() == [3]
        assert b.images[0, 0].tolist() == [[0.0, 1.0], [np.float32(0.2), np.float32(0.8)]]

    def test_roundtrip_bytes(self, tmp_path, rng):
        px = rng.integers(0, 256, size=(3, 5, 7))
        D.write_pnm(tmp_path / "a.ppm", px)
        back, maxval = D.read_pnm(tmp_path / "a.ppm")
        assert maxval == 255 and np.array_equal(back, px)
        D.write_pnm(tmp_path / "b.ppm", back)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_sixteen_bit_and_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5 # note\n1 1\n# more\n1000\n" + (700).to_bytes(2, "big"))
        px, maxval = D.read_pnm(tmp_path / "c.pgm")
        assert maxval == 1000 and px[0, 0, 0] == 700

    def test_nearest_hand_trace(self):
        img = np.arange(16).reshape(1, 4, 4)
        # output pixel i samples source floor(i * 4 / 2): rows and cols 0 and 2
        assert D.resize_nearest(img, 2)[0].tolist() == [[0, 2], [8, 10]]
        assert D.resize_nearest(img, 8)[0, :2, :3].tolist() == [[0, 0, 1], [0, 0, 1]]

    def test_named_errors(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(D.PnmMagicError):
            D.read_pnm(tmp_path / "m.pgm")
        (tmp_path / "h.pgm").write_bytes(b"P5\n1 x\n255\n\0")
        with pytest.raises(D.PnmHeaderError):
            D.read_pnm(tmp_path / "h.pgm")
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\0\0")
        with pytest.raises(D.PnmHeaderError):
            D.read_pnm(tmp_path / "t.pgm")
        with pytest.raises(D.LabelParseError):
            D.parse_label("cat_1.pgm")
        with pytest.raises(D.LabelParseError):
            D.parse_label("noid.pgm")

    def test_mixed_channels(self, tmp_path):
        D.write_pnm(tmp_path / "0_a.pgm", np.zeros((2, 2), dtype=int))
        D.write_pnm(tmp_path / "1_b.ppm", np.zeros((3, 2, 2), dtype=int))
        with pytest.raises(D.PnmError):
            list(D.load_ppm_dir(tmp_path, 2))
