import math

import numpy as np
import pytest

from weakdet import checkpoint
from weakdet.errors import CheckpointError
from weakdet.pipeline import Detector, untrained_detector


def sample():
    rng = np.random.default_rng(0)
    tensors = [("a.weight", rng.standard_normal((3, 2, 3, 3)).astype(np.float32)),
               ("a.bias", rng.standard_normal(3).astype(np.float32)),
               ("scalar0d", np.array(1.5, np.float32))]
    scalars = {"beta_x": math.sqrt(12), "beta_y": 3.1, "flag": 1.0}
    return tensors, scalars


def test_round_trip_exact():
    tensors, scalars = sample()
    t, s = checkpoint.loads(checkpoint.dumps(tensors, scalars))
    assert list(t) == [n for n, _ in tensors]
    for name, arr in tensors:
        assert t[name].dtype == np.float32 and np.array_equal(t[name], arr)
    assert s == scalars
    assert s["beta_x"] == math.sqrt(12)          # float64, bit-exact


def test_resave_byte_identical():
    data = checkpoint.dumps(*sample())
    t, s = checkpoint.loads(data)
    assert checkpoint.dumps(t.items(), s) == data


def test_bad_magic():
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"XXXX" + bytes(20))


@pytest.mark.parametrize("pos", [6, 20, -10])
def test_flipped_byte_detected(pos):
    data = bytearray(checkpoint.dumps(*sample()))
    data[pos] ^= 0x40
    with pytest.raises(CheckpointError):
        checkpoint.loads(bytes(data))


def test_truncated():
    data = checkpoint.dumps(*sample())
    with pytest.raises(CheckpointError):
        checkpoint.loads(data[:len(data) // 2])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "none.wbx")


def test_detector_round_trip(tmp_path):
    det = untrained_detector(48, 0.125, seed=2)
    det.post.beta_x = 2.75
    det.save(tmp_path / "m.wbx")
    back = Detector.load(tmp_path / "m.wbx")
    assert back.post.beta_x == 2.75 and back.image_h == 48
    x = np.random.default_rng(0).random((2, 3, 48, 48)).astype(np.float32)
    c0, p0 = det.predict(x)
    c1, p1 = back.predict(x)
    np.testing.assert_array_equal(c0, c1)
    np.testing.assert_array_equal(p0, p1)
    back.save(tmp_path / "n.wbx")
    assert (tmp_path / "m.wbx").read_bytes() == (tmp_path / "n.wbx").read_bytes()


def test_detector_shape_mismatch(tmp_path):
    det = untrained_detector(48, 0.125)
    tensors = [(n, a) for n, a in det.tensors()]
    tensors[0] = (tensors[0][0], np.zeros((1, 1), np.float32))
    checkpoint.save(tmp_path / "bad.wbx", tensors, det.scalars())
    with pytest.raises(CheckpointError):
        Detector.load(tmp_path / "bad.wbx")


def test_detector_missing_tensor(tmp_path):
    det = untrained_detector(48, 0.125)
    checkpoint.save(tmp_path / "bad.wbx", list(det.tensors())[1:], det.scalars())
    with pytest.raises(CheckpointError):
        Detector.load(tmp_path / "bad.wbx")
