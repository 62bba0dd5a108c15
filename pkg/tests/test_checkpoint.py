import numpy as np
import pytest

from tdpor import checkpoint


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "denoiser/hidden0.weight": rng.normal(size=(3, 4)),
        "f32": rng.normal(size=(5,)).astype(np.float32),
        "ints": np.arange(6, dtype=np.int64).reshape(2, 3),
        "bytes": np.array([0, 255, 7], dtype=np.uint8),
        "flags": np.array([True, False]),
        "scalar": np.array(3.5),
        "empty": np.zeros((0, 2)),
    }
    path = tmp_path / "x.tdpr"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_header_layout():
    blob = checkpoint.dumps({"a": np.array([1.0])})
    assert blob[:4] == b"TDPR"
    assert int.from_bytes(blob[4:8], "little") == checkpoint.VERSION
    assert int.from_bytes(blob[8:12], "little") == 1


@pytest.mark.parametrize("blob", [b"NOPE" + bytes(8), checkpoint.dumps({"a": np.ones(4)})[:-3]])
def test_corrupt_input_raises(blob):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob)


def test_unknown_version_raises():
    blob = bytearray(checkpoint.dumps({}))
    blob[4] = 99
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(blob))
