import os
import struct

import numpy as np
import pytest

from axiombench import container


def sample_tensors(rng):
    return {
        "weights": rng.standard_normal((3, 4, 5)),
        "bias": rng.standard_normal(7),
        "scalar": np.array(2.5),
    }


def test_roundtrip_is_bit_exact(rng):
    tensors = sample_tensors(rng)
    back = container.loads_tensors(container.dumps_tensors(tensors))
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == np.asarray(arr).shape
        assert np.array_equal(back[name], arr)


def test_file_roundtrip_and_hash(tmp_path, rng):
    path = str(tmp_path / "t.axbm")
    digest = container.save_tensors(path, sample_tensors(rng))
    assert container.content_hash(path) == digest
    back = container.load_tensors(path)
    assert np.array_equal(back["bias"], sample_tensors(rng)["bias"])


def test_no_temp_file_left_behind(tmp_path, rng):
    path = str(tmp_path / "t.axbm")
    container.save_tensors(path, sample_tensors(rng))
    assert os.listdir(tmp_path) == ["t.axbm"]


def test_magic_enforced():
    with pytest.raises(container.ContainerError, match="magic"):
        container.loads_tensors(b"NOPE" + b"\x00" * 20)


def test_version_enforced(rng):
    data = bytearray(container.dumps_tensors(sample_tensors(rng)))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(container.ContainerError, match="version"):
        container.loads_tensors(bytes(data))


def test_truncation_detected(rng):
    data = container.dumps_tensors(sample_tensors(rng))
    with pytest.raises(container.ContainerError, match="truncated"):
        container.loads_tensors(data[:-4])


def test_trailing_bytes_detected(rng):
    data = container.dumps_tensors(sample_tensors(rng))
    with pytest.raises(container.ContainerError, match="trailing"):
        container.loads_tensors(data + b"\x00")


def test_duplicate_names_detected(rng):
    one = container.dumps_tensors({"x": np.zeros(2)})
    entry = one[12:]
    forged = container.MAGIC + struct.pack("<II", container.VERSION, 2) \
        + entry + entry
    with pytest.raises(container.ContainerError, match="duplicate"):
        container.loads_tensors(forged)


def test_empty_name_rejected():
    with pytest.raises(container.ContainerError, match="non-empty"):
        container.dumps_tensors({"": np.zeros(1)})


def test_zero_dim_tensor_roundtrip():
    back = container.loads_tensors(
        container.dumps_tensors({"s": np.array(1.5)}))
    assert back["s"].shape == () and back["s"] == 1.5


def test_order_preserved(rng):
    tensors = {f"t{i}": rng.standard_normal(2) for i in range(10)}
    back = container.loads_tensors(container.dumps_tensors(tensors))
    assert list(back) == [f"t{i}" for i in range(10)]
