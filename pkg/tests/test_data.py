import struct

import numpy as np
import pytest

from sparsetune.data import Dataset, dumps, generate_domain, generate_toy_pair, load_dataset, loads, save_dataset
from sparsetune.errors import StructuralError
from sparsetune.rng import stream


def small():
    return generate_domain(3, 4, stream(0, "data", 0), shape=(3, 8, 8))


def test_round_trip(tmp_path):
    ds = small()
    path = tmp_path / "d.ttds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)
    assert back.n_classes == 3 and back.sample_shape == (3, 8, 8) and len(back) == 12


def test_header_layout():
    blob = dumps(small())
    assert blob[:4] == b"TTDS"
    assert struct.unpack_from("<IIII", blob, 4) == (1, 12, 3, 3)
    assert struct.unpack_from("<3I", blob, 20) == (3, 8, 8)
    assert len(blob) == 20 + 12 + 4 * 12 + 4 * 12 * 3 * 64


def test_corrupt_files_rejected():
    blob = dumps(small())
    with pytest.raises(StructuralError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(StructuralError):
        loads(blob[:-4])
    with pytest.raises(StructuralError):
        loads(blob[:10])
    with pytest.raises(StructuralError):
        loads(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_label_range_checked():
    with pytest.raises(StructuralError):
        dumps(Dataset(np.zeros((1, 3, 2, 2), np.float32), np.array([5]), 2))


def test_same_seed_same_bytes():
    a = [dumps(d) for d in generate_toy_pair(4, 6, 5, 3)]
    b = [dumps(d) for d in generate_toy_pair(4, 6, 5, 3)]
    c = [dumps(d) for d in generate_toy_pair(5, 6, 5, 3)]
    assert a == b and a != c


def test_target_shift_moves_mean():
    base = generate_domain(10, 20, stream(1, "data", 1), style="target", shift=0.0)
    moved = generate_domain(10, 20, stream(1, "data", 1), style="target", shift=0.5)
    assert np.allclose(moved.x - base.x, 0.5, atol=1e-6)


def test_classes_are_mirror_invariant_on_average():
    ds = generate_domain(4, 200, stream(2, "data", 0))
    for k in range(4):
        mean = ds.x[ds.y == k].mean(axis=0)
        assert np.abs(mean - mean[:, :, ::-1]).mean() < 0.1 * np.abs(mean).mean() + 0.05


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_domain(2, 2, np.random.default_rng(0), style="other")
    with pytest.raises(ValueError):
        generate_domain(2, 2, np.random.default_rng(0), shape=(1, 8, 8))
