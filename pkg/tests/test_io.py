import json
import struct

import numpy as np
import pytest

from afem.errors import DatasetFormatError
from afem.io import (
    CheckpointVersionError,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    dataset_from_bytes,
    dataset_to_bytes,
    read_dataset,
    write_dataset,
    write_report,
)
from afem.nn import AdamState, ModelConfig, init_params
from afem.pipeline import GenConfig, TrainState, generate_dataset


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GenConfig(n_train=2, n_test=1, nx=4, ny=3, seed=9))


def test_dataset_round_trip_is_byte_identical(ds, tmp_path):
    raw = dataset_to_bytes(ds)
    back = dataset_from_bytes(raw)
    assert dataset_to_bytes(back) == raw
    write_dataset(back, tmp_path / "d.afem")
    assert (tmp_path / "d.afem").read_bytes() == raw
    again = read_dataset(tmp_path / "d.afem")
    assert again.config == ds.config
    assert [s.seed for s in again.train + again.test] == [s.seed for s in ds.train + ds.test]
    np.testing.assert_array_equal(again.test[0].u_obs.dofs, ds.test[0].u_obs.dofs)


def test_dataset_layout(ds):
    raw = dataset_to_bytes(ds)
    assert raw[:4] == b"AFEM"
    version, nx, ny, n_train, n_test = struct.unpack_from("<5I", raw, 4)
    assert (version, nx, ny, n_train, n_test) == (1, 4, 3, 2, 1)
    (meta_len,) = struct.unpack_from("<I", raw, 24)
    meta = json.loads(raw[28:28 + meta_len])
    assert meta["noise"] == ds.config.noise
    n = 5 * 4
    record = 8 + 16 * n
    assert len(raw) == 28 + meta_len + 3 * record + 16
    (seed0,) = struct.unpack_from("<Q", raw, 28 + meta_len)
    assert seed0 == ds.train[0].seed
    mean, std = struct.unpack_from("<2d", raw, len(raw) - 16)
    assert (mean, std) == (ds.norm_mean, ds.norm_std)


def test_bad_magic_reports_offset(ds):
    raw = bytearray(dataset_to_bytes(ds))
    raw[:4] = b"XFEM"
    with pytest.raises(DatasetFormatError) as info:
        dataset_from_bytes(bytes(raw))
    assert info.value.offset == 0
    assert "byte offset 0" in str(info.value)


@pytest.mark.parametrize("cut", [2, 10, 30, 200, -1])
def test_truncated_file_reports_offset(ds, cut):
    raw = dataset_to_bytes(ds)
    short = raw[:cut]
    with pytest.raises(DatasetFormatError) as info:
        dataset_from_bytes(short)
    assert 0 <= info.value.offset <= len(short)


def test_trailing_bytes_rejected(ds):
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(dataset_to_bytes(ds) + b"\0")


def test_count_mismatch_rejected(ds):
    raw = bytearray(dataset_to_bytes(ds))
    struct.pack_into("<I", raw, 16, 5)
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(bytes(raw))


def _state(seed=3):
    params = init_params(ModelConfig(grid_shape=(4, 5)), seed)
    rng = np.random.default_rng(seed)
    adam = AdamState(
        {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()},
        {k: rng.random(v.shape) for k, v in params.tensors.items()},
        step=17,
    )
    return TrainState(params, adam, epoch=4, history=[1.0, 0.5, 0.25, 0.125, 0.1])


def test_checkpoint_round_trip():
    state = _state()
    raw = checkpoint_to_bytes(state, {"note": "x"})
    back, extra = checkpoint_from_bytes(raw)
    assert extra == {"note": "x"}
    assert back.epoch == 4 and back.history == state.history
    assert back.adam.step == 17 and back.params.seed == 3
    assert back.params.config == state.params.config
    for k in state.params.tensors:
        np.testing.assert_array_equal(back.params.tensors[k], state.params.tensors[k])
        np.testing.assert_array_equal(back.adam.m[k], state.adam.m[k])
        np.testing.assert_array_equal(back.adam.v[k], state.adam.v[k])
    assert checkpoint_to_bytes(back, extra) == raw


def test_checkpoint_version_mismatch():
    raw = bytearray(checkpoint_to_bytes(_state()))
    struct.pack_into("<I", raw, 4, 99)
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(bytes(raw))


def test_checkpoint_truncated():
    raw = checkpoint_to_bytes(_state())
    with pytest.raises(DatasetFormatError):
        checkpoint_from_bytes(raw[:-8])


def test_report_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_report({"R": float("nan")}, tmp_path / "r.json")
    write_report({"R": 0.5, "h": [1.0, 2.0]}, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["R"] == 0.5


def test_atomic_write_leaves_no_temp_files(ds, tmp_path):
    write_dataset(ds, tmp_path / "a.afem")
    assert [p.name for p in tmp_path.iterdir()] == ["a.afem"]
