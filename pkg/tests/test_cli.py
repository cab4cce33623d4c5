import json
import re
import struct
import time

import numpy as np
import pytest
from scipy.signal import correlate

from afem.cli import main
from afem.fem import solve_forward
from afem.io import read_checkpoint, read_dataset, write_checkpoint
from afem.nn import AdamState, ModelConfig, init_params
from afem.pipeline import TrainState, source_term


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.afem"
    assert main(["generate", "--nx", "4", "--ny", "4", "--n-train", "2", "--n-test", "1",
                 "--seed", "7", "--out", str(path)]) == 0
    return path


def test_generate_layout(data):
    raw = data.read_bytes()
    (meta_len,) = struct.unpack_from("<I", raw, 24)
    assert len(raw) == 28 + meta_len + 3 * (8 + 16 * 25) + 16
    assert read_dataset(data) is not None


def test_generate_deterministic(data, tmp_path):
    out = tmp_path / "again.afem"
    main(["generate", "--nx", "4", "--ny", "4", "--n-train", "2", "--n-test", "1",
          "--seed", "7", "--out", str(out)])
    assert out.read_bytes() == data.read_bytes()


def test_generate_noise_free_matches_recompute(tmp_path):
    out = tmp_path / "clean.afem"
    main(["generate", "--nx", "6", "--ny", "6", "--n-train", "2", "--n-test", "1",
          "--noise", "0", "--out", str(out)])
    ds = read_dataset(out)
    f = source_term(ds.mesh, ds.config)
    for s in ds.train + ds.test:
        u = solve_forward(s.kappa_exact, f, 1e-12)
        assert np.max(np.abs(u.dofs - s.u_obs.dofs)) <= 1e-8 * np.max(np.abs(u.dofs))


def test_train_zero_epochs(data, tmp_path, capsys):
    ck, rep = tmp_path / "c.ckp", tmp_path / "r.json"
    assert main(["train", "--data", str(data), "--epochs", "0", "--ckpt-out", str(ck),
                 "--report-out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert len(report["loss_history"]) == 1 and report["epochs_completed"] == 0
    state, _ = read_checkpoint(ck)
    ref = init_params(ModelConfig(grid_shape=(5, 5)), 0)
    np.testing.assert_array_equal(state.params.flatten(), ref.flatten())


def test_tiny_train_run(data, tmp_path, capsys):
    ck, rep, log = tmp_path / "c.ckp", tmp_path / "r.json", tmp_path / "m.log"
    t0 = time.perf_counter()
    code = main(["train", "--data", str(data), "--epochs", "2", "--ckpt-out", str(ck),
                 "--report-out", str(rep), "--log", str(log)])
    assert code == 0 and time.perf_counter() - t0 < 30
    assert ck.exists() and rep.exists()
    report = json.loads(rep.read_text())
    assert {"loss_history", "seeds", "train_config", "gen_config", "version", "wall_time_s"} <= set(report)
    lines = log.read_text().splitlines()
    assert [int(l.split()[0]) for l in lines] == [0, 1, 2]
    assert float(lines[-1].split()[1]) == pytest.approx(report["loss_history"][-1], rel=1e-12)


def test_resume_continues_trajectory(data, tmp_path):
    full, half, rest = (tmp_path / n for n in ("full", "half", "rest"))
    base = ["train", "--data", str(data), "--lr", "1e-2", "--batch", "1"]
    main(base + ["--epochs", "4", "--ckpt-out", str(full) + ".ckp", "--report-out", str(full) + ".json"])
    main(base + ["--epochs", "2", "--ckpt-out", str(half) + ".ckp"])
    main(base + ["--epochs", "4", "--resume", str(half) + ".ckp", "--ckpt-out", str(rest) + ".ckp",
                 "--report-out", str(rest) + ".json"])
    a = json.loads((tmp_path / "full.json").read_text())["loss_history"]
    b = json.loads((tmp_path / "rest.json").read_text())["loss_history"]
    assert len(a) == len(b) == 5
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-12)


def test_resume_version_mismatch_exits_io(data, tmp_path):
    ck = tmp_path / "c.ckp"
    main(["train", "--data", str(data), "--epochs", "0", "--ckpt-out", str(ck)])
    raw = bytearray(ck.read_bytes())
    struct.pack_into("<I", raw, 4, 2)
    ck.write_bytes(bytes(raw))
    assert main(["train", "--data", str(data), "--resume", str(ck), "--ckpt-out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(data, tmp_path):
    ck = tmp_path / "c.ckp"
    code = main(["train", "--data", str(data), "--epochs", "50", "--lr", "1e4", "--batch", "1",
                 "--alpha", "1", "--ckpt-out", str(ck)])
    assert code == 3
    state, _ = read_checkpoint(ck)
    assert np.all(np.isfinite(state.params.flatten()))


def _zero_final_layer_ckpt(path, grid):
    params = init_params(ModelConfig(grid_shape=grid), 1)
    params.tensors["conv3.weight"][:] = 0.0
    params.tensors["conv3.bias"][:] = 0.0
    write_checkpoint(TrainState(params, AdamState.zeros_like(params)), path)


def test_eval_zero_predictor_is_100_percent(data, tmp_path, capsys):
    ck = tmp_path / "z.ckp"
    _zero_final_layer_ckpt(ck, (5, 5))
    for split in ("test", "train"):
        assert main(["eval", "--data", str(data), "--ckpt", str(ck), "--split", split]) == 0
        out = capsys.readouterr().out
        assert f"R ({split}," in out and "= 100.00%" in out


def test_eval_shape_mismatch(data, tmp_path):
    ck = tmp_path / "z.ckp"
    _zero_final_layer_ckpt(ck, (9, 9))
    assert main(["eval", "--data", str(data), "--ckpt", str(ck)]) == 1


# --- independent recomputation of R straight from the file bytes ---

def _read_dataset_raw(raw):
    _, nx, ny, n_train, n_test = struct.unpack_from("<5I", raw, 4)
    (meta_len,) = struct.unpack_from("<I", raw, 24)
    pos, n = 28 + meta_len, (nx + 1) * (ny + 1)
    recs = []
    for _ in range(n_train + n_test):
        pos += 8
        k = np.frombuffer(raw, "<f8", n, pos)
        u = np.frombuffer(raw, "<f8", n, pos + 8 * n)
        pos += 16 * n
        recs.append((k, u))
    mean, std = struct.unpack_from("<2d", raw, pos)
    return nx, ny, recs[n_train:], mean, std


def _read_ckpt_raw(raw):
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    meta = json.loads(raw[12:12 + meta_len])
    pos = 12 + meta_len
    _, _, count = struct.unpack_from("<3Q", raw, pos)
    flat = np.frombuffer(raw, "<f8", count, pos + 24)
    out, i = [], 0
    for _, shape in meta["layout"]:
        size = int(np.prod(shape))
        out.append(flat[i:i + size].reshape(shape))
        i += size
    return out


def _cnn(tensors, x):
    h = x[None]
    layers = list(zip(tensors[::2], tensors[1::2]))
    for li, (w, b) in enumerate(layers):
        hp = np.pad(h, ((0, 0), (1, 1), (1, 1)))
        h = np.stack([sum(correlate(hp[c], w[o, c], mode="valid") for c in range(w.shape[1])) + b[o]
                      for o in range(w.shape[0])])
        if li < len(layers) - 1:
            h = np.tanh(h)
    return h[0]


def _p1_mass(nx, ny):
    idx = lambda i, j: j * (nx + 1) + i
    n = (nx + 1) * (ny + 1)
    M = np.zeros((n, n))
    local = (np.ones((3, 3)) + np.eye(3)) / 12 * (0.5 / (nx * ny))
    for j in range(ny):
        for i in range(nx):
            for tri in ((idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))):
                M[np.ix_(tri, tri)] += local
    return M


def test_eval_report_matches_independent_recompute(tmp_path):
    d, ck, rep = tmp_path / "d.afem", tmp_path / "c.ckp", tmp_path / "r.json"
    main(["generate", "--nx", "5", "--ny", "3", "--n-train", "3", "--n-test", "4", "--seed", "2", "--out", str(d)])
    main(["train", "--data", str(d), "--epochs", "2", "--batch", "1", "--ckpt-out", str(ck)])
    assert main(["eval", "--data", str(d), "--ckpt", str(ck), "--report-out", str(rep)]) == 0
    r_cli = json.loads(rep.read_text())["R"]

    nx, ny, test, mean, std = _read_dataset_raw(d.read_bytes())
    tensors = _read_ckpt_raw(ck.read_bytes())
    M = _p1_mass(nx, ny)
    ratios = []
    for k, u in test:
        pred = _cnn(tensors, (u.reshape(ny + 1, nx + 1) - mean) / std).ravel()
        e = pred - k
        ratios.append((e @ M @ e) / (k @ M @ k))
    assert r_cli == pytest.approx(np.mean(ratios), rel=1e-10)


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    rows = [l for l in out.splitlines() if l.endswith("PASS") or l.endswith("FAIL")]
    assert len(rows) == 6 and all(r.endswith("PASS") for r in rows)


def test_gradcheck_minimal_mesh(capsys):
    assert main(["gradcheck", "--nx", "2", "--ny", "2"]) == 0


def test_gradcheck_injected_bug_fails(capsys):
    assert main(["gradcheck", "--inject-bug"]) == 3
    out = capsys.readouterr().out
    assert "FAIL" in out and "GRADIENT CHECK FAILED" in out


def test_convergence_orders(capsys):
    assert main(["convergence", "--levels", "8,16,32"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    errors = [float(r.split()[1]) for r in rows]
    orders = [float(r.split()[2]) for r in rows[1:]]
    assert all(a > b for a, b in zip(errors, errors[1:]))
    assert all(abs(o - 2.0) < 0.1 for o in orders)


@pytest.mark.parametrize("argv", [
    ["convergence", "--levels", "8"],
    ["generate"],
    ["bogus"],
    ["train", "--data", "x"],
    ["generate", "--out", "x", "--nx", "many"],
])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_missing_file_exits_2(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "nope"), "--ckpt", str(tmp_path / "nope")]) == 2


def test_corrupt_dataset_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.afem"
    bad.write_bytes(b"AFEM\x01\x00")
    assert main(["eval", "--data", str(bad), "--ckpt", str(bad)]) == 2
    assert re.search(r"offset \d+", capsys.readouterr().err)
