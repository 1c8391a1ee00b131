import numpy as np
import pytest

from tacofl import engine, runio
from tacofl.runio import RunDirError, load_run, read_fcsm, write_fcsm, write_run

from conftest import small_cfg


def test_fcsm_roundtrip(tmp_path, rng):
    v = rng.normal(size=17)
    write_fcsm(tmp_path / "w.fcsm", v)
    raw = (tmp_path / "w.fcsm").read_bytes()
    assert raw[:4] == b"FCSM" and len(raw) == 16 + 8 * 17
    np.testing.assert_array_equal(read_fcsm(tmp_path / "w.fcsm"), v)


def test_fcsm_errors(tmp_path):
    p = tmp_path / "bad.fcsm"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(RunDirError):
        read_fcsm(p)
    write_fcsm(p, np.ones(3))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(RunDirError):
        read_fcsm(p)


def test_vector_sidecar_roundtrip(tmp_path, rng):
    named = [("a", rng.normal(size=3)), ("r0/upload/2", rng.normal(size=5))]
    runio.write_vectors(tmp_path / "v.bin", named)
    back = runio.read_vectors(tmp_path / "v.bin")
    assert list(back) == ["a", "r0/upload/2"]
    for k, v in named:
        np.testing.assert_array_equal(back[k], v)


def test_run_roundtrip(tmp_path):
    cfg = small_cfg("taco", freeloaders=[4])
    setup = engine.build_setup(cfg)
    tr = engine.Simulator(cfg, setup=setup).run()
    write_run(tmp_path / "run", tr, setup)
    names = {p.name for p in (tmp_path / "run").iterdir()}
    assert {"config.toml", "trace.csv", "vectors.bin", "detection.csv", "metrics.csv",
            "partition.csv", "final_w.fcsm", "final_z.fcsm", "status.json"} <= names
    back = load_run(tmp_path / "run")
    assert back.cfg == tr.cfg
    np.testing.assert_array_equal(back.w_final, tr.w_final)
    np.testing.assert_array_equal(back.z_final, tr.z_final)
    assert back.accuracies == tr.accuracies
    for a, b in zip(back.records, tr.records):
        np.testing.assert_array_equal(a.delta_next, b.delta_next)
        np.testing.assert_array_equal(a.tilde_delta, b.tilde_delta)
        assert a.alpha == pytest.approx(b.alpha, rel=0, abs=0)
        assert a.flagged == b.flagged and a.expelled == b.expelled
        assert set(a.uploads) == set(b.uploads)


def test_refuses_non_empty_dir(tmp_path):
    (tmp_path / "x").write_text("keep")
    tr = engine.run(small_cfg("fedavg", rounds=1))
    with pytest.raises(RunDirError):
        write_run(tmp_path, tr)
    write_run(tmp_path, tr, force=True)
    assert (tmp_path / "trace.csv").is_file()


def test_load_run_missing_file(tmp_path):
    write_run(tmp_path / "r", engine.run(small_cfg("fedavg", rounds=1)))
    (tmp_path / "r" / "vectors.bin").unlink()
    with pytest.raises(RunDirError):
        load_run(tmp_path / "r")


def test_zero_rounds(tmp_path):
    tr = engine.run(small_cfg("fedavg", rounds=0))
    write_run(tmp_path / "r", tr)
    back = load_run(tmp_path / "r")
    assert back.records == []
    np.testing.assert_array_equal(back.w_final, tr.w0)
