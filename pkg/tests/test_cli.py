import json

import pytest

from dtnabc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main


def tiny(tmp_path, name="tiny", **over):
    d = {
        "name": name,
        "model": "free_1d",
        "grid": {"box": [[-4.0, 2.0]], "h": 0.05, "open_faces": [[False, True]]},
        "stencil": "fd5",
        "bc": {"kind": "abc", "variant": "first_limit", "nodes": [10.0]},
        "dt": 0.001,
        "T": 0.05,
        "stride": 10,
        "initial": {"k0": 5.0, "xc": -1.0},
    }
    d.update(over)
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(d))
    return p


def test_run_writes_observables(tmp_path, capsys):
    cfg = tiny(tmp_path, snapshots=[0.05])
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert "observables.csv" in files and "config.json" in files
    assert any(f.startswith("snapshot_t") for f in files)
    rows = (tmp_path / "out" / "observables.csv").read_text().splitlines()
    assert rows[0].startswith("t,N,N_ref,W,err_N") and len(rows) == 1 + 6


def test_runs_are_byte_identical(tmp_path):
    cfg = tiny(tmp_path)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--threads", "1"]) == EXIT_OK
    assert (tmp_path / "a" / "observables.csv").read_bytes() == (tmp_path / "b" / "observables.csv").read_bytes()


def test_zero_length_run_has_one_row(tmp_path):
    cfg = tiny(tmp_path, T=0.0)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert len((tmp_path / "o" / "observables.csv").read_text().splitlines()) == 2


def test_invalid_config_exit_code(tmp_path, capsys):
    cfg = tiny(tmp_path, dt=-1.0, bc={"kind": "abc", "variant": "first_twopoint", "nodes": [1.0]})
    assert main(["run", "--config", str(cfg)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "dt" in err and "needs 2 nodes" in err


def test_missing_config_exit_code(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_VALIDATION
    assert main(["run"]) == EXIT_VALIDATION
    assert main(["frobnicate"]) == EXIT_VALIDATION


def test_runtime_failure_exit_code(tmp_path, capsys):
    cfg = tiny(tmp_path, dtn={"max_gamma": 1})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "exceeds" in capsys.readouterr().err


def test_dtn_build_is_idempotent(tmp_path, capsys):
    cfg = tiny(tmp_path, bc={"kind": "abc", "variant": "first_twopoint", "nodes": [10.0, 20.0]})
    cache = tmp_path / "cache"
    assert main(["dtn-build", "--config", str(cfg), "--out", str(cache)]) == EXIT_OK
    first = {p.name: p.read_bytes() for p in cache.iterdir()}
    assert len(first) == 2 and all(b[:4] == b"QDTN" for b in first.values())
    capsys.readouterr()
    assert main(["dtn-build", "--config", str(cfg), "--out", str(cache)]) == EXIT_OK
    assert capsys.readouterr().out.count("reused") == 2
    assert {p.name: p.read_bytes() for p in cache.iterdir()} == first


def test_dtn_build_refuses_stale_cache(tmp_path):
    cache = tmp_path / "cache"
    cfg = tiny(tmp_path, bc={"kind": "abc", "variant": "zeroth", "nodes": [20.0]})
    assert main(["dtn-build", "--config", str(cfg), "--out", str(cache)]) == EXIT_OK
    # same name, different grid: the cached kernel no longer matches
    cfg = tiny(tmp_path, grid={"box": [[-4.0, 2.0]], "h": 0.1, "open_faces": [[False, True]]},
               bc={"kind": "abc", "variant": "zeroth", "nodes": [20.0]})
    assert main(["dtn-build", "--config", str(cfg), "--out", str(cache)]) == EXIT_RUNTIME
    assert main(["dtn-build", "--config", str(cfg), "--out", str(cache), "--force"]) == EXIT_OK


def test_dtn_build_nodes_override(tmp_path, capsys):
    cfg = tiny(tmp_path)
    assert main(["dtn-build", "--config", str(cfg), "--out", str(tmp_path / "c"), "--nodes", "10", "11", "20", "21"]) == EXIT_OK
    assert len(list((tmp_path / "c").glob("*.qdtn"))) == 4
    assert main(["dtn-build", "--config", str(cfg), "--nodes", "-1"]) == EXIT_VALIDATION


def test_report_flags_dirichlet(tmp_path, capsys):
    d = tiny(tmp_path, "dir", bc={"kind": "dirichlet"})
    a = tiny(tmp_path, "abc", T=0.6, stride=100, initial={"k0": 5.0, "xc": 0.5})
    assert main(["run", "--config", str(d), "--out", str(tmp_path / "runs" / "dir")]) == EXIT_OK
    assert main(["run", "--config", str(a), "--out", str(tmp_path / "runs" / "abc")]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "summary.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    lines = {ln.split()[0]: ln for ln in out.splitlines()[1:] if ln.strip()}
    assert "non-decaying N" in lines["dir"]
    assert "non-decaying N" not in lines["abc"]
    assert "W monotone" in lines["abc"]
    assert (tmp_path / "summary.csv").read_text().startswith("run,bc,")


def test_report_cap_table(tmp_path, capsys):
    for eta in (0.1, 1.0):
        cfg = tiny(tmp_path, f"cap{eta}", grid={"box": [[-12.0, 3.0]], "h": 0.1}, T=0.02,
                   bc={"kind": "cap", "eta": eta}, initial={"k0": 5.0, "xc": -6.0})
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r" / f"cap{eta}")]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(tmp_path / "r")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "complex absorbing potential sweep" in out
    tail = out.split("complex absorbing potential sweep")[1].splitlines()
    assert tail[2].startswith("0.1") and tail[3].startswith("1")


def test_report_empty_input(tmp_path, capsys):
    assert main(["report"]) == EXIT_OK
    assert main(["report", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0].startswith("run")


def test_report_schema_mismatch(tmp_path):
    (tmp_path / "observables.csv").write_text("time,N\n0,1\n")
    assert main(["report", str(tmp_path / "observables.csv")]) == EXIT_VALIDATION


def test_schema_and_listing(capsys):
    assert main(["schema"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["title"] == "ExperimentConfig"
    assert main(["schema", "--list"]) == EXIT_OK
    assert "bench_1d_order2" in capsys.readouterr().out


def test_bundled_name_accepted(tmp_path, capsys):
    # validation only: a bundled name resolves, a bad override would not
    assert main(["dtn-build", "--config", "bench_1d_order0", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert "n_Gamma=2" in capsys.readouterr().out
