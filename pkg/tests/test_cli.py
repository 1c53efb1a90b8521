"""CLI contract tests: subcommands, exit codes, output files, sweeps,
campaigns, reporting."""

import json

from teesim.cli import main

SMALL_ADAM = {
    "mode": "tensortee",
    "workload": {"name": "adam", "tensors": 1,
                 "tensor_bytes_min": 8192, "tensor_bytes_max": 8192,
                 "threads": 1, "iterations": 3},
    "crypto": {"functional": False},
}


def write_cfg(tmp_path, data, name="cfg.json") -> str:
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def test_run_adam_writes_metrics(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_ADAM)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["workload"] == "adam" and m["mode"] == "tensortee"
    assert "hit_in" in m["hit_rates"]
    assert (out / "meta_table.json").exists()


def test_run_bad_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, {"mode": "tensortee", "bogus_section": {}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_run_bad_json_exits_2(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_run_unknown_workload_field_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, {"workload": {"name": "adam", "nope": 1}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, SMALL_ADAM)
    monkeypatch.setenv("TENSORTEE_SEED", "0x123")
    out = tmp_path / "o1"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    monkeypatch.setenv("TENSORTEE_SEED", "not-an-int")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o2")]) == 2


def test_attack_campaign_full_detection(tmp_path):
    out = tmp_path / "atk"
    assert main(["run", "--attack", "bitflip", "--trials", "50",
                 "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["detection_rate"] == 1.0


def test_sweep_mac_granularity(tmp_path):
    cfg = write_cfg(tmp_path, {
        "mode": "sgx_mgx",
        "workload": {"name": "npu_stream", "zero_tensor_bytes": 16384},
        "crypto": {"functional": False},
    })
    out = tmp_path / "sweep"
    assert main(["run", "--config", cfg,
                 "--sweep", "mac_granularity=64,256,1024,4096",
                 "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 5  # header + 4 points
    assert lines[0].startswith("mac_granularity,")
    for g in (64, 256, 1024, 4096):
        assert (out / f"mac_granularity_{g}" / "metrics.json").exists()


def test_sweep_bad_axis_exits_2(tmp_path):
    assert main(["run", "--sweep", "nonsense=1,2",
                 "--out", str(tmp_path / "s")]) == 2


def test_report_over_three_modes(tmp_path):
    root = tmp_path / "runs"
    for mode in ("nonsecure", "sgx_mgx", "tensortee"):
        sub = root / mode
        sub.mkdir(parents=True)
        (sub / "metrics.json").write_text(json.dumps({
            "workload": "zero", "mode": mode,
            "total_ticks": {"nonsecure": 1000, "sgx_mgx": 3000,
                            "tensortee": 1080}[mode],
            "phases": {"npu_fwd": 400, "cpu_adam": 300},
        }))
    assert main(["report", str(root)]) == 0
    perf = (root / "performance.csv").read_text()
    assert "NonSecure" in perf and "SGX+MGX" in perf and "TensorTEE" in perf
    norm = {line.split(",")[1]: float(line.split(",")[3])
            for line in perf.strip().splitlines()[1:]}
    assert norm["NonSecure"] == 1.0
    assert norm["SGX+MGX"] == 3.0
    assert (root / "breakdown.csv").exists()


def test_report_empty_dir_exits_2(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 2


def test_trace_dump_stdout_and_file(tmp_path, capsys):
    assert main(["trace-dump", "--workload", "gemm", "--limit", "5"]) == 0
    outlines = capsys.readouterr().out.strip().splitlines()
    assert len(outlines) == 5
    target = tmp_path / "t.trace.gz"
    cfg = write_cfg(tmp_path, SMALL_ADAM)
    assert main(["trace-dump", "--config", cfg, "--workload", "adam",
                 "--out-file", str(target)]) == 0
    from teesim.workloads import read_trace
    # 8 KiB tensor = 128 lines: (4 + 3 streams) x 128 x 3 iterations
    assert len(read_trace(str(target))) == 7 * 128 * 3


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "5/5 checks passed" in out
    assert "FAIL" not in out
