import csv
import json

import pytest

from dds_sim import cli
from dds_sim.errors import DDSError, InvariantViolation, Status
from dds_sim.harness.config import config_schema, load_config, parse_config
from dds_sim.harness.scenario import check_invariants, run_scenario

SMALL = {"workload": {"total_ops": 400, "keys": 128, "requests_per_message": 4,
                      "outstanding_messages": 2, "connections": 2},
         "dpu": {"device_capacity": 64 << 20, "table_capacity": 1024}}


def cfg(*overrides, **top):
    return parse_config({**SMALL, **top}, list(overrides))


def test_overrides_and_validation():
    c = cfg("workload.read_fraction=0.25", "director.cores=2", "seed=9")
    assert (c.workload.read_fraction, c.director.cores, c.seed) == (0.25, 2, 9)
    for bad in (["nope=1"], ["workload.read_fraction=2"], ["dpu.ring_capacity=1000"], ["seed"],
                ["director.signatures=['garbage']"], ["workload.total_ops.x=1"]):
        with pytest.raises(DDSError) as e:
            cfg(*bad)
        assert e.value.status is Status.CONFIG_INVALID
    assert "workload" in config_schema()["properties"]


def test_load_config_errors(tmp_path):
    (tmp_path / "list.yaml").write_text("- 1\n")
    for p in (tmp_path / "list.yaml", tmp_path / "missing.yaml"):
        with pytest.raises(DDSError):
            load_config(p)


@pytest.mark.parametrize("mode", ["off", "library_only", "full_offload"])
def test_modes_complete_cleanly(mode):
    r = run_scenario(cfg(mode=mode)).report
    assert r.completions == 400 and r.host_served + r.dpu_served == 400
    if mode != "full_offload":
        assert r.dpu_served == 0


def test_read_only_payloads_match_across_modes():
    digests = []
    for mode in ("off", "full_offload"):
        res = run_scenario(cfg("workload.read_fraction=1.0", mode=mode))
        digests.append(res.results.digests)
    assert digests[0] == digests[1]


def test_write_only_never_offloaded():
    r = run_scenario(cfg("workload.read_fraction=0")).report
    assert r.dpu_served == 0 and r.host_served == 400


def test_zero_ops():
    r = run_scenario(cfg("workload.total_ops=0")).report
    assert r.completions == 0 and r.host_served == r.dpu_served == 0


def test_tampered_report_is_rejected():
    res = run_scenario(cfg())
    res.report.dpu_served += 1
    with pytest.raises(InvariantViolation, match="!= total"):
        check_invariants(res.world, res.report, res.routes)
    res.report.dpu_served -= 1
    res.world.results.issued -= 1
    with pytest.raises(InvariantViolation, match="issued"):
        check_invariants(res.world, res.report, res.routes)


def test_same_seed_same_report():
    a = run_scenario(cfg()).report.deterministic()
    b = run_scenario(cfg()).report.deterministic()
    c = run_scenario(cfg("seed=1")).report.deterministic()
    assert a == b
    assert a["payload_digest"] != c["payload_digest"] and a["trace_hash"] != c["trace_hash"]


@pytest.fixture
def scenario_file(tmp_path):
    import yaml
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def test_cli_run_writes_csv_and_trace(scenario_file, tmp_path, capsys):
    out_csv, trace = tmp_path / "r.csv", tmp_path / "t.csv"
    rc = cli.main(["run", str(scenario_file), "--seed", "4", "--set", "workload.total_ops=100",
                   "--csv", str(out_csv), "--trace", str(trace)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["seed"] == 4 and report["completions"] == 100
    row = next(csv.DictReader(out_csv.open()))
    assert row["completions"] == "100"
    rows = list(csv.reader(trace.open()))
    assert rows[0] == ["time", "component", "event", "detail"] and len(rows) > 2


def test_cli_exit_codes(scenario_file, tmp_path, monkeypatch, capsys):
    assert cli.main(["run", str(scenario_file), "--set", "bogus=1"]) == 2
    assert cli.main(["run", str(tmp_path / "none.yaml")]) == 2

    def broken(*a, **k):
        raise InvariantViolation("forced")
    monkeypatch.setattr(cli, "run_scenario", broken)
    assert cli.main(["run", str(scenario_file)]) == 3
    assert "forced" in capsys.readouterr().err


def test_cli_schema_and_help(capsys):
    assert cli.main(["--print-schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "ScenarioConfig"
    assert cli.main([]) == 2


def test_cli_benches(tmp_path, capsys):
    out = tmp_path / "ring.csv"
    assert cli.main(["bench", "ring", "--producers", "1,2", "--kinds", "progress,locked",
                     "--duration", "0.05", "--dma-ns", "0", "--csv", str(out)]) == 0
    assert len(list(csv.DictReader(out.open()))) == 4
    assert cli.main(["bench", "table", "--items", "2000", "--readers", "1",
                     "--duration", "0.05"]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert lines
    with pytest.raises(SystemExit):
        cli.main(["bench", "ring", "--kinds", "nope"])


def test_cli_image_round_trip(scenario_file, tmp_path, capsys):
    img = tmp_path / "dev.img"
    assert cli.main(["run", str(scenario_file), "--image", str(img)]) == 0
    assert cli.main(["fsck", str(img)]) == 0
    assert cli.main(["run", str(scenario_file), "--set", "mode=off", "--image", str(img)]) == 2


def test_off_is_a_mode_not_a_boolean(tmp_path):
    assert cfg("mode=off").mode == "off"
    p = tmp_path / "off.yaml"
    p.write_text("mode: off\ndirector:\n  passthrough: true\n")
    c = load_config(p)
    assert c.mode == "off" and c.director.passthrough is True
