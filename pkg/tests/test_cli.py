import json

import pytest

from memmarket.cli import build_parser, expand_config, main, read_config
from memmarket.units import InvalidArgument

SMALL = ["--hours", "2", "--producers", "2", "--consumers", "3", "--idle", "1",
         "--consumer-capacity-gb", "64"]


def test_read_config(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("# comment\nslabs = 4\nwait_expiry = true\nverbose = false\n\nmode=plain  # trailing\n")
    assert read_config(cfg) == ["--slabs", "4", "--wait-expiry", "--mode", "plain"]
    (tmp_path / "bad.conf").write_text("just words\n")
    with pytest.raises(InvalidArgument):
        read_config(tmp_path / "bad.conf")


def test_config_expands_in_place_so_later_flags_win(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("slabs = 4\nops = 10\n")
    argv = expand_config(["consumer", "bench", "--broker", "h:1", "--config", str(cfg), "--ops", "20"])
    args = build_parser().parse_args(argv)
    assert (args.slabs, args.ops) == (4, 20)
    argv = expand_config(["consumer", "bench", "--broker", "h:1", f"--config={cfg}"])
    assert build_parser().parse_args(argv).ops == 10


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["sim", "run", "--config", str(tmp_path / "missing.conf")]) == 2
    assert "memmarket:" in capsys.readouterr().err


def test_sim_trace_then_run_from_csv(tmp_path, capsys):
    trace = tmp_path / "trace.csv"
    assert main(["sim", "trace", "--out", str(trace)] + SMALL) == 0
    assert "24 ticks x 6 machines" in capsys.readouterr().out
    out = tmp_path / "run"
    assert main(["sim", "run", "--trace", str(trace), "--out-dir", str(out), "--strategy", "volume"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == json.loads((out / "summary.json").read_text())
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["strategy"] == "volume" and man["trace"] == str(trace)
    assert (out / "metrics.csv").read_text().count("\n") == 25


def test_sim_compare_and_oracle(tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["sim", "compare", "--out-dir", str(out), "--strategies", "revenue,fixed:1/2"] + SMALL) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"revenue", "fixed:1/2"}
    assert (out / "compare.csv").exists()
    out = tmp_path / "orc"
    assert main(["sim", "oracle", "--out-dir", str(out), "--no-harvest"] + SMALL) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["strategy"] == "revenue" and res["mean_oracle_deviation"] >= 0
    assert (out / "oracle.csv").read_text().startswith("tick,timestamp_ms,price,oracle_price,ceiling\n")


def test_missing_trace_is_a_clean_error(tmp_path, capsys):
    assert main(["sim", "run", "--trace", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 1
    assert "nope.csv" in capsys.readouterr().err


def test_unknown_command_exits_with_usage():
    with pytest.raises(SystemExit) as ei:
        main(["bogus"])
    assert ei.value.code == 2
