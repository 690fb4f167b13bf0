import logging

from threemti.logs import FORMAT_VERSION, JsonlWriter, read_jsonl, setup


def test_jsonl_rows_carry_provenance(tmp_path):
    path = tmp_path / "logs" / "loss.jsonl"
    with JsonlWriter(path, config_hash="abc", seed=3) as log:
        log.write({"step": 0, "total": 1.5})
        log.write({"step": 1, "total": 1.25})
    rows = list(read_jsonl(path))
    assert [r["step"] for r in rows] == [0, 1]
    assert all(r["format_version"] == FORMAT_VERSION for r in rows)
    assert all((r["config_hash"], r["seed"]) == ("abc", 3) for r in rows)


def test_setup_switches_run_log(tmp_path):
    setup(log_file=tmp_path / "a" / "run.log")
    logging.getLogger("threemti.test").warning("first")
    setup(log_file=tmp_path / "b" / "run.log")
    logging.getLogger("threemti.test").warning("second")
    first = (tmp_path / "a" / "run.log").read_text(encoding="utf-8")
    second = (tmp_path / "b" / "run.log").read_text(encoding="utf-8")
    assert "first" in first and "second" not in first
    assert "[THREEMTI] WARNING threemti.test: second" in second
