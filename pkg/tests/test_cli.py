import json
import re
import signal
import socket
import subprocess
import sys

import pytest

from ltqp_guard.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_FAULT, EXIT_OK, EXIT_USAGE, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def free_port_block(n):
    for _ in range(50):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            base = probe.getsockname()[1]
        if base + n > 65535:
            continue
        sockets = []
        try:
            for port in range(base, base + n):
                s = socket.socket()
                sockets.append(s)
                s.bind(("127.0.0.1", port))
            return base
        except OSError:
            continue
        finally:
            for s in sockets:
                s.close()
    pytest.skip("no block of free ports")


@pytest.fixture
def bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"cacheMode": "sometimes"}))
    return str(path)


@pytest.fixture
def query_file(tmp_path):
    path = tmp_path / "q.rq"
    path.write_text("SEED <http://127.0.0.1:9/nothing>\n?s ?p ?o\n")
    return str(path)


EXIT_TABLE = [
    # (argv, expected exit code)
    (["run", "names.rq", "--scenario", "S1"], EXIT_OK),
    (["run", "--scenario", "S8"], EXIT_OK),
    (["run", "--scenario", "S8", "--preset", "exploit:S8"], EXIT_FAULT),
    (["run", "{query}", "--config", "/no/such/config.json"], EXIT_CONFIG),
    (["run", "{query}", "--config", "{bad_config}"], EXIT_CONFIG),
    (["run", "{query}", "--preset", "yolo"], EXIT_CONFIG),
    (["run", "{query}", "--preset", "exploit:S3"], EXIT_CONFIG),
    (["run", "--scenario", "S1", "--preset", "hardened:S2"], EXIT_CONFIG),
    (["run"], EXIT_USAGE),
    (["run", "/no/such/query.rq"], EXIT_USAGE),
    (["run", "{query}", "--parallelism", "0"], EXIT_USAGE),
    (["run", "{query}", "--parallelism", "many"], EXIT_USAGE),
    (["run", "--scenario", "S42"], EXIT_USAGE),
    (["run", "{query}", "--bogus"], EXIT_USAGE),
    (["frobnicate"], EXIT_USAGE),
    ([], EXIT_USAGE),
    (["serve", "/no/such/manifest.json"], EXIT_CONFIG),
    (["attack-suite", "--only", "S99"], EXIT_USAGE),
]


@pytest.mark.parametrize("argv, expected", EXIT_TABLE, ids=[" ".join(a) or "<none>" for a, _ in EXIT_TABLE])
def test_exit_codes(capsys, query_file, bad_config, argv, expected):
    argv = [a.format(query=query_file, bad_config=bad_config) for a in argv]
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    capsys.readouterr()
    assert code == expected


def test_bad_query_syntax_is_usage_error(capsys, tmp_path):
    path = tmp_path / "q.rq"
    path.write_text("SEED <http://a/>\n?s ?p\n")
    code, _, err = run_cli(capsys, "run", str(path))
    assert code == EXIT_USAGE and "line 2" in err


def test_permissive_run_includes_dave(capsys, tmp_path):
    audit = tmp_path / "audit.json"
    code, out, _ = run_cli(capsys, "run", "names.rq", "--scenario", "S1", "--preset", "permissive", "--audit", str(audit))
    assert code == EXIT_OK
    assert '?n "Dave"' in out
    report = json.loads(audit.read_text())
    assert report["results"] == 3
    assert report["events"] == []
    assert {"url", "status", "bytes", "fromCache", "depth"} <= set(report["documentsFetched"][0])
    assert "exploitMarkers" not in report


def test_hardened_run_blocks_dave(capsys, tmp_path):
    audit = tmp_path / "audit.json"
    code, out, _ = run_cli(capsys, "run", "names.rq", "--scenario", "S1", "--preset", "hardened", "--audit", str(audit))
    assert code == EXIT_OK
    assert '"Dave"' not in out
    events = json.loads(audit.read_text())["events"]
    assert [e["vulnerability"] for e in events] == ["Unauthorized Statements"]


def test_rows_are_tab_separated_and_sorted(capsys):
    _, out, _ = run_cli(capsys, "run", "--scenario", "S8", "--audit", "/dev/null")
    for line in out.splitlines():
        cells = line.split("\t")
        names = [c.split(" ", 1)[0] for c in cells]
        assert names == sorted(names) and all(n.startswith("?") for n in names)


def test_audit_goes_to_stderr_by_default(capsys):
    _, out, err = run_cli(capsys, "run", "--scenario", "S1")
    assert json.loads(err)["queryId"] == "names"
    assert "queryId" not in out


def test_seed_url_overrides_query_seeds(capsys, tmp_path):
    audit = tmp_path / "audit.json"
    run_cli(capsys, "run", "names.rq", "--scenario", "S1", "--seed-url", "{{origin:bob}}/profile.ttl",
            "--audit", str(audit))
    fetched = [d["url"] for d in json.loads(audit.read_text())["documentsFetched"]]
    assert fetched[0].endswith("/profile.ttl") and "addressbook" not in fetched[0]


def test_config_file_applies_over_preset(capsys, tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"contentPolicy": []}))
    _, out, _ = run_cli(capsys, "run", "names.rq", "--scenario", "S1", "--preset", "hardened",
                        "--config", str(config), "--audit", "/dev/null")
    assert '"Dave"' in out


def test_repeated_runs_are_byte_identical(capsys):
    port = free_port_block(3)
    outputs = []
    for _ in range(2):
        code, out, _ = run_cli(capsys, "run", "names.rq", "--scenario", "S1", "--port", str(port),
                               "--parallelism", "1", "--audit", "/dev/null")
        assert code == EXIT_OK
        outputs.append(out)
    assert outputs[0] == outputs[1] and outputs[0]


def test_serve_prints_base_url_and_stops_on_sigterm():
    proc = subprocess.Popen(
        [sys.executable, "-m", "ltqp_guard.cli", "serve", "S1", "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        first = proc.stdout.readline()
        assert re.match(r"http://127\.0\.0\.1:(\d+)/\t", first)
        assert not first.startswith("http://127.0.0.1:0/")
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == EXIT_OK


def test_serve_duplicate_path_names_it(capsys, tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text('{"resources": {"/dup.ttl": {"type": "notFound"}, "/dup.ttl": {"type": "notFound"}}}')
    code, _, err = run_cli(capsys, "serve", str(path))
    assert code == EXIT_CONFIG and "/dup.ttl" in err


def test_attack_suite_single_row(capsys, tmp_path):
    audit = tmp_path / "suite.json"
    code, out, _ = run_cli(capsys, "attack-suite", "--only", "S3", "--audit", str(audit))
    assert code == EXIT_OK
    rows = [line for line in out.splitlines() if re.match(r"S\d+ +[A-Z]", line) and line.endswith("pass")]
    assert len(rows) == 1
    header = out.splitlines()[0]
    data = json.loads(audit.read_text())
    assert data["rows"][0]["axes"] == ["Data Integrity"]
    assert "x" in rows[0][header.index("Data Integrity"):header.index("Query Process")]
    assert rows[0][header.index("Query Results"):header.index("Data Integrity")].strip() == ""
    markers = data["reports"]["S3"]["exploit"][0]["exploitMarkers"]
    assert markers[0]["succeeded"] is True


def test_attack_suite_reports_failure(capsys, monkeypatch):
    import ltqp_guard.attacks as attacks

    monkeypatch.setitem(attacks.EVIDENCE, "S5", lambda ctx: attacks.Evidence(False, "never holds"))
    code, out, _ = run_cli(capsys, "attack-suite", "--only", "S5", "--quiet")
    assert code == EXIT_FAILED
    assert "FAIL" in out and "never holds" in out
