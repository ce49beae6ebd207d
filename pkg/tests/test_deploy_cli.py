import csv
import json
import subprocess
import sys

import pytest

from docstar import cli
from docstar.client import Client
from docstar.deploy import DeployConfig, load_node, local_cluster, outsource, owner_seed
from docstar.errors import (
    AccessDenied,
    ConfigError,
    MaliciousServerDetected,
    MalformedClientVector,
    NoAccessOrAbsent,
    PeerTimeout,
    ServerMisbehavior,
    TamperedRandomness,
    UnknownClient,
)
from docstar.field import FieldRng
from helpers import OWNER_SEED, make_cluster, table1_corpus


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.json"
    path.write_text(json.dumps(table1_corpus().to_dict()))
    return path


@pytest.fixture
def deployed(tmp_path, corpus_file, capsys):
    d = tmp_path / "deploy"
    assert cli.main(["outsource", "--dir", str(d), "--corpus", str(corpus_file),
                     "--seed", OWNER_SEED.hex(), "--reserve", "1"]) == 0
    assert "wrote 4 bundles" in capsys.readouterr().out
    return d


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out.strip(), out.err.strip()


# deployment directory


def test_outsource_writes_everything(deployed):
    assert (deployed / "docstar.json").exists()
    assert owner_seed(deployed) == OWNER_SEED
    assert oct((deployed / "owner.key").stat().st_mode & 0o777) == "0o600"
    for z in (1, 2, 3, 4):
        assert (deployed / f"server{z}" / "caps.bin").exists()


def test_loaded_cluster_answers_like_fresh_one(tmp_path):
    corpus = table1_corpus()
    outsource(corpus, tmp_path, DeployConfig(layout="optimized"), seed=OWNER_SEED, rng=FieldRng(1))
    loaded = Client("Lisa", local_cluster(tmp_path), rng=FieldRng(2)).run_query("are")
    fresh = Client("Lisa", make_cluster(corpus, "optimized"), rng=FieldRng(2)).run_query("are")
    assert loaded.to_dict() == fresh.to_dict()


@pytest.mark.parametrize("content, message", [
    ("{", "docstar.json"),
    ('{"version": 2}', "version"),
    ('{"version": 1, "colour": "red"}', "unknown keys"),
])
def test_bad_config_files(tmp_path, content, message):
    (tmp_path / "docstar.json").write_text(content)
    with pytest.raises(ConfigError, match=message):
        DeployConfig.load(tmp_path)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        DeployConfig.load(tmp_path)
    with pytest.raises(ConfigError):
        DeployConfig(servers=["a:1"]).addresses()
    with pytest.raises(ConfigError):
        DeployConfig(servers=["a", "b", "c", "d"]).addresses()
    with pytest.raises(ConfigError):
        owner_seed(tmp_path)
    (tmp_path / "owner.key").write_text("not hex")
    with pytest.raises(ConfigError):
        owner_seed(tmp_path)


def test_bundle_config_mismatch(deployed):
    config = DeployConfig.load(deployed)
    config.layout = "optimized"
    with pytest.raises(ConfigError):
        load_node(deployed, 1, config)
    config = DeployConfig.load(deployed)
    config.p = 500009
    with pytest.raises(ConfigError):
        load_node(deployed, 2, config)


def test_config_round_trip(tmp_path):
    config = DeployConfig(layout="optimized", y=8, verify=True)
    config.save(tmp_path)
    assert DeployConfig.load(tmp_path) == config


# command line


def test_query_output_matches_library(capsys, deployed):
    code, text, _ = run(capsys, "query", "--dir", str(deployed), "--local", "--client", "Lisa", "--keyword", "are")
    assert code == 0
    assert text == "file 1: how are you\nfile 2: restricted\n1 delivered, 1 restricted"
    result = Client("Lisa", local_cluster(deployed)).run_query("are")
    assert text == cli.format_result(result)


def test_query_json(capsys, deployed):
    code, text, _ = run(capsys, "--json", "query", "--dir", str(deployed), "--local", "--verify",
                        "--client", "Ava", "--keyword", "fig")
    assert code == 0
    assert json.loads(text)["files"] == [{"id": 3, "status": "delivered", "text": "fig is a fruit"}]


def test_denied_exit_code(capsys, deployed):
    code, _, err = run(capsys, "query", "--dir", str(deployed), "--local", "--client", "Lisa", "--keyword", "fig")
    assert code == 2 and "no accessible column" in err
    code, text, _ = run(capsys, "--json", "query", "--dir", str(deployed), "--local",
                        "--client", "Lisa", "--keyword", "fig")
    assert code == 2 and json.loads(text)["error"] == "NoAccessOrAbsent"


def test_unknown_client_and_missing_dir(capsys, deployed, tmp_path):
    code, _, err = run(capsys, "query", "--dir", str(deployed), "--local", "--client", "Eve", "--keyword", "are")
    assert code == 1 and "Eve" in err
    code, _, _ = run(capsys, "query", "--dir", str(tmp_path / "nope"), "--local", "--client", "Lisa",
                     "--keyword", "are")
    assert code == 1


@pytest.mark.parametrize("exc, code", [
    (NoAccessOrAbsent("x"), 2),
    (AccessDenied("1"), 2),
    (ServerMisbehavior(2, "x"), 3),
    (MaliciousServerDetected("A"), 3),
    (TamperedRandomness("rn_verify"), 3),
    (MalformedClientVector("B"), 4),
    (PeerTimeout("x"), 1),
    (UnknownClient("x"), 1),
    (ValueError("x"), 1),
])
def test_exit_code_mapping(exc, code):
    assert cli.exit_code(exc) == code


def test_admin_commands_persist(capsys, deployed):
    d = str(deployed)
    assert run(capsys, "grant", "--dir", d, "--local", "--client", "Lisa", "--keyword", "fig")[0] == 0
    code, text, _ = run(capsys, "query", "--dir", d, "--local", "--client", "Lisa", "--keyword", "fig")
    assert code == 0 and "file 3: fig is a fruit" in text
    assert run(capsys, "revoke", "--dir", d, "--local", "--client", "Lisa", "--keyword", "fig")[0] == 0
    assert run(capsys, "query", "--dir", d, "--local", "--client", "Lisa", "--keyword", "fig")[0] == 2

    code, text, _ = run(capsys, "--json", "add-keyword", "--dir", d, "--local", "--keyword", "you",
                        "--allow", "Lisa")
    assert code == 0 and json.loads(text)["column"] == 5
    code, text, _ = run(capsys, "--json", "add-file", "--dir", d, "--local", "--file-id", "4",
                        "--text", "you are here")
    assert code == 0 and sorted(json.loads(text)["linked"]) == ["are", "you"]
    code, text, _ = run(capsys, "query", "--dir", d, "--local", "--client", "Lisa", "--keyword", "you")
    # a new keyword starts with an empty posting list; only file 4 was indexed under it
    assert text == "file 4: you are here\n1 delivered, 0 restricted"

    assert run(capsys, "del-file", "--dir", d, "--local", "--file-id", "1", "--keyword", "are")[0] == 0
    code, text, _ = run(capsys, "query", "--dir", d, "--local", "--client", "Lisa", "--keyword", "are")
    assert "file 1" not in text
    assert run(capsys, "del-keyword", "--dir", d, "--local", "--keyword", "are", "--fast")[0] == 0
    assert run(capsys, "query", "--dir", d, "--local", "--client", "Lisa", "--keyword", "are")[0] == 2


def test_add_file_from_path(capsys, deployed, tmp_path):
    doc = tmp_path / "doc.txt"
    doc.write_text("Fig and ana")
    code, text, _ = run(capsys, "--json", "add-file", "--dir", str(deployed), "--local", "--file-id", "9",
                        "--file", str(doc))
    assert code == 0 and sorted(json.loads(text)["linked"]) == ["ana", "fig"]
    code, text, _ = run(capsys, "--json", "query", "--dir", str(deployed), "--local", "--client", "Ava",
                        "--keyword", "fig")
    assert {"id": 9, "status": "delivered", "text": "fig and ana"} in json.loads(text)["files"]


def test_bench_writes_csv_and_png(capsys, tmp_path):
    out = tmp_path / "bench"
    code, text, _ = run(capsys, "bench", "--out", str(out), "--keywords", "12", "--hot-files", "20",
                        "--cold-max", "2", "--queries", "1")
    assert code == 0
    rows = list(csv.DictReader((out / "bench.csv").open()))
    assert {(r["skew"], r["layout"]) for r in rows} == {
        (s, l) for s in ("high", "uniform") for l in ("padded", "optimized")
    }
    assert (out / "bench.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "wrote" in text


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "docstar.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "outsource" in proc.stdout
