import json
import shutil

import pytest

from hybridpair import shipped_config
from hybridpair.cli import main, parse_x
from hybridpair.config import ConfigError, load_config, parse_config
from hybridpair.mlcp import EvalReport

SMALL = shipped_config("small")


def config_text(**replacements):
    text = open(SMALL).read()
    for old, new in replacements.items():
        assert old in text
        text = text.replace(old, new)
    return text


def line_of(text, needle):
    return next(i for i, line in enumerate(text.splitlines(), 1) if needle in line)


def test_invalid_rho_names_field_and_line(tmp_path, capsys):
    text = config_text(**{"rho: 0.1": "rho: 1.5"})
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "ce.rho" in err
    assert f"bad.yaml:{line_of(text, 'rho: 1.5')}:" in err


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown field 'ce.rhoo'"):
        parse_config(config_text(**{"rho: 0.1": "rhoo: 0.1"}))
    with pytest.raises(ConfigError, match="cost.penalty must be a number"):
        parse_config(config_text(**{"penalty: 1.0e+9": "penalty: lots"}))
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config(config_text(**{"schema_version: 1": "schema_version: 2"}))
    with pytest.raises(ConfigError, match="Y/R"):
        parse_config(config_text(**{"R: 0.2": "R: 0.3"}))
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent.yaml")


def test_seed_fan_out():
    cfg = load_config(SMALL)
    assert cfg.ce_config().seed != cfg.forest_config().seed
    other = load_config(SMALL, seed_override=8)
    assert other.seed == 8 and other.ce_config().seed != cfg.ce_config().seed


def test_parse_x():
    assert parse_x("1..5") == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert parse_x("1") == [1.0]
    assert parse_x("1,2.5") == [1.0, 2.5]


def test_eval_before_train_is_missing_artifact(tmp_path, capsys):
    assert main(["eval", "--config", SMALL, "--out", str(tmp_path)]) == 3
    assert "missing artifact" in capsys.readouterr().err


def test_generate_pairs_override_on_reference(tmp_path):
    out = tmp_path / "ref"
    assert main(["generate", "--config", shipped_config("reference"), "--out", str(out), "--pairs", "5"]) == 0
    summary = json.loads((out / "generation_summary.json").read_text())
    assert summary["counts"]["vanilla"] == summary["counts"]["perturbed"] == 5
    assert summary["counts"]["rudimentary"] == 450
    assert "mean core pair distance" in (out / "generation_summary.txt").read_text()


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    for cmd in ("generate", "extract", "train", "eval"):
        assert main([cmd, "--config", SMALL, "--out", str(out)]) == 0, cmd
    return out


def test_full_chain_outputs(chain):
    manifest = json.loads((chain / "manifest.json").read_text())
    assert set(manifest) == {"archive", "features", "model", "report"}
    assert manifest["features"]["inputs"]["archive"] == manifest["archive"]["digest"]
    assert manifest["model"]["inputs"]["features"] == manifest["features"]["digest"]
    rec = json.loads((chain / "report.json").read_text())
    assert rec["inputs"]["model"] == manifest["model"]["digest"]
    report = EvalReport.from_record(rec["report"])
    assert rec["report"] == report.to_record()
    for key in EvalReport.METRICS:
        assert key in rec["report"]


def test_digest_mismatch_refuses(chain, tmp_path, capsys):
    out = tmp_path / "copy"
    shutil.copytree(chain, out)
    f = out / "features.csv"
    lines = f.read_text().splitlines()
    lines[1] = lines[1][:-1] + ("0" if lines[1].endswith("1") else "1")  # flip one label
    f.write_text("\n".join(lines) + "\n")
    assert main(["train", "--config", SMALL, "--out", str(out)]) == 3
    assert "digest mismatch" in capsys.readouterr().err


def test_generate_and_sweep_deterministic(chain, tmp_path):
    other = tmp_path / "again"
    assert main(["generate", "--config", SMALL, "--out", str(other)]) == 0
    a = json.loads((chain / "manifest.json").read_text())["archive"]["digest"]
    b = json.loads((other / "manifest.json").read_text())["archive"]["digest"]
    assert a == b
    assert main(["sweep", "--config", SMALL, "--out", str(chain), "--x", "1..2"]) == 0
    first = (chain / "sweep.csv").read_text()
    assert main(["sweep", "--config", SMALL, "--out", str(other), "--x", "1..2"]) == 0
    assert (other / "sweep.csv").read_text() == first
    assert len(first.splitlines()) == 3
    assert main(["sweep", "--config", SMALL, "--out", str(other), "--x", "1"]) == 0
    assert len((other / "sweep.csv").read_text().splitlines()) == 2


def test_monitor_command(chain, tmp_path, capsys):
    archive_dir = chain / "archive"
    rows = [json.loads(line) for line in (archive_dir / "archive.jsonl").read_text().splitlines()]
    pert = next(r for r in rows if r["kind"] == "perturbed")
    trace = archive_dir / pert["trace_file"]
    assert main(["monitor", str(chain / "model.json"), str(trace), "--stride", "0.5",
                 "--out", str(tmp_path)]) == 0
    log = (tmp_path / (trace.stem + ".flags.csv")).read_text().splitlines()
    assert log[0] == "time,label,score"
    assert any(line.split(",")[1] == "1" for line in log[1:])

    empty = tmp_path / "empty.csv"
    text = trace.read_text().splitlines()
    empty.write_text("\n".join(text[:2]) + "\n")
    assert main(["monitor", str(chain / "model.json"), str(empty), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "empty.flags.csv").read_text() == "time,label,score\n"

    assert main(["monitor", str(chain / "model.json"), str(tmp_path / "none.csv")]) == 3
