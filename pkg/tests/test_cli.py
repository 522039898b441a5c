import csv

import pytest

from subgnd.cli import main
from subgnd.config import ConfigError, load_config, parse_text


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--kind", "conflict_fixture", "--pairs", "4", "--out", str(out)]) == 0
    return out


def train(data_dir, out, *extra):
    args = ["train", "--data", str(data_dir), "--out", str(out), "--set", "data.split=1,0,0",
            "--set", "train.max_epochs=100"]
    return main(args + list(extra))


def test_conflict_fixture_via_cli(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "base", "--variant", "base") == 0
    assert "train_acc 0.5000" in capsys.readouterr().out
    assert train(data_dir, tmp_path / "sg") == 0
    text = capsys.readouterr().out
    acc = float(text.split("train_acc ")[1].split()[0])
    assert acc >= 0.99
    for name in ("metrics.csv", "model.ckpt", "run.manifest"):
        assert (tmp_path / "sg" / name).is_file()


def test_manifest_reproduces_metrics(data_dir, tmp_path):
    assert train(data_dir, tmp_path / "a", "--set", "train.max_epochs=5") == 0
    manifest = tmp_path / "a" / "run.manifest"
    assert main(["train", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert "sha256 data.edges" in manifest.read_text()


def test_eval_reads_checkpoint(data_dir, tmp_path, capsys):
    out = tmp_path / "sg"
    assert train(data_dir, out) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(data_dir), "--out", str(out), "--set", "data.split=1,0,0"]) == 0
    assert capsys.readouterr().out.startswith("train_acc 1.0000")


def test_gradcheck_defaults(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")


def test_sample_writes_corpus_and_histogram(tmp_path, capsys):
    args = ["sample", "--out", str(tmp_path), "--set", "synth.num_nodes=30", "--set", "walk.rw_hops=4"]
    assert main(args) == 0
    rows = list(csv.DictReader((tmp_path / "size_histogram.csv").open()))
    assert sum(int(r["count"]) for r in rows) == 60
    assert (tmp_path / "corpus.txt").read_text().startswith("60 16\n")


def test_search_and_experiment(tmp_path, capsys):
    common = ["--set", "synth.num_nodes=40", "--set", "train.max_epochs=2", "--set", "walk.rw_hops=4"]
    assert main(["search", "--out", str(tmp_path), "--set", "search.budget=2", "--set", "search.rw_hops=4",
                 "--set", "search.hidden_size=8", *common]) == 0
    assert len(list(csv.DictReader((tmp_path / "trials.csv").open()))) == 2
    assert main(["experiment", "--out", str(tmp_path), "--set", "train.num_runs=2", *common]) == 0
    assert "over 2 runs" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "model.bogus=1"]) == 2
    assert "model.bogus" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--set", "train.lr=abc"]) == 2
    assert main(["ingest", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("walk.rw_hops = 4\nnonsense line\n")
    assert main(["train", "--config", str(bad)]) == 2
    missing = ["--set", f"data.edges={tmp_path}/e", "--set", f"data.features={tmp_path}/f",
               "--set", f"data.labels={tmp_path}/l"]
    capsys.readouterr()
    assert main(["ingest", "--out", str(tmp_path), *missing]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:") and "No such file" in err[0]
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_config_parsing(tmp_path):
    assert parse_text("# c\nwalk.rw_hops = 8  # inline\n\n") == {"walk.rw_hops": " 8"}
    cfg = load_config(None, ["walk.max_steps=none", "search.eps=-1", "model.variant=base"])
    assert cfg.walk.max_steps is None and cfg.search.eps == (-1.0,) and cfg.model.variant == "base"
    with pytest.raises(ConfigError, match="walk.rw_hops"):
        load_config(None, ["walk.rw_hops=2.5"])
    with pytest.raises(ConfigError):
        load_config(None, ["walk.rw_hops=0"])
    with pytest.raises(ConfigError, match="split"):
        load_config(None, ["data.split=0.5,0.5,0.5"])
    with pytest.raises(ConfigError, match="together"):
        load_config(None, ["data.edges=x"])
    text = load_config(None, ["train.lr=0.1"]).to_text()
    path = tmp_path / "m"
    path.write_text(text)
    assert load_config(path) == load_config(None, ["train.lr=0.1"])
