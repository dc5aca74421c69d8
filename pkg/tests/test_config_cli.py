import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from clusterfl.cli import main
from clusterfl.config import ConfigFileError, ExperimentConfig, dump_config, load_config, parse_config
from clusterfl.pipeline import ARTIFACTS
from clusterfl.seeding import derive_seed

SMALL = """\
seed: 5
dataset:
  kind: digits
partition:
  scheme: label_skew
  n_clients: 12
  samples_per_client: 60
  holdout_fraction: 0.25
network:
  embedding_dim: 8
  channels: [4, 8]
clustering:
  k: 2
  restarts: 3
training:
  rounds: 2
  warmup_rounds: 1
  batch_size: 16
metrics:
  robustness_iterations: 3
  correlation: true
  reference_images: 20
"""


def _write(tmp_path, text=SMALL, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_config_round_trip(tmp_path):
    cfg = load_config(_write(tmp_path))
    assert cfg.partition.n_clients == 12 and cfg.network.channels == (4, 8)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(ExperimentConfig())) == ExperimentConfig()


@settings(max_examples=50, deadline=None)
@given(master=st.integers(0, 2**63), stage=st.text(min_size=1, max_size=8), idx=st.integers(0, 10**6))
def test_seed_derivation_is_pure(master, stage, idx):
    a = derive_seed(master, stage, idx)
    assert a == derive_seed(master, stage, idx) and 0 <= a < 2**64
    assert a != derive_seed(master, stage + "x", idx)


def test_errors_name_the_line(tmp_path):
    bad = SMALL.replace("  rounds: 2", "  rounds: 2\n  fraction_fit: 1.5")
    with pytest.raises(ConfigFileError) as exc:
        load_config(_write(tmp_path, bad))
    line = bad.splitlines().index("  fraction_fit: 1.5") + 1
    assert str(exc.value).startswith(f"{tmp_path / 'exp.yaml'}:{line}:")
    with pytest.raises(ConfigFileError, match=r":3: unknown key 'dataset.colour'"):
        parse_config("seed: 1\ndataset:\n  colour: red\n")
    with pytest.raises(ConfigFileError, match=r":2: .*must be"):
        parse_config("seed: 1\nclustering: {k: 0}\n")
    with pytest.raises(ConfigFileError, match="YAML syntax"):
        parse_config("seed: [1\n")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = _write(root)
    assert _run("run", "--config", config, "--out", root / "a") == 0
    return root, config


def test_run_writes_every_artifact(small_run):
    root, _ = small_run
    for name in ARTIFACTS.values():
        assert (root / "a" / name).exists(), name
    rows = list(csv.DictReader(open(root / "a" / ARTIFACTS["rounds"], newline="")))
    assert {r["round"] for r in rows} == {"1", "2"} and any(r["cluster"] == "all" for r in rows)
    summary = json.loads((root / "a" / ARTIFACTS["summary"]).read_text())
    assert summary["method"] == "REPA" and summary["k"] == 2 and 0 <= summary["val_acc"] <= 1


def test_rerun_is_byte_identical(small_run):
    root, config = small_run
    assert _run("run", "--config", config, "--out", root / "b") == 0
    for key in ("rounds", "metrics", "clusters", "embeddings", "summary"):
        assert (root / "a" / ARTIFACTS[key]).read_bytes() == (root / "b" / ARTIFACTS[key]).read_bytes(), key


def test_thread_count_does_not_change_artifacts(small_run):
    root, config = small_run
    assert _run("run", "--config", config, "--out", root / "t8", "--threads", 8) == 0
    for key in ("rounds", "metrics", "embeddings", "summary"):
        assert (root / "a" / ARTIFACTS[key]).read_bytes() == (root / "t8" / ARTIFACTS[key]).read_bytes(), key


def test_staged_run_matches_monolithic(small_run):
    root, config = small_run
    out = root / "staged"
    for cmd in ("partition", "embed", "cluster"):
        assert _run(cmd, "--config", config, "--stage-inputs", out) == 0
    assert _run("run", "--config", config, "--out", out, "--resume") == 0
    for key in ("partition", "clusters", "rounds", "summary"):
        assert (root / "a" / ARTIFACTS[key]).read_bytes() == (out / ARTIFACTS[key]).read_bytes(), key


def test_missing_dataset_exits_2(tmp_path):
    text = SMALL.replace("kind: digits", f"kind: idx\n  images: nope.idx\n  labels: nope.idx")
    out = tmp_path / "out"
    assert _run("run", "--config", _write(tmp_path, text), "--out", out) == 2
    assert not out.exists()


def test_too_many_clusters_exits_2(tmp_path):
    text = SMALL.replace("k: 2", "k: 50")
    assert _run("run", "--config", _write(tmp_path, text), "--out", tmp_path / "o") == 2


def test_cluster_without_embeddings_exits_2(tmp_path):
    assert _run("cluster", "--config", _write(tmp_path), "--out", tmp_path / "o") == 2


def test_metrics_subset_appends(small_run, capsys):
    root, config = small_run
    path = root / "a" / ARTIFACTS["metrics"]
    before = path.read_text().splitlines()
    assert _run("metrics", "--config", config, "--out", root / "a", "--metrics", "robustness") == 0
    added = path.read_text().splitlines()[len(before):]
    assert added and all(line.startswith("robustness") for line in added)
    assert _run("metrics", "--config", config, "--out", root / "a", "--metrics", "colour") == 2


def test_snapshot_mismatch_exits_2(small_run, tmp_path):
    root, _ = small_run
    other = _write(tmp_path, SMALL.replace("seed: 5", "seed: 6"))
    assert _run("cluster", "--config", other, "--out", root / "a") == 2


def test_report(small_run, tmp_path, capsys):
    root, _ = small_run
    (tmp_path / "empty").mkdir()
    assert _run("report", tmp_path / "empty") == 2
    capsys.readouterr()
    assert _run("report", root / "a") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].split()[:3] == ["run", "method", "k"]
    summary = json.loads((root / "a" / ARTIFACTS["summary"]).read_text())
    assert repr(summary["val_acc"]) in lines[1].split()


def test_single_cluster_equals_fedavg(tmp_path):
    repa = SMALL.replace("k: 2", "k: 1")
    fedavg = repa.replace("network:", "embedder:\n  method: FEDAVG\nnetwork:")
    assert _run("run", "--config", _write(tmp_path, repa, "r.yaml"), "--out", tmp_path / "r") == 0
    assert _run("run", "--config", _write(tmp_path, fedavg, "f.yaml"), "--out", tmp_path / "f") == 0
    assert (tmp_path / "r" / ARTIFACTS["rounds"]).read_bytes() == (tmp_path / "f" / ARTIFACTS["rounds"]).read_bytes()
    a = json.loads((tmp_path / "r" / ARTIFACTS["summary"]).read_text())
    b = json.loads((tmp_path / "f" / ARTIFACTS["summary"]).read_text())
    assert a["val_acc"] == b["val_acc"] and a["ho_acc"] == b["ho_acc"]


def test_untrained_encoder_is_flagged(tmp_path):
    text = SMALL.replace("warmup_rounds: 1", "warmup_rounds: 0")
    assert _run("run", "--config", _write(tmp_path, text), "--out", tmp_path / "o") == 0
    log = json.loads((tmp_path / "o" / ARTIFACTS["warmup_log"]).read_text())
    assert log["encoder_untrained"] is True


def test_bad_thread_count():
    assert main(["run", "--config", "x.yaml", "--threads", "0"]) == 2
