import json
from pathlib import Path

import pytest

from modelrank import cli


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> ingest -> split -> train (tiny budget) -> evaluate, cached for the module."""
    root = tmp_path_factory.mktemp("pipeline")
    synth_dir = root / "synth"
    assert run(["synth", "--out-dir", str(synth_dir), "--seed", "5", "--quiet",
                "--config", str(_synth_config(root))]) == 0
    assert run(["ingest",
                "--records", str(synth_dir / "records.jsonl"),
                "--models", str(synth_dir / "models.jsonl"),
                "--datasets", str(synth_dir / "datasets.jsonl"),
                "--out", str(root / "corpus.json"), "--quiet"]) == 0
    assert run(["split", "--corpus", str(root / "corpus.json"), "--mode", "mask",
                "--fraction", "0.15", "--seed", "2", "--out-dir", str(root / "splits"),
                "--quiet"]) == 0
    train_cfg = root / "train.cfg"
    train_cfg.write_text("max_epochs = 2\nbatch_pairs = 64\nseed = 4\n")
    assert run(["train", "--train", str(root / "splits" / "train.json"),
                "--val", str(root / "splits" / "val.json"),
                "--config", str(train_cfg),
                "--out", str(root / "model.ckpt"),
                "--log", str(root / "metrics.jsonl"), "--quiet"]) == 0
    assert run(["evaluate", "--checkpoint", str(root / "model.ckpt"),
                "--test", str(root / "splits" / "test.json"),
                "--k", "1,5", "--out", str(root / "report.json"), "--quiet"]) == 0
    return root


def _synth_config(root):
    p = root / "synth.cfg"
    p.write_text("n_models = 50\nn_datasets = 8\nn_tasks = 3\nn_families = 4\n"
                 "obs_density = 0.6\n")
    return p


def test_pipeline_outputs_exist(pipeline):
    assert (pipeline / "corpus.json").exists()
    report = json.loads((pipeline / "report.json").read_text())
    assert "tau_w_weighted" in report["aggregates"]
    log_lines = (pipeline / "metrics.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 2
    first = json.loads(log_lines[0])
    assert set(first) == {"epoch", "train_loss", "val_tau_w"}


def test_evaluate_rerun_byte_identical(pipeline):
    out2 = pipeline / "report2.json"
    assert run(["evaluate", "--checkpoint", str(pipeline / "model.ckpt"),
                "--test", str(pipeline / "splits" / "test.json"),
                "--k", "1,5", "--out", str(out2), "--quiet"]) == 0
    assert out2.read_bytes() == (pipeline / "report.json").read_bytes()


def test_recommend_and_rerun_byte_identical(pipeline, tmp_path):
    desc = tmp_path / "desc.txt"
    desc.write_text("a brand new vision benchmark with held-out examples")
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    for out in (out1, out2):
        assert run(["recommend", "--checkpoint", str(pipeline / "model.ckpt"),
                    "--dataset-desc", str(desc), "--task", "vision", "--metric", "accuracy",
                    "--top-k", "10", "--out", str(out), "--quiet"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    ranked = json.loads(out1.read_text())
    assert len(ranked) == 10
    scores = [r["score"] for r in ranked]
    assert scores == sorted(scores, reverse=True)


def test_replace_pool_cli(pipeline, tmp_path):
    corpus = json.loads((pipeline / "corpus.json").read_text())
    models = corpus["models"][:8]
    pool = tmp_path / "pool.jsonl"
    pool.write_text("\n".join(json.dumps({"model": m["key"], "scale": m["params"]})
                              for m in models[:3]))
    catalog = tmp_path / "catalog.jsonl"
    catalog.write_text("\n".join(json.dumps({"model": m["key"], "scale": m["params"]})
                                 for m in models))
    desc = tmp_path / "desc.txt"
    desc.write_text("a text benchmark")
    out = tmp_path / "replaced.json"
    assert run(["replace-pool", "--checkpoint", str(pipeline / "model.ckpt"),
                "--pool", str(pool), "--catalog", str(catalog),
                "--dataset-desc", str(desc), "--task", "text", "--metric", "accuracy",
                "--out", str(out), "--quiet"]) == 0
    result = json.loads(out.read_text())
    assert len(result) == 3
    for entry in result:
        assert entry["selected"]["scale"] <= 1.1 * entry["original"]["scale"]


def test_probe_prior_and_advantage_cli(pipeline, tmp_path):
    probe_out = tmp_path / "probe.json"
    assert run(["probe-prior", "--checkpoint", str(pipeline / "model.ckpt"),
                "--out", str(probe_out), "--quiet"]) == 0
    probe = json.loads(probe_out.read_text())
    assert len(probe["size_scores"]) == 21

    adv_out = tmp_path / "adv.json"
    assert run(["advantage", "--corpus", str(pipeline / "corpus.json"),
                "--by", "family", "--out", str(adv_out), "--quiet"]) == 0
    adv = json.loads(adv_out.read_text())
    assert adv


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["evaluate", "--bogus-flag"]) == 1
    assert run(["nonexistent-command"]) == 1
    assert run(["evaluate", "--checkpoint", str(tmp_path / "missing.ckpt"),
                "--test", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err


def test_schema_violation_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad_corpus.json"
    bad.write_text('{"version": 7}')
    assert run(["split", "--corpus", str(bad), "--mode", "mask", "--fraction", "0.5",
                "--out-dir", str(tmp_path / "s"), "--quiet"]) == 2
    assert "data error" in capsys.readouterr().err


def test_split_invalid_fraction_exits_2(pipeline, tmp_path):
    assert run(["split", "--corpus", str(pipeline / "corpus.json"), "--mode", "mask",
                "--fraction", "1.5", "--out-dir", str(tmp_path / "s"), "--quiet"]) == 2


def test_synth_bad_config_exits_2(tmp_path):
    bad = tmp_path / "synth.cfg"
    bad.write_text("obs_density = 0.0\n")
    assert run(["synth", "--config", str(bad), "--out-dir", str(tmp_path / "o"),
                "--quiet"]) == 2
