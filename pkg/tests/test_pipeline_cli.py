import json

import numpy as np
import pytest
import torch

from dck.cli import main
from dck.config import dump_config, tiny_config
from dck.corpus import HashMismatch
from dck.pipeline import dataset_statistics, load_prepared, preprocess, raw_split_path

WORDS = "cats dogs teach bus swim read music blue red tall cook bake run walk".split()


def write_persona(raw_dir, n_dialogues=4, turns=3, seed=0):
    rng = np.random.default_rng(seed)
    raw_dir.mkdir(parents=True, exist_ok=True)
    say = lambda k=4: " ".join(rng.choice(WORDS, k))  # noqa: E731
    for split in ("train", "valid", "test"):
        lines = []
        for _ in range(n_dialogues):
            lines += [f"1 your persona: i like {say(2)}.", f"2 your persona: my hobby is {say(1)}."]
            for t in range(turns):
                truth = say()
                cands = "|".join([say() for _ in range(5)] + [truth])
                lines.append(f"{t + 3} {say()} ?\t{truth}\t\t{cands}")
        raw_split_path(raw_dir, "persona_original", split).write_text("\n".join(lines) + "\n")


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    raw = tmp_path / "raw"
    write_persona(raw)
    monkeypatch.setenv("DCK_DATA_DIR", str(tmp_path / "data"))
    cfg = tiny_config(dataset="persona_original", n_candidates=5, max_utterances=4, max_knowledge=2, max_tokens=6,
                      max_epochs=2, skipgram_epochs=1)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(dump_config(cfg))
    return tmp_path, raw, cfg, cfg_path


def test_statistics_and_manifest(workspace):
    tmp, raw, cfg, _ = workspace
    assert dataset_statistics(raw, "persona_original")["train"] == {"conversations": 4, "turns": 12}
    manifest = preprocess("persona_original", raw, tmp / "prep", cfg)
    assert manifest["samples"] == {"train": 12, "valid": 12, "test": 12}
    prepared = load_prepared(tmp / "prep", cfg)
    assert prepared.vocab.hash == manifest["vocab_hash"]
    assert prepared.split("train", cfg).candidates.shape == (12, 5, 6)
    assert not prepared.pretrained.any() and prepared.corpus[2:].any()
    with pytest.raises(HashMismatch):
        load_prepared(tmp / "prep", cfg, expected_vocab_hash="0" * 16)


def test_missing_train_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        preprocess("persona_original", tmp_path, tmp_path / "out", tiny_config(dataset="persona_original"))


def test_cli_end_to_end(workspace, capsys):
    tmp, raw, cfg, cfg_path = workspace
    data_dir = tmp / "data" / "persona_original"
    assert main(["preprocess", "--dataset", "persona_original", "--in", str(raw), "--config", str(cfg_path)]) == 0
    assert (data_dir / "manifest.json").exists()
    capsys.readouterr()

    ckpt = tmp / "ck.pt"
    assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(ckpt)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["checkpoint"] == str(ckpt) and 1 <= summary["epochs_run"] <= 2
    history = json.loads(ckpt.with_suffix(".history.json").read_text())
    assert history[0]["epoch"] == 1
    assert torch.load(ckpt, weights_only=False)["config"]["seed"] == 3

    report_path = tmp / "report.json"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--split", "test", "--buckets", "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["n_samples"] == 12 and set(report["recall"]) == {"R5@1", "R5@2", "R5@5"}
    assert report["recall"]["R5@5"] == 1.0 and sum(b["count"] for b in report["buckets"].values()) == 12

    inspect_path = tmp / "inspect.json"
    assert main(["inspect", "--checkpoint", str(ckpt), "--sample-id", "4", "--out", str(inspect_path)]) == 0
    record = json.loads(inspect_path.read_text())
    assert record["sample_id"] == 4 and len(record["candidates"]) == 5
    assert sum(record["gamma"]) == pytest.approx(1.0)


def test_cli_ablation_flag(workspace, capsys):
    tmp, raw, cfg, cfg_path = workspace
    preprocess("persona_original", raw, tmp / "data" / "persona_original", cfg)
    ckpt = tmp / "ab.pt"
    assert main(["train", "--config", str(cfg_path), "--ablate", "drop_knowledge", "--out", str(ckpt)]) == 0
    assert torch.load(ckpt, weights_only=False)["config"]["drop_knowledge"] is True


def test_cli_gradcheck_subset(tmp_path):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--only", "layer_norm,matcher", "--out", str(out)]) == 0
    record = json.loads(out.read_text())
    assert record["max_rel_error"] < 1e-3


def test_cli_dump_config(capsys):
    assert main(["dump-config", "--dataset", "cmudog"]) == 0
    assert "max_knowledge = 20" in capsys.readouterr().out
