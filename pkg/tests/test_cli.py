import json

import pytest

from fcgosr.cli import main

LISTING = """\
FUNC main
push rbp
call helper
call missing
ret
ENDF
FUNC helper
mov eax, 1
ret
ENDF
"""

TINY_CFG = {"network": {"hidden": [8]}, "pretrain": {"epochs": 1, "views": 2}, "finetune": {"epochs": 2}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "a.asm").write_text(LISTING)
    (tmp_path / "syn.json").write_text(json.dumps({"num_classes": 3, "samples_per_class": 8, "seed": 3}))
    (tmp_path / "tiny.json").write_text(json.dumps(TINY_CFG))
    (tmp_path / "run.json").write_text(json.dumps({
        "corpus": {"path": "c.jsonl"},
        "grid": {"pretrain": ["none", "fcg_shift"], "loss": ["ce"]},
        "splits": {"known_count": 2, "groups": 1, "runs_per_group": 1},
        **TINY_CFG,
    }))
    return tmp_path


def twice(workdir, argv, out_name):
    main(argv)
    first = (workdir / out_name).read_bytes()
    main(argv)
    return first, (workdir / out_name).read_bytes()


def test_seeded_commands_are_byte_reproducible(workdir):
    a, b = twice(workdir, ["extract", "a.asm", "--out", "e.jsonl", "--label", "x"], "e.jsonl")
    assert a == b and json.loads(a)["label"] == "x"
    a, b = twice(workdir, ["synth", "--config", "syn.json", "--out", "c.jsonl"], "c.jsonl")
    assert a == b
    a, b = twice(workdir, ["pretrain", "c.jsonl", "--config", "tiny.json", "--known", "0,1",
                           "--kind", "fcg_random", "--seed", "2", "--out", "p.json"], "p.json")
    assert a == b
    a, b = twice(workdir, ["finetune", "c.jsonl", "--model", "p.json", "--config", "tiny.json",
                           "--known", "0,1", "--loss", "triplet", "--seed", "2", "--out", "f.json"], "f.json")
    assert a == b
    a, b = twice(workdir, ["run", "--config", "run.json", "--out", "o"], "o/report.json")
    assert a == b


def test_full_chain(workdir, capsys):
    main(["synth", "--config", "syn.json", "--out", "c.jsonl"])
    main(["stats", "c.jsonl", "--out", "stats.json"])
    assert json.loads((workdir / "stats.json").read_text())["num_graphs"] == 24
    main(["split", "c.jsonl", "--known", "2", "--groups", "1", "--runs", "2", "--out", "s.json"])
    assert len(json.loads((workdir / "s.json").read_text())["splits"]) == 2
    main(["finetune", "c.jsonl", "--config", "tiny.json", "--known", "0,1", "--out", "f.json"])
    main(["embed", "c.jsonl", "--model", "f.json", "--out", "r.jsonl"])
    main(["fit-osr", "r.jsonl", "--threshold", "manual", "--out", "osr.json"])
    assert json.loads((workdir / "osr.json").read_text())["threshold"]["mode"] == "manual"
    main(["score", "r.jsonl", "--osr", "osr.json", "--out", "score.json"])
    score = json.loads((workdir / "score.json").read_text())
    assert len(score["scores"]) == 24 and 0.0 <= score["auc_full"] <= 1.0
    main(["run", "--config", "run.json", "--out", "o"])
    capsys.readouterr()
    main(["metrics", "o/report.json"])
    assert "fcg_shift-ce-statistical" in capsys.readouterr().out


def test_bad_known_label(workdir):
    main(["synth", "--config", "syn.json", "--out", "c.jsonl"])
    with pytest.raises(SystemExit):
        main(["finetune", "c.jsonl", "--known", "0,zebra", "--out", "f.json"])


def test_flag_forms(workdir):
    main(["extract", "--in", "a.asm", "--out", "e1.jsonl"])
    main(["extract", "a.asm", "--out", "e2.jsonl"])
    assert (workdir / "e1.jsonl").read_bytes() == (workdir / "e2.jsonl").read_bytes()
    main(["synth", "--config", "syn.json", "--out", "c.jsonl"])
    main(["stats", "--in", "c.jsonl", "--out", "s.json"])
    main(["finetune", "--corpus", "c.jsonl", "--config", "tiny.json", "--known", "0,1", "--out", "f.json"])
    main(["embed", "--corpus", "c.jsonl", "--model", "f.json", "--out", "r.jsonl"])
    main(["fit-osr", "--in", "r.jsonl", "--out", "osr.json"])
    main(["score", "--in", "r.jsonl", "--osr", "osr.json", "--model", "f.json", "--out", "score.json"])
    assert json.loads((workdir / "score.json").read_text())["predictions"]
    with pytest.raises(SystemExit):
        main(["stats", "--out", "s.json"])
    with pytest.raises(SystemExit):
        main(["extract", "--out", "e.jsonl"])
