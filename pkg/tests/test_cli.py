import json

import pytest

from e2easr.cli import main


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "train"), "--num", "40", "--vocab-size", "4", "--seed", "1"]) == 0
    assert main(["gen", "--out", str(root / "dev"), "--num", "6", "--vocab-size", "4", "--seed", "2"]) == 0
    assert main(["config", "--toy", "--encoder", "conformer", "--decoder", "transducer",
                 "--out", str(root / "cfg.json")]) == 0
    cfg = json.loads((root / "cfg.json").read_text())
    cfg.update(steps=4, batch_size=8, eval_every=2, log_every=1)
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--train", str(root / "train/manifest.jsonl"),
                 "--dev", str(root / "dev/manifest.jsonl"), "--out", str(root / "exp")]) == 0
    return root


def test_train_outputs(run):
    exp = run / "exp"
    for name in ("final.npz", "metrics.jsonl", "vocab.txt", "norm.json", "config.json"):
        assert (exp / name).exists()
    kinds = [json.loads(l)["kind"] for l in (exp / "metrics.jsonl").read_text().splitlines()]
    assert "train" in kinds and "dev" in kinds


def test_decode_and_eval(run, capsys):
    dev = str(run / "dev/manifest.jsonl")
    ck = str(run / "exp/final.npz")
    assert main(["decode", "--checkpoint", ck, "--manifest", dev, "--out", str(run / "g.jsonl"), "--greedy"]) == 0
    assert main(["decode", "--checkpoint", ck, "--manifest", dev, "--out", str(run / "b1.jsonl"),
                 "--beam", "1", "--config", str(run / "cfg.json")]) == 0
    g = [json.loads(l) for l in (run / "g.jsonl").read_text().splitlines()]
    b = [json.loads(l) for l in (run / "b1.jsonl").read_text().splitlines()]
    assert [r["text"] for r in g] == [r["text"] for r in b]
    assert set(g[0]) == {"id", "text", "score"}
    capsys.readouterr()
    assert main(["eval", "--ref", dev, "--hyp", str(run / "g.jsonl")]) == 0
    assert capsys.readouterr().out.startswith("CER ")


def test_eval_identical_is_zero(run, tmp_path, capsys):
    dev = run / "dev/manifest.jsonl"
    hyp = tmp_path / "h.jsonl"
    hyp.write_text("".join(json.dumps({"id": r["id"], "text": r["text"]}) + "\n"
                           for r in map(json.loads, dev.read_text().splitlines())))
    capsys.readouterr()
    assert main(["eval", "--ref", str(dev), "--hyp", str(hyp)]) == 0
    assert capsys.readouterr().out.startswith("CER 0.00%")


def test_bench(run, capsys):
    out = run / "bench.json"
    assert main(["bench", "--checkpoint", str(run / "exp/final.npz"), "--manifest", str(run / "dev/manifest.jsonl"),
                 "--out", str(out), "--csv", str(run / "bench.csv"), "--greedy"]) == 0
    rep = json.loads(out.read_text())
    assert rep["threads"] == 1 and rep["batch_size"] == 1 and rep["num_utterances"] == 6
    assert rep["mean_rtf"] > 0


def test_architecture_mismatch(run, capsys):
    assert main(["config", "--toy", "--encoder", "blstm", "--decoder", "ctc", "--out", str(run / "other.json")]) == 0
    capsys.readouterr()
    code = main(["decode", "--checkpoint", str(run / "exp/final.npz"), "--manifest", str(run / "dev/manifest.jsonl"),
                 "--out", str(run / "x.jsonl"), "--config", str(run / "other.json")])
    err = capsys.readouterr().err
    assert code == 2
    assert "architecture mismatch" in err and '"encoder": "conformer"' in err and '"encoder": "blstm"' in err
    assert not (run / "x.jsonl").exists()


def test_malformed_manifest_reports_line(tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    m.write_text('{"id": "a", "text": "ab", "features": "x.npy"}\n{not json\n')
    code = main(["vocab", "--manifest", str(m), "--out", str(tmp_path / "v.txt")])
    assert code == 2
    assert ":2:" in capsys.readouterr().err
