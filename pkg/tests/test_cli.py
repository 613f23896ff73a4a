import json

import pytest

from twa.cli import main
from twa.model import Seq2SeqModel

WORKED = 'w1\tsysA\t0\t"src"\t"abcde"\t[{"s":2,"e":4,"cat":"accuracy","sev":"minor"}]\n'
VOCAB = ["<pad>", "<s>", "</s>", "<unk>", "a", "b", "c", "d", "e"]


@pytest.fixture
def worked(tmp_path):
    (tmp_path / "d.tsv").write_text(WORKED, encoding="utf-8")
    (tmp_path / "v.json").write_text(json.dumps(VOCAB), encoding="utf-8")
    return tmp_path


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--preset", "tiny", "--seed", "2", "--out-dir", str(root / "d")]) == 0
    return root / "d"


def tiny_train_args(data, out, *extra):
    return ["train", "--dataset", str(data / "train.tsv"), "--vocab", str(data / "vocab.json"),
            "--out-dir", str(out), "--embed-dim", "8", "--hidden-dim", "16", "--max-len", "8",
            "--set", "total_steps=4", "--set", "eval_every_steps=2", "--set", "batch_size=4",
            "--validation", str(data / "validation.tsv"),
            "--clean-targets", str(data / "clean_targets.tsv"), *extra]


def test_align_worked_example(worked, capsys):
    assert main(["align", "--dataset", str(worked / "d.tsv"), "--vocab", str(worked / "v.json")]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["weights"] == [1, 1, -1, -1, 0, 0]
    assert rec["tokens"] == ["a", "b", "c", "d", "e", "</s>"]
    assert rec["spans"] == [[0, 2, 1.0], [2, 4, -1.0], [4, 6, 0.0]]


def test_gen_byte_identical(tmp_path, generated):
    assert main(["gen", "--preset", "tiny", "--seed", "2", "--out-dir", str(tmp_path / "again")]) == 0
    for name in ("train.tsv", "validation.tsv", "test.tsv", "clean_targets.tsv", "vocab.json"):
        assert (tmp_path / "again" / name).read_bytes() == (generated / name).read_bytes()


def test_gen_task_override(tmp_path):
    assert main(["gen", "--preset", "tiny", "--out-dir", str(tmp_path / "d"),
                 "--set", "corruption_prob=0", "--n-sources", "5"]) == 0
    text = (tmp_path / "d" / "train.tsv").read_text(encoding="utf-8")
    assert all(line.endswith("\t[]") for line in text.splitlines())


def test_ingest_and_stats(tmp_path, generated, capsys):
    out = tmp_path / "canon.tsv"
    assert main(["ingest", "--input", str(generated / "train.tsv"), "--output", str(out),
                 "--vocab-out", str(tmp_path / "v.json"), "--vocab-size", "30"]) == 0
    assert out.read_bytes() == (generated / "train.tsv").read_bytes()
    capsys.readouterr()
    assert main(["stats", "--dataset", str(out), "--vocab", str(generated / "vocab.json")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n_examples"] == 80 and 0 < stats["mean_error_proportion"] < 1


def test_pairs_subcommand(tmp_path, generated):
    out = tmp_path / "p.tsv"
    assert main(["pairs", "--dataset", str(generated / "train.tsv"), "--output", str(out),
                 "--preferred", "reference_only", "--dispreferred", "worst_submission"]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 20 and all(len(line.split("\t")) == 12 for line in lines)


def test_pairs_bad_combination(tmp_path, generated):
    code = main(["pairs", "--dataset", str(generated / "train.tsv"), "--output", str(tmp_path / "p"),
                 "--preferred", "all_submissions", "--dispreferred", "best_submission"])
    assert code == 1 and not (tmp_path / "p").exists()


def test_train_eval_rank_diff_pipeline_reproducible(tmp_path, generated):
    def run(root):
        assert main(tiny_train_args(generated, root / "m")) == 0
        assert main(tiny_train_args(generated, root / "m2", "--method", "twa_nl", "--seed", "1")) == 0
        assert main(["eval", "--dataset", str(generated / "test.tsv"), "--vocab", str(generated / "vocab.json"),
                     "--clean-targets", str(generated / "clean_targets.tsv"), "--n-resamples", "100",
                     "--system", f"a={root / 'm' / 'checkpoint.json'}",
                     "--system", f"b={root / 'm2' / 'checkpoint.json'}", "--out-dir", str(root / "ev")]) == 0
        assert main(["rank-diff", "--base", str(root / "m" / "checkpoint.json"),
                     "--trained", str(root / "m2" / "checkpoint.json"), "--dataset", str(generated / "train.tsv"),
                     "--vocab", str(generated / "vocab.json"), "--output", str(root / "rd.csv")]) == 0
        return [root / "m" / "log.csv", root / "m" / "checkpoints.csv", root / "ev" / "scores.csv",
                root / "ev" / "ranks.csv", root / "ev" / "pvalues.csv", root / "rd.csv",
                root / "m" / "checkpoint.json"]

    first, second = run(tmp_path / "one"), run(tmp_path / "two")
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes(), a.name
    header = (tmp_path / "one" / "rd.csv").read_text().splitlines()[0]
    assert header.startswith("example_index,source_id,system_id,position,token,base_rank,trained_rank")
    assert (tmp_path / "one" / "ev" / "ranks.csv").read_text().startswith("system,mean,rank\n")


def test_train_dpo(tmp_path, generated):
    pairs = tmp_path / "p.tsv"
    assert main(["pairs", "--dataset", str(generated / "train.tsv"), "--output", str(pairs)]) == 0
    args = ["train", "--pairs", str(pairs), "--method", "dpo", "--vocab", str(generated / "vocab.json"),
            "--out-dir", str(tmp_path / "m"), "--embed-dim", "8", "--hidden-dim", "16", "--max-len", "8",
            "--set", "total_steps=2"]
    assert main(args) == 0
    assert (tmp_path / "m" / "checkpoint.json").exists()


def test_ablate_outputs(tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--preset", "tiny", "--out-dir", str(out), "--n-resamples", "100"]) == 0
    for name in ("sft", "non_error_only", "span_ul", "off_trajectory"):
        Seq2SeqModel.load(out / f"{name}.json")
    ranks = (out / "ranks.csv").read_text().splitlines()
    assert ranks[0] == "system,mean,rank" and len(ranks) == 6


def test_ablate_manifest(tmp_path, generated):
    assert main(tiny_train_args(generated, tmp_path / "base")) == 0
    (tmp_path / "ft.cfg").write_text("batch_size=4\ntotal_steps=2\neval_every_steps=1\nlearning_rate=0.001\n")
    manifest = {
        "dataset": str(generated / "train.tsv"), "validation": str(generated / "validation.tsv"),
        "test": str(generated / "test.tsv"), "vocab": str(generated / "vocab.json"),
        "clean_targets": str(generated / "clean_targets.tsv"),
        "base": "base/checkpoint.json", "config": "ft.cfg", "methods": ["sft", "twa_nl"],
        "seed": 3, "out_dir": "out",
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["ablate", "--manifest", str(tmp_path / "m.json"), "--n-resamples", "50"]) == 0
    first = (tmp_path / "out" / "scores.csv").read_bytes()
    assert main(["ablate", "--manifest", str(tmp_path / "m.json"), "--n-resamples", "50"]) == 0
    assert (tmp_path / "out" / "scores.csv").read_bytes() == first
    manifest["base"] = "missing.json"
    (tmp_path / "bad.json").write_text(json.dumps(manifest))
    assert main(["ablate", "--manifest", str(tmp_path / "bad.json")]) == 2


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["stats", "--bogus"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["fly"]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["stats", "--dataset", str(tmp_path / "none"), "--vocab", "v"]) == 2

    def test_malformed_dataset(self, worked, capsys):
        (worked / "bad.tsv").write_text("x\ty\n")
        assert main(["stats", "--dataset", str(worked / "bad.tsv"), "--vocab", str(worked / "v.json")]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_nan_is_numerical_failure(self, tmp_path, generated):
        assert main(tiny_train_args(generated, tmp_path / "m")) == 0
        blob = json.loads((tmp_path / "m" / "checkpoint.json").read_text())
        blob["params"]["out.b"]["data"] = [float("nan")] * len(blob["params"]["out.b"]["data"])
        (tmp_path / "nan.json").write_text(json.dumps(blob))
        out = tmp_path / "nanrun"
        assert main(tiny_train_args(generated, out, "--base", str(tmp_path / "nan.json"))) == 3
        assert not out.exists()

    def test_partial_outputs_removed(self, tmp_path, generated):
        out = tmp_path / "canon.tsv"
        code = main(["ingest", "--input", str(generated / "train.tsv"), "--output", str(out),
                     "--vocab-out", str(tmp_path / "sub" / "v.json"), "--vocab-size", "3"])
        assert code == 2
        assert not out.exists() and not (tmp_path / "sub").exists()

    def test_vocab_mismatch(self, tmp_path, generated, worked):
        assert main(tiny_train_args(generated, tmp_path / "m")) == 0
        code = main(["eval", "--dataset", str(generated / "test.tsv"), "--vocab", str(worked / "v.json"),
                     "--system", f"a={tmp_path / 'm' / 'checkpoint.json'}", "--out-dir", str(tmp_path / "e")])
        assert code == 2 and not (tmp_path / "e").exists()


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "twa", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "ablate" in r.stdout
