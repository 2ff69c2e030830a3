import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from plm_forge import cli
from plm_forge import seqdata as sd

SMALL = ["--n-layers", "1", "--n-heads", "2", "--head-dim", "8", "--warmup-steps", "1",
         "--batch-size-tokens", "128", "--checkpoint-every", "3", "--threads", "1"]


def write_records(path, n, seed=0, lo=20, hi=40):
    rng = np.random.default_rng(seed)
    recs = [sd.SequenceRecord(f"s{i}", "".join(rng.choice(list(sd.CANONICAL), rng.integers(lo, hi)))) for i in range(n)]
    sd.write_fasta(recs, path)
    return recs


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """prep + a short training run shared by the read-only commands."""
    d = tmp_path_factory.mktemp("ws")
    write_records(d / "in.fasta", 30)
    assert run("prep", "--input", d / "in.fasta", "--out", d / "data", "--context-len", 64, "--holdout-fraction", 0.2) == 0
    assert run("train", "--data", d / "data", "--out", d / "run", "--total-steps", 6, *SMALL) == 0
    return d


class TestPrep:
    def test_ten_records_both_directions(self, tmp_path, capsys):
        write_records(tmp_path / "in.fasta", 10)
        assert run("prep", "--input", tmp_path / "in.fasta", "--out", tmp_path / "d", "--holdout-fraction", 0, "--context-len", 64) == 0
        man = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(man["entries"]) == 20
        assert sorted(e["direction"] for e in man["entries"]) == ["C2N"] * 10 + ["N2C"] * 10
        for name in ("clusters.tsv", "split.json", "shards/train.npy", "train.fasta"):
            assert (tmp_path / "d" / name).exists()
        assert "20 tokenized entries" in capsys.readouterr().out

    def test_rerun_byte_identical(self, tmp_path):
        write_records(tmp_path / "in.fasta", 25)
        args = ["prep", "--input", tmp_path / "in.fasta", "--context-len", 64, "--holdout-fraction", 0.3, "--seed", 4]
        run(*args, "--out", tmp_path / "a")
        run(*args, "--out", tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    def test_token_accounting(self, workspace):
        man = json.loads((workspace / "data" / "manifest.json").read_text())
        for part, info in man["shards"].items():
            inputs = np.load(workspace / "data" / "shards" / f"{part}.npy")
            assert info["tokens"] == int((inputs != 0).sum())
            lengths = sum(e["length"] for e in man["entries"] if e["partition"] == part)
            assert info["tokens"] == lengths

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        write_records(tmp_path / "in.fasta", 25)
        monkeypatch.setenv("PLM_FORGE_SEED", "17")
        run("prep", "--input", tmp_path / "in.fasta", "--out", tmp_path / "d", "--context-len", 64)
        assert json.loads((tmp_path / "d" / "manifest.json").read_text())["seed"] == 17

    def test_invalid_fasta(self, tmp_path, capsys):
        (tmp_path / "bad.fasta").write_text("MKV\n>a\nMK\n")
        assert run("prep", "--input", tmp_path / "bad.fasta", "--out", tmp_path / "d") == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert run("prep", "--input", tmp_path / "nope.fasta", "--out", tmp_path / "d") == 2


class TestTrain:
    def test_log_rows_equal_steps(self, workspace):
        rows = list(csv.DictReader(open(workspace / "run" / "log.csv")))
        assert [int(r["step"]) for r in rows] == list(range(1, 7))
        assert (workspace / "run" / "checkpoint" / "manifest.json").exists()

    def test_deterministic(self, workspace, tmp_path):
        run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--total-steps", 6, *SMALL)
        assert (tmp_path / "r" / "log.csv").read_bytes() == (workspace / "run" / "log.csv").read_bytes()

    def test_resume_appends(self, workspace, tmp_path):
        run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--total-steps", 6, *SMALL)
        run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--total-steps", 9, *SMALL, "--resume")
        rows = list(csv.DictReader(open(tmp_path / "r" / "log.csv")))
        assert [int(r["step"]) for r in rows] == list(range(1, 10))

    def test_config_file_and_override(self, workspace, tmp_path):
        (tmp_path / "c.txt").write_text("# tiny\nn_layers = 1\nn_heads = 2\nhead_dim = 8\ntotal_steps = 10\nwarmup_steps = 1\n")
        assert run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", tmp_path / "c.txt",
                   "--total-steps", 2, "--batch-size-tokens", 128, "--threads", 1) == 0
        assert len((tmp_path / "r" / "log.csv").read_text().splitlines()) == 3

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("dropout = 0.1\n")
        assert run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", tmp_path / "c.txt") == 1
        assert "unknown config key" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, workspace, tmp_path):
        code = run("train", "--data", workspace / "data", "--out", tmp_path / "r", "--total-steps", 4, *SMALL[:-2],
                   "--peak-lr", "1e300", "--clip-norm", "1e300", "--threads", 1)
        assert code == 3

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "r") == 2


class TestFinetune:
    def test_requires_base(self, workspace, tmp_path, capsys):
        assert run("finetune", "--data", workspace / "data", "--out", tmp_path / "f") == 1
        assert "--base-checkpoint" in capsys.readouterr().err

    def test_runs(self, workspace, tmp_path, capsys):
        code = run("finetune", "--data", workspace / "data", "--out", tmp_path / "f",
                   "--base-checkpoint", workspace / "run" / "checkpoint", "--batch-size-tokens", 128, "--threads", 1)
        assert code == 0
        out = capsys.readouterr().out
        assert "peak_lr=0.00012" in out  # default 6e-4 / 5


class TestSample:
    def test_counts_prompt_and_determinism(self, workspace, tmp_path, capsys):
        args = ["sample", "--checkpoint", workspace / "run" / "checkpoint", "--temperatures", "0.2,1.0",
                "--top-ps", "0.9", "--n-per-cell", 5, "--prompt", "EVQ", "--max-new-tokens", 20, "--threads", 1,
                "--no-dedupe"]
        assert run(*args, "--out", tmp_path / "a") == 0
        assert "generated 10 records" in capsys.readouterr().out
        recs = sd.read_fasta(tmp_path / "a" / "library.fasta")
        assert len(recs) == 10 and all(r.residues.startswith("EVQ") for r in recs)
        assert {r.id.split("|")[1] for r in recs} == {"T=0.2", "T=1"}
        run(*args, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "library.fasta").read_bytes() == (tmp_path / "b" / "library.fasta").read_bytes()

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "ck").mkdir()
        assert run("sample", "--checkpoint", tmp_path / "ck", "--out", tmp_path / "o") == 2
        assert "manifest" in capsys.readouterr().err


class TestEval:
    def test_report_and_svgs(self, workspace, tmp_path):
        code = run("eval", "--checkpoint", workspace / "run" / "checkpoint", "--fasta", workspace / "data" / "heldout.fasta",
                   "--out", tmp_path / "ppl.json", "--format", "json", "--svg", tmp_path / "h.svg",
                   "--identity-ref", workspace / "data" / "train.fasta", "--identity-svg", tmp_path / "i.svg", "--threads", 1)
        assert code == 0
        rows = json.loads((tmp_path / "ppl.json").read_text())
        assert rows[-1]["id"] == "CORPUS_TOKEN_WEIGHTED" and rows[-1]["perplexity"] > 1
        for svg in ("h.svg", "i.svg"):
            assert ET.parse(tmp_path / svg).getroot().tag.endswith("svg")


class TestFitness:
    def _dataset(self, d, seqs, ys):
        (d / "fit.csv").write_text("sequence,measurement\n" + "".join(f"{s},{y}\n" for s, y in zip(seqs, ys)))
        (d / "m.txt").write_text("toy,fit.csv,spearman\nmissing,nope.csv,spearman\n")

    def test_oracle_dataset(self, workspace, tmp_path, capsys):
        # measurements are the model's own scores, so Spearman is exactly 1
        from plm_forge import evaluate as ev
        from plm_forge.train import load_checkpoint

        ck = load_checkpoint(workspace / "run" / "checkpoint")
        rng = np.random.default_rng(0)
        seqs = ["".join(rng.choice(list(sd.CANONICAL), int(rng.integers(8, 20)))) for _ in range(15)]
        ys = ev.likelihood_scorer(ck.state.params, ck.model_config)(seqs)
        self._dataset(tmp_path, seqs, [repr(float(y)) for y in ys])
        code = run("fitness", "--checkpoint", f"m={workspace / 'run' / 'checkpoint'}", "--manifest", tmp_path / "m.txt",
                   "--out", tmp_path / "r.csv", "--svg-dir", tmp_path / "svg", "--threads", 1)
        assert code == 2  # the missing dataset is reported, not fatal
        rows = {(r["model"], r["dataset"]): r for r in csv.DictReader(open(tmp_path / "r.csv"))}
        assert float(rows[("m", "toy")]["value"]) == 1.0
        assert float(rows[("m", "AVERAGE")]["value"]) == 1.0
        assert "dataset=missing" in capsys.readouterr().err
        assert ET.parse(tmp_path / "svg" / "toy.svg").getroot().tag.endswith("svg")


class TestRank:
    def test_keep_half(self, workspace, tmp_path):
        write_records(tmp_path / "lib.fasta", 100, seed=3, lo=10, hi=30)
        code = run("rank", "--checkpoint", workspace / "run" / "checkpoint", "--input", tmp_path / "lib.fasta",
                   "--keep", 0.5, "--out", tmp_path / "top.fasta", "--scores", tmp_path / "s.csv", "--threads", 1)
        assert code == 0
        kept = sd.read_fasta(tmp_path / "top.fasta")
        assert len(kept) == 50
        scores = [float(r["score"]) for r in csv.DictReader(open(tmp_path / "s.csv"))]
        assert scores == sorted(scores, reverse=True)


class TestParser:
    @pytest.mark.parametrize("cmd", ["prep", "train", "finetune", "sample", "eval", "fitness", "rank"])
    def test_help_lists_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main([cmd, "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        assert "--threads" in out
        sub = cli.build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in out

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["rank", "--bogus"])
        assert e.value.code == 1

    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            cli.main([])
        assert e.value.code == 1
