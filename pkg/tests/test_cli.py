import csv
import re

import numpy as np
import pytest

from ftlab import cli
from ftlab import trainer as TR
from ftlab.checkpoint import load_checkpoint

TINY = ["--synth", "--synth-size", "60", "--synth-seed", "3"]


@pytest.fixture(scope="module")
def tiny_pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    args = ["pretrain", "--synth", "--steps", "20", "--hidden", "16", "--heads", "2",
            "--max-len", "16", "--out", str(out)]
    assert cli.main(args) == 0
    return out / "pretrained.ftlb"


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    return code, (capsys.readouterr() if capsys else None)


def manifest(path):
    head, _, config = path.read_text(encoding="utf-8").partition("[config]\n")
    return dict(line.split("=", 1) for line in head.splitlines()), config


class TestPretrain:
    def test_checkpoint_and_manifest(self, tiny_pretrained):
        ck = load_checkpoint(tiny_pretrained)
        assert ck.meta["kind"] == "pretrained" and ck.meta["pretrain_steps"] == 20
        info, config = manifest(tiny_pretrained.parent / "manifest.txt")
        assert info["output.checkpoint"] == str(tiny_pretrained)
        assert "steps=20\n" in config

    def test_rerun_byte_identical(self, tmp_path, tiny_pretrained):
        args = ["pretrain", "--synth", "--steps", "20", "--hidden", "16", "--heads", "2", "--max-len", "16"]
        assert run(args + ["--out", tmp_path])[0] == 0
        assert (tmp_path / "pretrained.ftlb").read_bytes() == tiny_pretrained.read_bytes()

    def test_zero_steps_is_fresh_init(self, tmp_path):
        assert run(["pretrain", "--synth", "--steps", "0", "--hidden", "16", "--heads", "2",
                    "--seed", "5", "--out", tmp_path])[0] == 0
        ck = load_checkpoint(tmp_path / "pretrained.ftlb")
        from ftlab import encoder as E

        init = E.init_encoder_params(TR.encoder_config(ck), TR.streams(5)["init"])
        assert all(ck[k].tobytes() == init[k].tobytes() for k in init)

    def test_missing_corpus(self, tmp_path):
        assert run(["pretrain", "--out", tmp_path])[0] == 2


class TestFinetune:
    def test_history_manifest_and_table(self, tmp_path, tiny_pretrained, capsys):
        code, out = run(["finetune", "--pretrained", tiny_pretrained, *TINY, "--llrd", "4group",
                         "--lr", "3e-5", "--out", tmp_path], capsys)
        assert code == 0
        assert "| Model" in out.out and "Encoder + LLRD(4-Groups)" in out.out
        assert re.search(r"\| \d+\.\d\d +\| \d+\.\d\d", out.out)
        info, config = manifest(tmp_path / "manifest.txt")
        lrs = [float(info[f"group.{g}.lr"]) for g in ("group1", "group2", "group3", "head")]
        np.testing.assert_allclose(lrs, [1.1538e-5, 3e-5, 7.8e-5, 3e-4], rtol=5e-5)
        assert "epochs=3\n" in config and "batch_size=8\n" in config and "warmup=0.1\n" in config
        with open(tmp_path / "history.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == list(cli.HISTORY_FIELDS)
        assert [r["split"] for r in rows] == ["val", "val", "val", "test"]
        assert {r["run_id"] for r in rows} == {info["run_id"]}

    def test_mixout_zero_matches_default(self, tmp_path, tiny_pretrained):
        base = ["finetune", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1"]
        assert run(base + ["--out", tmp_path / "a"])[0] == 0
        assert run(base + ["--mixout", "0.0", "--out", tmp_path / "b"])[0] == 0
        strip = lambda p: [r[2:] for r in csv.reader(open(p))]  # noqa: E731
        assert strip(tmp_path / "a" / "history.csv") == strip(tmp_path / "b" / "history.csv")

    def test_isolation_rule_exit_code(self, tmp_path, tiny_pretrained, capsys):
        code, out = run(["finetune", "--pretrained", tiny_pretrained, *TINY, "--pool", "avg4",
                         "--reinit", "2", "--out", tmp_path], capsys)
        assert code == 2
        assert "re-initialis" in out.err

    def test_exit_codes(self, tmp_path, tiny_pretrained):
        bad = tmp_path / "bad.tsv"
        bad.write_text("text\tlabel\nx\tnonsense\n", encoding="utf-8")
        corrupt = tmp_path / "corrupt.ftlb"
        corrupt.write_bytes(b"NOPE" + tiny_pretrained.read_bytes()[4:])
        assert run(["finetune", "--pretrained", tiny_pretrained, "--out", tmp_path])[0] == 2
        assert run(["finetune", "--pretrained", tiny_pretrained, "--data", bad, "--out", tmp_path])[0] == 3
        assert run(["finetune", "--pretrained", corrupt, *TINY, "--out", tmp_path])[0] == 4
        assert run(["finetune", "--pretrained", tmp_path / "absent.ftlb", *TINY, "--out", tmp_path])[0] == 3
        assert run(["finetune", "--bogus-flag"])[0] == 2

    def test_tsv_input(self, tmp_path, tiny_pretrained):
        rows = ["text\tlabel"] + [f"c{i % 2}m0 w{i}\t{('not_hate', 'implicit_hate')[i % 2]}" for i in range(30)]
        rows.append("ignored\texplicit_hate")
        path = tmp_path / "d.tsv"
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        assert run(["finetune", "--pretrained", tiny_pretrained, "--data", path, "--epochs", "1",
                    "--out", tmp_path / "o"])[0] == 0

    def test_config_file_and_override(self, tmp_path, tiny_pretrained):
        conf = tmp_path / "run.conf"
        conf.write_text("# desk run\nepochs = 1\nllrd = 2group\nsynth = true\nsynth-size = 60\n", encoding="utf-8")
        assert run(["finetune", "--config", conf, "--pretrained", tiny_pretrained, "--llrd", "4group",
                    "--out", tmp_path / "o"])[0] == 0
        _, config = manifest(tmp_path / "o" / "manifest.txt")
        assert "epochs=1\n" in config and "llrd=4group\n" in config and "synth_size=60\n" in config
        conf.write_text("nonsense_key = 1\n", encoding="utf-8")
        assert run(["finetune", "--config", conf, "--out", tmp_path / "p"])[0] == 2

    def test_run_id_stable(self):
        args = cli.parse_args(["finetune", "--synth", "--seed", "4"])
        again = cli.parse_args(["finetune", "--seed", "4", "--synth"])
        assert cli.run_id(cli.resolved_config_text(args)) == cli.run_id(cli.resolved_config_text(again))
        other = cli.parse_args(["finetune", "--synth", "--seed", "5"])
        assert cli.run_id(cli.resolved_config_text(args)) != cli.run_id(cli.resolved_config_text(other))


class TestGrid:
    def test_lr_grid_rows(self, tmp_path, tiny_pretrained, capsys):
        code, out = run(["grid", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1",
                         "--out", tmp_path], capsys)
        assert code == 0
        table = [line for line in out.out.splitlines() if line.startswith("| Encoder")]
        with open(tmp_path / "results.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(table) == len(rows) == 3
        assert [float(r["lr"]) for r in rows] == [1e-5, 3e-5, 5e-5]
        assert (tmp_path / "results.txt").read_text() == out.out

    def test_full_grids_count(self):
        args = cli.parse_args(["grid", "--synth", "--full-grids"])
        configs = cli.grid_configs(args)
        assert len(configs) == 36
        assert {(lr, s.mixout_p, s.reinit_n) for lr, s in configs} == {
            (lr, m, n) for lr in (1e-5, 3e-5, 5e-5) for m in (0.3, 0.5, 0.7) for n in (0, 1, 2, 3)
        }

    def test_empty_grid(self, tmp_path, tiny_pretrained):
        assert run(["grid", "--pretrained", tiny_pretrained, *TINY, "--lr-grid", "", "--out", tmp_path])[0] == 2

    def test_parallel_matches_serial(self, tmp_path, tiny_pretrained):
        base = ["grid", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1", "--lr-grid", "1e-3,2e-3"]
        assert run(base + ["--out", tmp_path / "s"])[0] == 0
        assert run(base + ["--jobs", "2", "--out", tmp_path / "p"])[0] == 0
        assert (tmp_path / "s" / "results.csv").read_bytes() == (tmp_path / "p" / "results.csv").read_bytes()


class TestVariance:
    def test_matches_variance_study(self, tmp_path, tiny_pretrained, capsys):
        code, out = run(["variance", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1",
                         "--seeds", "1,2,3", "--out", tmp_path], capsys)
        assert code == 0
        with open(tmp_path / "variance.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == ["Encoder Baseline", "Encoder + LLRD(4-Groups) + Re-init(2) + Mixout(0.7)"]
        assert "±" in out.out
        args = cli.parse_args(["variance", *TINY, "--epochs", "1"])
        examples, c = cli.load_labelled(args)
        rep = TR.variance_study(load_checkpoint(tiny_pretrained), examples,
                                cli.train_config(args, cli.parse_strategy("baseline")), [1, 2, 3], c)
        for k in ("precision", "recall", "accuracy", "f_score"):
            assert float(rows[0][f"{k}_std"]) == rep.std[k]
            assert float(rows[0][f"{k}_mean"]) == rep.mean[k]

    def test_duplicate_seeds_zero_std(self, tmp_path, tiny_pretrained):
        assert run(["variance", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1", "--seeds", "4,4",
                    "--strategy", "baseline", "--out", tmp_path])[0] == 0
        with open(tmp_path / "variance.csv", newline="") as fh:
            row = next(csv.DictReader(fh))
        assert all(float(row[f"{k}_std"]) == 0.0 for k in ("precision", "recall", "accuracy", "f_score"))

    def test_one_seed_is_usage_error(self, tmp_path, tiny_pretrained):
        assert run(["variance", "--pretrained", tiny_pretrained, *TINY, "--seeds", "1", "--out", tmp_path])[0] == 2

    def test_bad_strategy(self, tmp_path, tiny_pretrained):
        assert run(["variance", "--pretrained", tiny_pretrained, *TINY, "--seeds", "1,2",
                    "--strategy", "pool=avg4,reinit=1", "--out", tmp_path])[0] == 2


def test_report_renders_csv(tmp_path, tiny_pretrained, capsys):
    assert run(["grid", "--pretrained", tiny_pretrained, *TINY, "--epochs", "1", "--lr-grid", "1e-3",
                "--out", tmp_path])[0] == 0
    grid_out = capsys.readouterr().out
    assert run(["report", "--results", tmp_path / "results.csv"])[0] == 0
    assert capsys.readouterr().out == grid_out


def test_render_table_alignment():
    text = cli.render_table([("A", "1.00", "2.00", "3.00", "4.00"), ("Longer name", "10.00", "0.00", "1.50", "99.99")])
    lines = text.splitlines()
    assert len({len(line) for line in lines}) == 1
    assert lines[1].split("|")[1:-1] == [" Model       ", " Precision ", " Recall ", " Accuracy ", " F-Score "]
