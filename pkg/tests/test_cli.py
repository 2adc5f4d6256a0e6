import os
import csv
import json

from click.testing import CliRunner
from pyfakefs.fake_filesystem_unittest import TestCase

from nse_reader.cli import cli

ISOLATED = {"NSE_READER_CONFIG": "/no/such/config.ini"}
GEN = "gen --entities 6 --relations 4 --sentences 5 --candidates 3 --docs 24 --dev 8 --test 4 --seed 7 -o {}"


def run(args, **kw):
    return CliRunner().invoke(cli, args.split(), env=ISOLATED, **kw)


def read(path, mode="r"):
    with open(path, mode) as fp:
        return fp.read()


class TestGen(TestCase):
    def setUp(self):
        self.setUpPyfakefs()

    def test_gen_is_deterministic(self):
        first = run(GEN.format("/a"))
        assert first.exit_code == 0, first.output
        assert "Saved to : /a" in first.output
        second = run(GEN.format("/b"))
        assert second.exit_code == 0
        for name in ("train.txt", "dev.txt", "test.txt", "synthetic.json"):
            assert read(os.path.join("/a", name), "rb") == read(os.path.join("/b", name), "rb")
        assert json.loads(read("/a/synthetic.json"))["seed"] == 7
        assert read("/a/train.txt").count("\t\t") == 24

    def test_gen_rejects_infeasible_spec(self):
        result = run("gen --entities 20 --candidates 30 -o /out")
        assert result.exit_code == 2
        assert "infeasible" in result.output
        assert not os.path.exists("/out")

    def test_gen_cache(self):
        env = dict(ISOLATED, NSE_READER_CACHE_DIR="/cache")
        args = (GEN.format("/c") + " --cache").split()
        result = CliRunner().invoke(cli, args, env=env)
        assert result.exit_code == 0, result.output
        assert len(os.listdir("/cache/synthetic")) == 1
        again = CliRunner().invoke(cli, (GEN.format("/d") + " --cache").split(), env=env)
        assert again.exit_code == 0
        assert read("/c/train.txt") == read("/d/train.txt")

    def test_train_missing_dataset(self):
        result = run("train --train /nowhere/train.txt --dev /nowhere/dev.txt -o /run")
        assert result.exit_code == 1
        assert "/nowhere/train.txt" in result.output

    def test_train_bad_config(self):
        run(GEN.format("/data"))
        result = run("train --train /data/train.txt --dev /data/dev.txt --k 5 -o /run")
        assert result.exit_code == 2
        assert "k must be" in result.output

    def test_train_missing_config_file(self):
        run(GEN.format("/data"))
        result = run("train --train /data/train.txt --dev /data/dev.txt --config /etc/none.ini -o /run")
        assert result.exit_code == 1
        assert "config file not found" in result.output

    def test_eval_corrupt_checkpoint(self):
        run(GEN.format("/data"))
        self.fs.create_file("/bad.ckpt", contents=b"JUNKJUNKJUNK")
        result = run("eval -c /bad.ckpt -d /data/dev.txt")
        assert result.exit_code == 1
        assert "bad magic" in result.output
        assert "Traceback" not in result.output


def test_pipeline(tmp_path):
    data, out = tmp_path / "data", tmp_path / "run"
    assert run(GEN.format(data)).exit_code == 0

    result = run("train --train {0}/train.txt --dev {0}/dev.txt -o {1} --k 4 --embed-dim 4 --batch 4 "
                 "--pool-size 8 --epochs 2 --patience 0 --dropout 0 --mode adaptive --steps 2".format(data, out))
    assert result.exit_code == 0, result.output
    assert "best epoch" in result.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["k"] == 4 and manifest["finished"]
    assert [d["path"] for d in manifest["datasets"]] == ["{}/train.txt".format(data), "{}/dev.txt".format(data)]
    assert (out / "train.log.jsonl").read_text().count('"event": "epoch"') == 2

    ckpt = out / "best.ckpt"
    first = run("eval -c {} -d {}/test.txt -o {}".format(ckpt, data, tmp_path / "records.csv"))
    second = run("eval -c {} -d {}/test.txt".format(ckpt, data))
    assert first.exit_code == 0, first.output
    reports = [[line for line in r.output.splitlines() if line.startswith("accuracy ")] for r in (first, second)]
    assert len(reports[0]) == 1 and reports[0] == reports[1]
    with open(tmp_path / "records.csv", newline="") as fp:
        rows = list(csv.DictReader(fp))
    assert len(rows) == 4
    assert {"index", "gold", "predicted", "correct", "expected_steps"} <= set(rows[0])

    traced = run("trace -c {} -d {}/dev.txt -i 1 -o {}".format(ckpt, data, tmp_path / "trace"))
    assert traced.exit_code == 0, traced.output
    assert sorted(os.listdir(tmp_path / "trace")) == [
        "attention.csv", "halting.csv", "halting.svg", "trace.json", "z.csv", "z.svg"]

    outside = run("trace -c {} -d {}/dev.txt -i 8 -o {}".format(ckpt, data, tmp_path / "t2"))
    assert outside.exit_code == 2
    assert "index 8" in outside.output
