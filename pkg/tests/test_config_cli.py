import numpy as np
import pytest

from snider import cli
from snider.cli import main
from snider.config import ConfigError, RunConfig, dump_config, load_config_file, parse_config_text, resolve
from snider.data.imageio import read_ppm, write_ppm


class TestConfig:
    def test_empty_file_is_defaults(self):
        assert parse_config_text("") == {}
        assert resolve({}, {}) == RunConfig()

    def test_every_field_has_default(self):
        RunConfig()

    def test_parse_types_and_comments(self):
        vals = parse_config_text("# run\nseed = 3\nlr_initial = 2e-4  # faster\nplots = no\nlr_switch_iter = none\n")
        assert vals == {"seed": 3, "lr_initial": 2e-4, "plots": False, "lr_switch_iter": None}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="lr_intial"):
            parse_config_text("lr_intial = 1e-3\n")

    @pytest.mark.parametrize("text", ["[train]\nseed = 1\n", "seed = abc\n", "seed\n", "seed = 1\nseed = 2\n"])
    def test_malformed_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_precedence(self):
        cfg = resolve({"seed": 3, "iters": 50}, {"seed": 9, "iters": None})
        assert cfg.seed == 9 and cfg.iters == 50 and cfg.batch_size == 16

    @pytest.mark.parametrize("bad", [{"split": 1.0}, {"threads": 0}, {"variant": "huge"},
                                     {"denoise_until": 0.6, "rectify_until": 0.5}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            resolve(bad, {})

    def test_dump_round_trip(self, tmp_path):
        cfg = resolve({"seed": 5, "lambda_dc": 0.0, "out": "x/y"}, {})
        (tmp_path / "c.cfg").write_text(dump_config(cfg))
        assert resolve(load_config_file(tmp_path / "c.cfg"), {}) == cfg

    def test_train_config_mapping(self):
        tc = resolve({"iters": 40, "denoise_until": 0.5, "rectify_until": 0.75, "lambda_ds": 0.0}, {}).train_config()
        assert tc.max_iterations == 40 and [s.stop for s in tc.schedule()] == [20, 30, 40]
        assert tc.weights.as_tuple() == (0.4, 0.4, 0.0, 0.05)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--plates", "3", "--size", "32", "--seed", "7", "--split", "0.67", "--max-digits", "4", "--out", str(d)]) == 0
    return d


def run_out(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, dict(line.split("\t", 1) for line in out.splitlines() if "\t" in line)


class TestSynth:
    def test_counts(self, tmp_path, capsys):
        code, out = run_out(capsys, ["synth", "--plates", "10", "--size", "64", "--seed", "7", "--out", str(tmp_path)])
        assert code == 0 and out["train"] == "32 samples" and out["test"] == "8 samples"
        assert (tmp_path / "train.tsv").is_file() and (tmp_path / "test.tsv").is_file()
        assert len(list((tmp_path / "images").iterdir())) == 3 * 40 + 10  # clean image shared by the four angles

    def test_rerun_identical(self, data_dir, tmp_path):
        other = tmp_path / "again"
        assert main(["synth", "--plates", "3", "--size", "32", "--seed", "7", "--split", "0.67", "--max-digits", "4", "--out", str(other)]) == 0
        for p in data_dir.rglob("*"):
            if p.is_file():
                assert (other / p.relative_to(data_dir)).read_bytes() == p.read_bytes()

    @pytest.mark.parametrize("argv", [["--size", "63"], ["--size", "16"], ["--size", "40", "--variant", "snider"],
                                      ["--split", "1.5"], ["--bogus"],
                                      ["--size", "32", "--max-digits", "5"]])
    def test_usage_errors(self, tmp_path, argv):
        assert main(["synth", "--out", str(tmp_path), *argv]) == 1

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--plates", "2", "--max-digits", "4", "--size", "32", "--out", str(blocker / "sub")]) == 2


class TestTrainEvalRecover:
    def test_zero_iterations(self, data_dir, tmp_path, capsys):
        code, out = run_out(capsys, ["train", "--data", str(data_dir), "--out", str(tmp_path), "--iters", "0"])
        assert code == 0 and out["iterations"] == "0"
        assert (tmp_path / "final.sndr").is_file()

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path), "--iters", "0"]) == 2

    def test_config_file_and_figure(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"size = 32\niters = 4\nbatch_size = 2\nseed = 1\ndata = {data_dir}\nout = {tmp_path / 'run'}\n")
        code, out = run_out(capsys, ["train", "--config", str(cfg)])
        assert code == 0 and out["iterations"] == "4"
        assert (tmp_path / "run" / "loss_curves.png").stat().st_size > 0
        assert float(out["final_total"]) > 0

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("itres = 4\n")
        assert main(["train", "--config", str(cfg)]) == 1

    def test_resume_reproduces_metrics(self, data_dir, tmp_path):
        common = ["train", "--data", str(data_dir), "--iters", "6", "--batch-size", "2",
                  "--lr-initial", "1e-3", "--no-plots"]
        assert main([*common, "--out", str(tmp_path / "a")]) == 0
        assert main([*common, "--out", str(tmp_path / "b"), "--checkpoint-every", "3"]) == 0
        assert main([*common, "--out", str(tmp_path / "b"), "--resume", str(tmp_path / "b" / "ckpt_0000003.sndr")]) == 0
        for name in ("metrics.csv", "final.sndr"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_eval_identity(self, data_dir, tmp_path, capsys):
        code, out = run_out(capsys, ["eval", "--data", str(data_dir), "--model", "identity", "--out", str(tmp_path)])
        assert code == 0 and out["accuracy_recovered"] == out["accuracy_lq"]
        assert {"report.csv", "eval_summary.png", "recoveries.png"} <= {p.name for p in tmp_path.iterdir()}

    def test_eval_requires_checkpoint(self, data_dir, tmp_path):
        assert main(["eval", "--data", str(data_dir), "--out", str(tmp_path)]) == 1

    def test_recover_then_read_back(self, data_dir, tmp_path, capsys):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--iters", "0"]) == 0
        img = np.random.default_rng(0).uniform(size=(3, 32, 32))
        write_ppm(tmp_path / "in" / "plate.ppm", img)
        code = main(["recover", "--checkpoint", str(tmp_path / "final.sndr"), str(tmp_path / "in")])
        assert code == 0
        rec_path = tmp_path / "in" / "plate_rec.ppm"
        assert capsys.readouterr().out.splitlines()[-1] == str(rec_path)
        first = read_ppm(rec_path)
        write_ppm(tmp_path / "copy.ppm", first)
        assert np.array_equal(read_ppm(tmp_path / "copy.ppm"), first)
        assert first.shape == (3, 32, 32)

    def test_recover_variant_mismatch(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--iters", "0"]) == 0
        write_ppm(tmp_path / "p.ppm", np.zeros((3, 32, 32)))
        assert main(["recover", "--checkpoint", str(tmp_path / "final.sndr"), "--variant", "snider",
                     str(tmp_path / "p.ppm")]) == 2

    def test_recover_size_mismatch(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--iters", "0"]) == 0
        write_ppm(tmp_path / "p.ppm", np.zeros((3, 16, 16)))
        assert main(["recover", "--checkpoint", str(tmp_path / "final.sndr"), str(tmp_path / "p.ppm")]) == 2


class TestMisc:
    def test_unknown_command(self):
        assert main(["fly"]) == 1

    def test_threads_env(self, monkeypatch, tmp_path):
        seen = []

        class Spy:
            def __init__(self, limits):
                seen.append(limits)

            def __enter__(self):
                return self

            def __exit__(self, *exc):
                return False

        monkeypatch.setattr(cli, "threadpool_limits", Spy)
        monkeypatch.setenv("SNIDER_THREADS", "3")
        main(["synth", "--size", "63", "--out", str(tmp_path)])
        main(["synth", "--size", "63", "--threads", "2", "--out", str(tmp_path)])
        assert seen == [3, 2]

    def test_bad_threads_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SNIDER_THREADS", "many")
        assert main(["synth", "--out", str(tmp_path)]) == 1

    def test_gradcheck_passes(self, capsys):
        code, out = run_out(capsys, ["gradcheck"])
        assert code == 0
        assert float(out["max_rel_error"]) <= 1e-3 and out["status"].startswith("PASS")

    def test_gradcheck_tight_tolerance_fails(self, capsys):
        code, out = run_out(capsys, ["gradcheck", "--tol", "1e-12", "--entries", "0"])
        assert code == 2 and out["status"].startswith("FAIL")
