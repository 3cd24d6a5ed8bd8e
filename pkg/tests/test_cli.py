import csv
import json

import numpy as np
import pytest

from titrl.backbone import TITConfig, build_variant, save_checkpoint
from titrl.cli import attention_artifacts, main, min_max_scale, read_pgm
from titrl.config import FIELDS, RunConfig, echo_config, parse_config, parse_pairs
from titrl.errors import ConfigError

TINY = {
    "embed_dim": "8",
    "num_blocks": "1",
    "total_timesteps": "32",
    "n_envs": "2",
    "rollout_len": "8",
    "minibatch_size": "8",
    "epochs": "1",
    "eval_episodes": "2",
}


def flags(overrides):
    out = []
    for k, v in overrides.items():
        out += ["--" + k.replace("_", "-"), v]
    return out


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestConfigFile:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.txt").write_text("")
        assert parse_config(tmp_path / "c.txt") == RunConfig()

    def test_comments_and_blank_lines(self):
        values = parse_pairs("# heading\n\nembed_dim = 16   # wider\nseeds = 0, 1,2\n")
        assert values == {"embed_dim": 16, "seeds": (0, 1, 2)}

    def test_patch_count_in_echo(self):
        cfg = parse_config(overrides={"env": "dotcatcher", "frame_size": "84", "patch_size": "12"})
        assert "# num_patches = 49" in echo_config(cfg).splitlines()

    @pytest.mark.parametrize(
        "text,key",
        [
            ("num_blocks = 0", "num_blocks"),
            ("bogus = 1", "bogus"),
            ("embed_dim = 1.5", "embed_dim"),
            ("normalize_advantage = yes", "normalize_advantage"),
            ("learning_rate = fast", "learning_rate"),
            ("seeds = 0, a", "seeds"),
            ("env = pong", "env"),
            ("embed_dim = 8\nembed_dim = 16", "embed_dim"),
            ("variant", "variant"),
        ],
    )
    def test_errors_name_the_key(self, tmp_path, text, key):
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(ConfigError) as err:
            parse_config(tmp_path / "c.txt")
        assert err.value.key == key
        assert key in str(err.value)

    def test_indivisible_patch(self):
        with pytest.raises(ConfigError) as err:
            parse_config(overrides={"env": "dotcatcher", "frame_size": "84", "patch_size": "10"})
        assert err.value.key == "patch_size"

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("embed_dim = 16\nnum_blocks = 3\n")
        cfg = parse_config(tmp_path / "c.txt", {"embed_dim": "8"})
        assert (cfg.embed_dim, cfg.num_blocks) == (8, 3)

    def test_echo_round_trip(self, tmp_path):
        cfg = parse_config(overrides={"env": "dotcatcher", "patch_size": "6", "seeds": "0,1,2,3,4", "learning_rate": "0.0003", "outer_position_encoding": "true"})
        (tmp_path / "echo.txt").write_text(echo_config(cfg))
        again = parse_config(tmp_path / "echo.txt")
        assert again == cfg
        assert echo_config(again) == echo_config(cfg)

    def test_echo_lists_every_key(self):
        keys = [line.split(" = ")[0] for line in echo_config(RunConfig()).splitlines() if not line.startswith("#")]
        assert keys == list(FIELDS)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.txt")


class TestCommands:
    def test_train_writes_one_result_per_seed(self, tmp_path, capsys):
        out = tmp_path / "run"
        code, stdout, _ = run(capsys, "train", *flags({**TINY, "out_dir": str(out), "seeds": "0,1,2,3,4"}))
        assert code == 0
        results = sorted(out.glob("seed_*/result.json"))
        assert len(results) == 5
        assert {json.loads(p.read_text())["seed"] for p in results} == {0, 1, 2, 3, 4}
        assert len(list(out.glob("seed_*/metrics.csv"))) == 5
        assert parse_config(out / "config.txt").seeds == (0, 1, 2, 3, 4)
        assert stdout.count("seed ") == 5

    def test_same_seed_same_metrics(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "train", *flags({**TINY, "out_dir": str(tmp_path / name)}))[0] == 0
        a = (tmp_path / "a/seed_0/metrics.csv").read_bytes()
        assert a == (tmp_path / "b/seed_0/metrics.csv").read_bytes()
        assert (tmp_path / "a/seed_0/model.tit").read_bytes() == (tmp_path / "b/seed_0/model.tit").read_bytes()

    def test_eval_writes_report(self, tmp_path, capsys):
        run(capsys, "train", *flags({**TINY, "out_dir": str(tmp_path)}))
        code, _, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "seed_0/model.tit"), "--episodes", "3", "--out", str(tmp_path / "e.json"))
        report = json.loads((tmp_path / "e.json").read_text())
        assert code == 0 and report["episodes"] == 3 and len(report["returns"]) == 3

    def test_resume_from_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--resume", str(tmp_path / "nope.tit"), *flags({**TINY, "out_dir": str(tmp_path)}))
        assert code == 3
        assert json.loads(err.strip().splitlines()[-1])["error"] == "CheckpointError"

    def test_ablate_emits_four_rows(self, tmp_path, capsys):
        o = {**TINY, "out_dir": str(tmp_path), "env": "dotcatcher", "frame_size": "8", "patch_size": "4", "context_len": "2", "eval_episodes": "1"}
        code, stdout, _ = run(capsys, "ablate", *flags(o))
        assert code == 0
        with (tmp_path / "ablation.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["variant", "mean", "std"]
        assert [r[0] for r in rows[1:]] == ["enhanced", "wo_dense", "wo_inner", "wo_outer"]
        assert all(np.isfinite(float(x)) for r in rows[1:] for x in r[1:])
        assert len(stdout.strip().splitlines()) == 5

    def test_flows(self, tmp_path, capsys):
        code, stdout, _ = run(capsys, "flows", "--num-blocks", "2", "--context-len", "4", "--csv", str(tmp_path / "f.csv"))
        assert code == 0
        rows = list(csv.reader((tmp_path / "f.csv").open()))
        assert rows[1] == ["vanilla", "2", "4", "8", "2", "4", "1", "4", "0"]
        assert rows[2][-2] == "8"
        assert "enhanced" in stdout

    def test_collect_and_dt_train(self, tmp_path, capsys):
        data = tmp_path / "eps.bin"
        assert run(capsys, "collect", "--episodes", "2", "--frame-size", "8", "--out", str(data))[0] == 0
        o = {"env": "dotcatcher", "frame_size": "8", "patch_size": "4", "context_len": "2", "embed_dim": "8", "num_blocks": "1", "dt_steps": "3", "out_dir": str(tmp_path / "dt")}
        code, stdout, _ = run(capsys, "dt-train", "--data", str(data), *flags(o))
        assert code == 0 and "accuracy" in stdout
        assert (tmp_path / "dt/seed_0/model.tit").exists()

    def test_dt_train_rejects_mismatched_data(self, tmp_path, capsys):
        data = tmp_path / "eps.bin"
        run(capsys, "collect", "--episodes", "1", "--frame-size", "8", "--out", str(data))
        code, _, err = run(capsys, "dt-train", "--data", str(data), "--out-dir", str(tmp_path))
        assert code == 2 and json.loads(err)["key"] == "env"

    def test_error_line_is_json(self, capsys):
        code, _, err = run(capsys, "train", "--num-blocks", "0")
        assert code == 2
        payload = json.loads(err.strip())
        assert payload == {"error": "ConfigError", "key": "num_blocks", "message": payload["message"]}

    def test_short_flags_rejected(self, capsys):
        code, _, err = run(capsys, "flows", "-h")
        assert code == 2 and json.loads(err)["error"] == "UsageError"

    def test_help(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0 and "visualize" in out


class TestVisualize:
    def model(self, k=4):
        cfg = TITConfig(obs_shape=(84, 84, 1), patch_size=12, embed_dim=8, num_blocks=2, context_len=k, inner_heads=2, action_dim=3)
        return build_variant(cfg, seed=0)

    def test_grid_and_causal_support(self, tmp_path):
        m = self.model()
        window = np.random.default_rng(0).integers(0, 256, size=(4, 84, 84, 1)).astype(np.float32)
        written = attention_artifacts(m, window, np.ones(4, bool), tmp_path)
        assert written == {"inner": 2 * 2 * 4, "outer": 2}
        assert read_pgm(tmp_path / "inner_b0_h1_k3.pgm").shape == (7, 7)
        rows = list(csv.DictReader((tmp_path / "outer_attention.csv").open()))
        for r in rows:
            if int(r["key"]) > int(r["query"]):
                assert float(r["weight"]) == 0.0
        assert read_pgm(tmp_path / "outer_b1_h0.pgm").shape == (4, 4)

    def test_inner_rows_sum_to_one_from_csv(self, tmp_path):
        m = self.model(k=2)
        window = np.random.default_rng(1).integers(0, 256, size=(2, 84, 84, 1)).astype(np.float32)
        attention_artifacts(m, window, np.array([False, True]), tmp_path)
        sums = {}
        for r in csv.DictReader((tmp_path / "inner_attention.csv").open()):
            key = (r["block"], r["head"], r["slot"])
            sums[key] = sums.get(key, 0.0) + float(r["weight"])
        assert len(sums) == 2 * 2 * 1  # invalid slot skipped
        assert all(abs(s - 1.0) < 1e-6 for s in sums.values())

    def test_scaling(self):
        img = min_max_scale(np.array([[0.1, 0.3], [0.2, 0.1]]))
        assert img.min() == 0 and img.max() == 255
        assert np.all(min_max_scale(np.full((2, 2), 0.25)) == 0)

    def test_command(self, tmp_path, capsys):
        m = self.model(k=2)
        save_checkpoint(tmp_path / "m.tit", m, {"env": "dotcatcher", "frame_size": 84})
        code, out, _ = run(capsys, "visualize", "--checkpoint", str(tmp_path / "m.tit"), "--out-dir", str(tmp_path / "viz"), "--steps", "3")
        assert code == 0
        assert (tmp_path / "viz/inner_attention.csv").exists()
        assert len(list((tmp_path / "viz").glob("outer_*.pgm"))) == 2

    def test_mismatched_checkpoint(self, tmp_path, capsys):
        save_checkpoint(tmp_path / "m.tit", self.model(k=2), {"env": "cartpole"})
        code, _, err = run(capsys, "visualize", "--checkpoint", str(tmp_path / "m.tit"), "--out-dir", str(tmp_path))
        assert code == 3 and "CheckpointError" in err
