import csv
import json

import numpy as np
import pytest

from fewshot_nerf.cli import main
from fewshot_nerf.field import load_checkpoint
from fewshot_nerf.io import load_depth, load_png, load_scene_dir, save_depth, save_png
from fewshot_nerf.trainer import TrainConfig


class TestFormats:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
        save_png(tmp_path / "a.png", img)
        np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)

    def test_png_rejects_grey(self, tmp_path):
        with pytest.raises(ValueError):
            save_png(tmp_path / "a.png", np.zeros((4, 4)))

    def test_depth_round_trip(self, tmp_path):
        d = np.random.default_rng(1).uniform(0, 9, (6, 11)).astype(np.float32)
        save_depth(tmp_path / "d.bin", d)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:4] == b"DPTH" and len(raw) == 12 + 4 * d.size
        np.testing.assert_array_equal(load_depth(tmp_path / "d.bin"), d)

    def test_depth_corrupt(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(ValueError):
            load_depth(tmp_path / "bad.bin")
        save_depth(tmp_path / "d.bin", np.zeros((2, 2)))
        (tmp_path / "t.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-1])
        with pytest.raises(ValueError):
            load_depth(tmp_path / "t.bin")


SMOKE = TrainConfig(total_steps=20, batch_rays=128, n_pair_rays=16, N_samples=16, hidden_width=32, hidden_layers=2,
                    skip_layer=1, color_width=16, L_pos=6, L_dir=2, checkpoint_every=10)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-scene", "--preset", "two-spheres", "--out", str(root / "scene"), "--size", "24",
                 "--n-quad", "512"]) == 0
    assert main(["match", "--scene", str(root / "scene"), "--outlier-rate", "0.2", "--percentile", "80",
                 "--seed", "3", "--out", str(root / "m.txt")]) == 0
    (root / "cfg.json").write_text(json.dumps(SMOKE.to_dict()))
    return root


def run_train(ws, out, *extra):
    return main(["train", "--scene", str(ws / "scene"), "--matches", str(ws / "m.txt"), "--config",
                 str(ws / "cfg.json"), "--out", str(ws / out), *extra])


class TestCli:
    def test_make_scene_outputs(self, workspace):
        names = {p.name for p in (workspace / "scene").iterdir()}
        assert {"scene.json", "oracle.npz", "view_00.png", "depth_04.bin"} <= names
        scene, views = load_scene_dir(workspace / "scene")
        assert len(views) == 5 and views[1].image.shape == (24, 24, 3)
        np.testing.assert_allclose(load_depth(workspace / "scene" / "depth_01.bin"), views[1].depth, rtol=1e-6)

    def test_oracle_self_eval_identical(self, workspace, capsys):
        out = workspace / "oracle.csv"
        assert main(["eval", "--oracle", "--scene", str(workspace / "scene"), "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["view"] for r in rows] == ["1", "3", "mean"]
        assert all(r["identical"] == "1" and float(r["psnr"]) == 99.0 for r in rows)
        assert "identical" in capsys.readouterr().out

    def test_match_reproducible(self, workspace):
        again = workspace / "m2.txt"
        assert main(["match", "--scene", str(workspace / "scene"), "--outlier-rate", "0.2", "--percentile", "80",
                     "--seed", "3", "--out", str(again)]) == 0
        assert again.read_bytes() == (workspace / "m.txt").read_bytes()
        assert (workspace / "m2.txt.labels").read_bytes() == (workspace / "m.txt.labels").read_bytes()

    def test_train_render_eval(self, workspace, capsys):
        assert run_train(workspace, "run") == 0
        run = workspace / "run"
        assert {"final.npz", "train_log.csv", "config.json", "scene.json"} <= {p.name for p in run.iterdir()}
        assert main(["render", "--checkpoint", str(run / "final.npz"), "--camera", "1",
                     "--out", str(workspace / "v1.png")]) == 0
        assert load_png(workspace / "v1.png").shape == (24, 24, 3)
        assert load_depth(workspace / "v1.depth.bin").shape == (24, 24)
        rep = workspace / "report.csv"
        assert main(["eval", "--checkpoint", str(run / "final.npz"), "--scene", str(workspace / "scene"),
                     "--matches", str(workspace / "m.txt"), "--out", str(rep)]) == 0
        rows = {r["view"]: r for r in csv.DictReader(open(rep))}
        assert set(rows) == {"1", "3", "mean", "keypoints"}
        assert 0 < float(rows["mean"]["psnr"]) < 99 and float(rows["keypoints"]["depth_mae"]) >= 0

    def test_train_seed_reproducible(self, workspace):
        assert run_train(workspace, "a", "--seed", "5") == 0
        assert run_train(workspace, "b", "--seed", "5") == 0
        a = load_checkpoint(workspace / "a" / "final.npz")[0]
        b = load_checkpoint(workspace / "b" / "final.npz")[0]
        assert a.digest() == b.digest()
        assert (workspace / "a" / "train_log.csv").read_bytes() == (workspace / "b" / "train_log.csv").read_bytes()

    def test_ablation_flags(self, workspace):
        assert run_train(workspace, "base", "--no-geo", "--no-occ") == 0
        cfg = TrainConfig.from_dict(json.loads((workspace / "base" / "config.json").read_text()))
        assert not cfg.use_geo and not cfg.use_occ and cfg.use_freq and cfg.use_filter

    def test_ablate_tau(self, workspace):
        out = workspace / "tau.csv"
        assert main(["ablate-tau", "--scene", str(workspace / "scene"), "--matches", str(workspace / "m.txt"),
                     "--config", str(workspace / "cfg.json"), "--taus", "0.01,0.1,1", "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        kept = [float(r["kept_fraction"]) for r in rows]
        assert len(rows) == 3 and kept == sorted(kept)

    @pytest.mark.parametrize("argv", [
        ["render", "--checkpoint", "nope.npz", "--camera", "0", "--out", "x.png"],
        ["eval", "--oracle", "--scene", "missing", "--out", "x.csv"],
        ["train", "--scene", "missing", "--out", "o"],
    ])
    def test_failures_exit_nonzero(self, argv, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(argv) != 0
        assert "error:" in capsys.readouterr().err

    def test_bad_camera_and_taus(self, workspace, capsys):
        ckpt = workspace / "run" / "final.npz"
        if not ckpt.exists():
            run_train(workspace, "run")
        assert main(["render", "--checkpoint", str(ckpt), "--camera", "9", "--out", str(workspace / "x.png")]) == 2
        assert main(["ablate-tau", "--scene", str(workspace / "scene"), "--matches", str(workspace / "m.txt"),
                     "--taus", "0.1,-1", "--out", str(workspace / "t.csv")]) == 2
        assert capsys.readouterr().err.count("error:") == 2

    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["make-scene", "--preset", "teapot", "--out", "x"])
        assert exc.value.code != 0
        with pytest.raises(SystemExit):
            main([])
