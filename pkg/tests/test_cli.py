"""End-to-end tests for the command-line interface."""
import json
import shutil

import pytest
import torch

from sparsegen.cli import build_parser, main
from sparsegen.trainer import load_checkpoint

TINY = dict(m=8, k=2, d=32, resolution=16, d_th=4, n_enc=1, n_dec=2,
            backbone_depth=1, n_heads=4, n_freq=4, batch_size=1, v=3,
            n_noisy=1, p_drop=0.2, lr=1e-3, n_iter=2, log_interval=1,
            checkpoint_interval=10)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared dataset + tiny config + 2-step checkpoint for CLI tests."""
    ws = tmp_path_factory.mktemp("cli")
    rc = main(["make-data", "--out", str(ws / "data"), "--scenes", "2",
               "--gaussians", "6", "--views", "4", "--resolution", "16",
               "--seed", "5"])
    assert rc == 0
    with open(ws / "tiny.json", "w") as fh:
        json.dump(TINY, fh)
    rc = main(["train", "--config", str(ws / "tiny.json"), "--data",
               str(ws / "data"), "--out", str(ws / "run"), "--seed", "1"])
    assert rc == 0
    return ws


def ckpt(ws):
    return str(ws / "run" / "checkpoint_final.pt")


class TestMakeData:
    def test_layout_and_determinism(self, tmp_path):
        for name in ("a", "b"):
            rc = main(["make-data", "--out", str(tmp_path / name), "--scenes",
                       "1", "--gaussians", "4", "--views", "2",
                       "--resolution", "16", "--seed", "9"])
            assert rc == 0
        a, b = tmp_path / "a", tmp_path / "b"
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files, "dataset produced no files"
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_env_var_supplies_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPARSEGEN_RUN_DIR", str(tmp_path / "envout"))
        rc = main(["make-data", "--scenes", "1", "--gaussians", "4",
                   "--views", "2", "--resolution", "16"])
        assert rc == 0
        assert (tmp_path / "envout" / "scene_0000" / "poses.json").is_file()


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint_final.pt").is_file()
        assert (run / "metrics.jsonl").is_file()
        lines = (run / "metrics.jsonl").read_text().strip().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [1, 2]

    def test_cli_overrides_config(self, workspace, tmp_path):
        rc = main(["train", "--config", str(workspace / "tiny.json"),
                   "--data", str(workspace / "data"), "--out", str(tmp_path),
                   "--queries", "4", "--iters", "1", "--seed", "2"])
        assert rc == 0
        tr = load_checkpoint(tmp_path / "checkpoint_final.pt")
        assert tr.config.m == 4
        assert tr.config.n_iter == 1
        assert tr.config.seed == 2

    def test_needs_dataset(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"m": 8, "nope": 1}))
        rc = main(["train", "--config", str(bad), "--data",
                   str(workspace / "data"), "--out", str(tmp_path)])
        assert rc == 2

    def test_config_must_be_object(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]")
        rc = main(["train", "--config", str(bad), "--data",
                   str(workspace / "data"), "--out", str(tmp_path)])
        assert rc == 2

    def test_invalid_config_value(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({**TINY, "lr": -1.0}))
        rc = main(["train", "--config", str(bad), "--data",
                   str(workspace / "data"), "--out", str(tmp_path)])
        assert rc == 2


class TestGenerateRender:
    def test_generate_then_render_reproduces_bytes(self, workspace, tmp_path):
        gen = tmp_path / "gen"
        rc = main(["generate", "--checkpoint", ckpt(workspace), "--data",
                   str(workspace / "data"), "--views", "1", "--out", str(gen),
                   "--seed", "3"])
        assert rc == 0
        assert (gen / "scene.sggs").is_file()
        summary = json.loads((gen / "summary.json").read_text())
        assert summary["conditioning_views"] == 1
        assert summary["n_gaussians"] == TINY["m"] * TINY["k"]

        ren = tmp_path / "ren"
        rc = main(["render", "--gaussians", str(gen / "scene.sggs"),
                   "--poses", str(gen / "poses.json"), "--resolution", "16",
                   "--out", str(ren)])
        assert rc == 0
        gen_pngs = sorted(gen.glob("render_*.png"))
        ren_pngs = sorted(ren.glob("render_*.png"))
        assert len(gen_pngs) == len(ren_pngs) == 4
        for a, b in zip(gen_pngs, ren_pngs):
            assert a.read_bytes() == b.read_bytes()

    def test_generate_seed_determinism(self, workspace, tmp_path):
        outs = []
        for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
            out = tmp_path / name
            rc = main(["generate", "--checkpoint", ckpt(workspace), "--data",
                       str(workspace / "data"), "--views", "1", "--out",
                       str(out), "--seed", seed])
            assert rc == 0
            outs.append((out / "scene.sggs").read_bytes())
        assert outs[0] == outs[1]
        assert outs[0] != outs[2]

    def test_generate_unconditional(self, workspace, tmp_path):
        rc = main(["generate", "--checkpoint", ckpt(workspace), "--out",
                   str(tmp_path / "u"), "--seed", "0"])
        assert rc == 0
        summary = json.loads((tmp_path / "u" / "summary.json").read_text())
        assert summary["conditioning_views"] == 0
        assert summary["n_renders"] == TINY["v"]

    def test_generate_scene_selector(self, workspace, tmp_path):
        rc = main(["generate", "--checkpoint", ckpt(workspace), "--data",
                   str(workspace / "data"), "--scene", "scene_0001",
                   "--out", str(tmp_path / "s"), "--seed", "0"])
        assert rc == 0
        rc = main(["generate", "--checkpoint", ckpt(workspace), "--data",
                   str(workspace / "data"), "--scene", "scene_0099",
                   "--out", str(tmp_path / "s2"), "--seed", "0"])
        assert rc == 1

    def test_missing_checkpoint(self, workspace, tmp_path):
        rc = main(["generate", "--checkpoint", str(tmp_path / "no.pt"),
                   "--out", str(tmp_path / "x")])
        assert rc == 1


class TestEval:
    def test_identical_renders_give_zero_ssim_delta(self, workspace, tmp_path):
        copies = tmp_path / "copies"
        for scene_dir in sorted((workspace / "data").glob("scene_*")):
            tgt = copies / scene_dir.name
            tgt.mkdir(parents=True)
            for p in sorted(scene_dir.glob("view_*.png")):
                shutil.copy(p, tgt / p.name)
        out = tmp_path / "ev"
        rc = main(["eval", "--data", str(workspace / "data"), "--renders",
                   str(copies), "--out", str(out), "--views", "1"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mean"]["delta_ssim"] == 0.0
        assert report["n_scenes"] == 2
        assert all(s["delta_ssim"] == 0.0 for s in report["scenes"])

    def test_checkpoint_mode_artifacts(self, workspace, tmp_path):
        out = tmp_path / "ev"
        rc = main(["eval", "--data", str(workspace / "data"), "--checkpoint",
                   ckpt(workspace), "--out", str(out), "--views", "1",
                   "--seed", "7"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert {"psnr_cond", "psnr_novel", "delta_psnr"} <= set(report["mean"])
        util = json.loads((out / "utilization.json").read_text())
        assert util["n"] == TINY["m"] * TINY["k"]
        assert (out / "opacity_histogram.png").stat().st_size > 0
        assert (out / "query_projections.png").stat().st_size > 0

    def test_needs_exactly_one_source(self, workspace, tmp_path):
        base = ["eval", "--data", str(workspace / "data"), "--out",
                str(tmp_path)]
        assert main(base) == 2
        assert main(base + ["--checkpoint", ckpt(workspace), "--renders",
                            str(tmp_path)]) == 2

    def test_views_must_leave_novel_views(self, workspace, tmp_path):
        rc = main(["eval", "--data", str(workspace / "data"), "--checkpoint",
                   ckpt(workspace), "--out", str(tmp_path), "--views", "4"])
        assert rc == 2


class TestScaling:
    def test_three_runs_table_and_plot(self, workspace, tmp_path):
        out = tmp_path / "sc"
        rc = main(["scaling", "--data", str(workspace / "data"), "--config",
                   str(workspace / "tiny.json"), "--iters", "1", "--out",
                   str(out), "--seed", "0"])
        assert rc == 0
        table = json.loads((out / "scaling.json").read_text())
        assert table["m"] == [64, 128, 256]
        assert len(table["psnr"]) == 3
        assert all(isinstance(v, float) for v in table["psnr"])
        assert (out / "scaling.png").stat().st_size > 0
        for m in (64, 128, 256):
            assert (out / f"m{m:03d}" / "checkpoint_final.pt").is_file()


class TestParsing:
    def test_unknown_command_exits_2(self):
        assert main(["bogus"]) == 2

    def test_no_command_exits_2(self):
        assert main([]) == 2

    def test_help_exits_0(self):
        assert main(["--help"]) == 0

    def test_parser_lists_all_subcommands(self):
        parser = build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, type(parser._subparsers._group_actions[0])))
        assert set(sub.choices) == {"make-data", "train", "generate",
                                    "render", "eval", "scaling"}
