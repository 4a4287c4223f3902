import json

import numpy as np
import pytest
import torch

from sparsegen.data import make_synthetic_dataset, load_dataset
from sparsegen.splatter import render
from sparsegen.trainer import (TrainConfig, Trainer, fit_gaussians_to_views,
                               load_checkpoint, save_checkpoint)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_synthetic_dataset(root, n_scenes=3, gaussians_per_scene=6, n_views=4,
                           resolution=16, seed=5)
    return load_dataset(root)


def tiny_config(**kw):
    args = dict(m=8, k=2, d=32, resolution=16, d_th=4, n_enc=1, n_dec=2,
                backbone_depth=1, n_heads=4, n_freq=4, batch_size=2, v=3,
                n_noisy=1, p_drop=0.2, lr=1e-3, n_iter=3, seed=0,
                log_interval=1, checkpoint_interval=2)
    args.update(kw)
    return TrainConfig(**args)


class TestTrainConfig:
    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert (cfg.m, cfg.k, cfg.d, cfg.d_th) == (512, 10, 512, 64)
        assert (cfg.n_enc, cfg.n_dec) == (6, 6)
        assert cfg.s_max == 0.1 and cfg.delta == 0.1
        assert (cfg.lambda_reg, cfg.lambda_perc, cfg.lambda_inter,
                cfg.lambda_occ) == (0.05, 0.1, 0.1, 0.1)
        assert cfg.n_iter == 300_000 and cfg.lr == 2e-5
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.99)
        assert cfg.resolution == 128

    def test_desk_preset(self):
        cfg = TrainConfig.desk()
        assert cfg.m == 128 and cfg.resolution == 64 and cfg.n_iter == 20_000
        assert cfg.v == 3 and cfg.n_noisy == 2
        assert cfg.k == 10 and cfg.s_max == 0.1  # full-scale values retained

    def test_desk_overrides(self):
        cfg = TrainConfig.desk(n_iter=10, seed=3)
        assert cfg.n_iter == 10 and cfg.seed == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(resolution=100, patch=8)
        with pytest.raises(ValueError):
            TrainConfig(n_noisy=6, v=5)
        with pytest.raises(ValueError):
            TrainConfig(p_drop=1.0)
        with pytest.raises(ValueError):
            TrainConfig(beta2=1.0)

    def test_dict_roundtrip(self):
        cfg = tiny_config(lr=5e-4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_model_config_mapping(self):
        mc = tiny_config().model_config()
        assert mc.m == 8 and mc.d == 32 and mc.n_dec == 2
        assert mc.offset_bound == pytest.approx(0.2)


class TestTrainingStep:
    def test_first_step_finite(self, tiny_dataset):
        trainer = Trainer(tiny_config(), tiny_dataset)
        bd = trainer.training_step()
        assert trainer.step == 1
        for key, val in bd.as_dict().items():
            assert np.isfinite(val), key
        assert bd.total > 0

    def test_deterministic_traces(self, tiny_dataset):
        traces = []
        for _ in range(2):
            trainer = Trainer(tiny_config(), tiny_dataset)
            traces.append([trainer.training_step().total for _ in range(5)])
        assert traces[0] == traces[1]

    def test_gradients_reach_every_group(self, tiny_dataset):
        trainer = Trainer(tiny_config(), tiny_dataset)
        trainer.training_step()
        for name, params in trainer.model.parameter_groups().items():
            got = sum(float(p.grad.abs().sum()) for p in params
                      if p.grad is not None)
            assert got > 0, f"no gradient reached {name}"
        assert trainer.model.queries.refs.grad.abs().sum() > 0

    def test_parameters_move(self, tiny_dataset):
        trainer = Trainer(tiny_config(), tiny_dataset)
        before = {n: p.detach().clone()
                  for n, p in trainer.model.named_parameters()}
        trainer.training_step()
        moved = {n for n, p in trainer.model.named_parameters()
                 if not torch.equal(before[n], p)}
        for group in ("image_encoder", "position_encoder", "queries",
                      "expansion"):
            assert any(n.startswith(group) for n in moved), group

    def test_scale_clip_after_steps(self, tiny_dataset):
        trainer = Trainer(tiny_config(), tiny_dataset)
        for _ in range(3):
            trainer.training_step()
        rec = tiny_dataset.records[0]
        images, poses, _ = trainer._scene_views(rec)
        with torch.no_grad():
            gs = trainer.model.generate_scene(images[:3], torch.zeros(3),
                                              poses[:3])
        gs.validate(s_max=trainer.config.s_max)

    def test_nonfinite_loss_aborts_with_diagnostics(self, tiny_dataset, tmp_path):
        trainer = Trainer(tiny_config(), tiny_dataset, run_dir=tmp_path)
        with torch.no_grad():
            trainer.model.expansion.heads[-1].color_head[-1].bias.fill_(
                float("nan"))
        with pytest.raises(FloatingPointError):
            trainer.training_step()
        dumps = list(tmp_path.glob("diagnostics_step_*.json"))
        assert len(dumps) == 1
        payload = json.loads(dumps[0].read_text())
        assert payload["step"] == 0 and "config" in payload


class TestCheckpointing:
    def test_roundtrip(self, tiny_dataset, tmp_path):
        trainer = Trainer(tiny_config(), tiny_dataset)
        trainer.training_step()
        path = save_checkpoint(tmp_path / "ckpt.pt", trainer)
        loaded = load_checkpoint(path, dataset=tiny_dataset)
        assert loaded.step == 1
        assert loaded.config == trainer.config
        for (na, pa), (nb, pb) in zip(trainer.model.named_parameters(),
                                      loaded.model.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_resume_is_bit_identical(self, tiny_dataset, tmp_path):
        full = Trainer(tiny_config(), tiny_dataset)
        full.training_step()
        full.training_step()
        ckpt = save_checkpoint(tmp_path / "mid.pt", full)
        tail_full = [full.training_step().total for _ in range(3)]

        resumed = load_checkpoint(ckpt, dataset=tiny_dataset)
        tail_resumed = [resumed.training_step().total for _ in range(3)]
        assert tail_full == tail_resumed

    def test_rejects_wrong_version(self, tiny_dataset, tmp_path):
        trainer = Trainer(tiny_config(), tiny_dataset)
        path = save_checkpoint(tmp_path / "ckpt.pt", trainer)
        payload = torch.load(path, weights_only=False)
        payload["version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestFit:
    def test_zero_iterations_returns_initial_checkpoint(self, tiny_dataset,
                                                        tmp_path):
        trainer = Trainer(tiny_config(n_iter=0), tiny_dataset, run_dir=tmp_path)
        path = trainer.fit()
        assert path is not None and path.is_file()
        assert load_checkpoint(path, dataset=tiny_dataset).step == 0

    def test_runs_and_logs(self, tiny_dataset, tmp_path):
        trainer = Trainer(tiny_config(n_iter=2), tiny_dataset, run_dir=tmp_path)
        path = trainer.fit()
        assert trainer.step == 2
        lines = [json.loads(l) for l in
                 (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [l["step"] for l in lines] == [1, 2]
        assert (tmp_path / "checkpoint_0000002.pt").is_file()
        assert (tmp_path / "val_0000002.png").is_file()
        assert load_checkpoint(path, dataset=tiny_dataset).step == 2

    def test_callback_stops_early(self, tiny_dataset):
        trainer = Trainer(tiny_config(n_iter=100), tiny_dataset)
        trainer.fit(callback=lambda tr, bd: tr.step >= 2)
        assert trainer.step == 2

    def test_empty_dataset_rejected(self, tmp_path):
        trainer = Trainer(tiny_config(), dataset=None)
        with pytest.raises(ValueError):
            trainer.fit()

    def test_config_roundtrips_through_checkpoint(self, tiny_dataset, tmp_path):
        cfg = tiny_config(lr=7e-4, seed=11)
        trainer = Trainer(cfg, tiny_dataset, run_dir=tmp_path)
        path = trainer.fit(callback=lambda tr, bd: True)
        assert load_checkpoint(path, dataset=tiny_dataset).config == cfg


class TestFitGaussiansToViews:
    def test_improves_psnr(self, tiny_dataset):
        rec = tiny_dataset.records[0]
        images = rec.load_images()[:2]
        poses = rec.poses[:2]
        _, trace = fit_gaussians_to_views(images, poses, 8, n_steps=40,
                                          lr=2e-2, seed=0)
        assert len(trace) == 40
        assert trace[-1] > trace[0]
        assert np.isfinite(trace).all()

    def test_early_exit_on_target(self, tiny_dataset):
        rec = tiny_dataset.records[0]
        images = rec.load_images()[:2]
        _, trace = fit_gaussians_to_views(images, rec.poses[:2], 8,
                                          n_steps=400, lr=2e-2, seed=0,
                                          target_psnr=15.0)
        assert len(trace) < 400

    def test_rejects_mismatched_inputs(self):
        with pytest.raises(ValueError):
            fit_gaussians_to_views(torch.rand(2, 8, 8, 3), [], 4)
