import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from patchmoe.harness import data as D
from patchmoe.harness.cost import concat_expert_delta, count_cost, ssm_params
from patchmoe.harness.gradcheck import SCOPES, gradcheck, rel_error
from patchmoe.harness.metrics import dice, evaluate, iou, mae
from patchmoe.harness.optim import AdamW, cosine_lr
from patchmoe.harness.train import (
    CSV_HEADER,
    TrainingDivergence,
    TrainSettings,
    train,
    train_step,
)
from patchmoe.scan_order import parse_patch_scheme
from patchmoe.segnet import NetworkConfig, PatchMoENet, to_container
from patchmoe.tensor import ContractError, DimensionError, Param

import oracles

TINY = NetworkConfig(stage_channels=(4, 8), patch_scheme="2211/1111", sdi_channels=4,
                     input_size=(16, 16), state_dim=2)


def half_masks():
    left = np.zeros((4, 4))
    left[:, :2] = 1
    return left, 1 - left


class TestMetrics:
    def test_half_overlap_hand_count(self):
        # |P| = |G| = 8 on a 4x4 grid, overlapping in 4 pixels.
        pred = np.zeros((4, 4))
        pred[:2, :] = 1
        mask = np.zeros((4, 4))
        mask[:, :2] = 1
        assert abs(dice(pred, mask) - 0.5) <= 1e-12
        assert abs(iou(pred, mask) - 1 / 3) <= 1e-12

    def test_disjoint_halves(self):
        left, right = half_masks()
        assert dice(left, right) == 0.0 and iou(left, right) == 0.0
        # Every pixel lies in the union here, so MAE is 1 times the covered fraction 1.
        assert mae(left, right) == 1.0
        quarter = np.zeros((4, 4))
        quarter[:2, :2] = 1
        assert mae(quarter, np.zeros((4, 4))) == 0.25

    def test_identities(self, rng):
        for _ in range(20):
            m = (rng.random((6, 5)) > 0.6).astype(float)
            assert dice(m, m) == 1.0 and iou(m, m) == 1.0 and mae(m, m) == 0.0
            p = rng.random((6, 5))
            d, i = dice(p, m), iou(p, m)
            assert i <= d + 1e-15
            assert (i == d) == (d in (0.0, 1.0))

    def test_empty_conventions(self):
        z = np.zeros((3, 3))
        assert dice(z, z) == 1.0 and iou(z, z) == 1.0
        one = z.copy()
        one[1, 1] = 1
        assert dice(one, z) == 0.0 and iou(z, one) == 0.0

    def test_threshold_is_inclusive(self):
        mask = np.array([[1.0, 0.0]])
        assert dice(np.array([[0.5, 0.49]]), mask) == 1.0

    def test_mae_uses_probabilities(self):
        assert mae(np.array([[0.8, 0.3]]), np.array([[1.0, 0.0]])) == pytest.approx(0.25, abs=1e-15)

    def test_errors(self):
        with pytest.raises(DimensionError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ContractError):
            iou(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_evaluate_averages_per_image(self):
        left, right = half_masks()
        report = evaluate(np.stack([left, left]), np.stack([left, right]))
        assert (report.dsc, report.iou, report.mae) == (0.5, 0.5, 0.5)


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (25, (1e-3 + 1e-5) / 2), (50, 1e-5)])
    def test_anchor_points(self, epoch, expected):
        assert abs(cosine_lr(epoch) - expected) <= 1e-12

    def test_matches_closed_form_and_restarts(self):
        for e in range(0, 120):
            assert abs(cosine_lr(e) - oracles.cosine_lr(e, 1e-3, 1e-5, 50)) <= 1e-15
        assert cosine_lr(100) == pytest.approx(1e-3, abs=1e-15)


class TestAdamW:
    def test_first_step_oracle(self, rng):
        p = Param(rng.standard_normal(5))
        start = p.data.copy()
        g = rng.standard_normal(5)
        p.grad = g.copy()
        opt = AdamW([p], lr=0.01, weight_decay=0.1)
        opt.step()
        # Bias correction makes the first moments exactly g and g^2.
        expected = start * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=1e-15)

    def test_zero_grad(self, rng):
        p = Param(rng.standard_normal(3))
        p.grad = np.ones(3)
        AdamW([p]).zero_grad()
        assert np.all(p.grad == 0)


class TestData:
    def test_deterministic_and_binary(self):
        a, b = D.generate_dataset(4, 32, 32, seed=3), D.generate_dataset(4, 32, 32, seed=3)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)
        assert a[0].image.shape == (3, 32, 32) and a[0].mask.shape == (1, 32, 32)
        assert set(np.unique(a[0].mask)) <= {0.0, 1.0}

    def test_prefix_stable(self):
        short, long = D.generate_dataset(3, 16, 16), D.generate_dataset(6, 16, 16)
        for s, l in zip(short, long):
            np.testing.assert_array_equal(s.image, l.image)

    def test_foreground_fraction_regression(self):
        assert D.foreground_fraction(D.generate_dataset(100, 64, 64, seed=0)) == 0.1329541015625

    def test_save_and_load(self, tmp_path):
        samples = D.generate_dataset(3, 8, 8, seed=1)
        D.save_dataset(tmp_path, {"train": samples})
        back = D.load_split(tmp_path / "train")
        assert [s.seed for s in back] == [s.seed for s in samples]
        for s, b in zip(samples, back):
            np.testing.assert_array_equal(s.image, b.image)
            np.testing.assert_array_equal(s.mask, b.mask)

    def test_missing_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.load_split(tmp_path)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            D.generate_dataset(0)


class TestTraining:
    def test_deterministic_history_and_outputs(self, tmp_path):
        samples = D.generate_dataset(6, 16, 16, seed=2)
        settings = TrainSettings(epochs=2, batch_size=4, seed=1)
        a = train(TINY, samples[:4], samples[4:], settings, out_dir=tmp_path / "a", tag="x")
        b = train(TINY, samples[:4], samples[4:], settings, out_dir=tmp_path / "b", tag="x")
        assert [r.row() for r in a.history] == [r.row() for r in b.history]
        text_a = (tmp_path / "a" / "x.csv").read_text()
        assert text_a == (tmp_path / "b" / "x.csv").read_text()
        rows = list(csv.reader(text_a.splitlines()))
        assert tuple(rows[0]) == CSV_HEADER and len(rows) == 3
        assert float(rows[1][5]) == cosine_lr(0)
        assert (tmp_path / "a" / "x.pmss").exists()
        assert all(math.isfinite(r.loss) for r in a.history)

    def test_loss_decreases(self):
        samples = D.generate_dataset(4, 16, 16, seed=2)
        result = train(TINY, samples, settings=TrainSettings(epochs=6, batch_size=4, lr_max=3e-3, cycle=6))
        assert result.history[-1].loss < result.history[0].loss

    def test_divergence_is_reported(self):
        sample = D.generate_dataset(1, 16, 16)[0]
        model = PatchMoENet(TINY)
        model.decoder.head.bias.data[:] = np.nan
        with pytest.raises(TrainingDivergence):
            train_step(model, AdamW(model.parameters()), sample.image[None], sample.mask[None])

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train(TINY, [])


class TestGradcheck:
    @pytest.mark.parametrize("scope", SCOPES)
    def test_scope_passes(self, scope):
        report = gradcheck(scope)
        assert report.passed, report.lines()
        assert report.checked > 0 and report.max_rel_err < report.tolerance

    @pytest.mark.parametrize("scope", ["conv1x1", "ssm", "moe"])
    def test_corrupted_gradient_is_caught(self, scope):
        report = gradcheck(scope, corrupt=True)
        assert not report.passed and report.failures

    def test_rel_error_floor(self):
        assert rel_error(1.0, 1.0) == 0.0
        assert rel_error(2.0, 1.0) == 0.5
        assert rel_error(1e-9, 0.0) == pytest.approx(1e-5)

    def test_unknown_scope(self):
        from patchmoe.tensor import ConfigurationError
        with pytest.raises(ConfigurationError):
            gradcheck("nope")


CONFIGS = [
    TINY,
    replace(TINY, use_concat=False),
    replace(TINY, use_moe=False),
    replace(TINY, share_ssm=True, blocks_per_stage=2),
    NetworkConfig(),
    NetworkConfig(stage_channels=(8, 16, 32, 64), state_dim=4),
]


class TestCost:
    @pytest.mark.parametrize("config", CONFIGS, ids=range(len(CONFIGS)))
    def test_params_match_model_and_checkpoint(self, config):
        net = PatchMoENet(config)
        report = count_cost(config)
        assert report.params == net.num_parameters() == to_container(net).param_scalar_count()

    @pytest.mark.parametrize("config", [c for c in CONFIGS if c.use_moe and c.use_concat])
    def test_concat_expert_adds_params(self, config):
        lean = count_cost(replace(config, use_concat=False)).params
        assert count_cost(config).params > lean
        per_block = sum(concat_expert_delta(c) for c in config.stage_channels) * config.blocks_per_stage
        assert count_cost(config).params - lean == per_block

    def test_scheme_has_zero_param_delta(self):
        base = count_cost(NetworkConfig())
        other = count_cost(replace(NetworkConfig(), patch_scheme=parse_patch_scheme("1111/2222/4444/8888")))
        assert other.params == base.params

    def test_macs_scale_with_pixels(self):
        small = count_cost(TINY, (16, 16)).macs
        assert count_cost(TINY, (32, 32)).macs == 4 * small

    def test_default_config_regression(self):
        report = count_cost(NetworkConfig())
        assert (report.params, report.macs) == (243673, 68292608)

    def test_ssm_param_formula(self):
        assert ssm_params(4, 3) == 16 + 36 + 8

    def test_csv_has_total(self):
        report = count_cost(TINY)
        lines = report.to_csv().splitlines()
        assert lines[0] == "component,params,macs"
        assert lines[-1] == f"total,{report.params},{report.macs}"
        assert sum(int(l.split(",")[1]) for l in lines[1:-1]) == report.params
