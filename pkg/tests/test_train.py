import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msaseg import checkpoint
from msaseg.data import SynthSpec, generate
from msaseg.model import init_params, param_group
from msaseg.tensor import ShapeError, Tensor
from msaseg.train import (ABLATION_ROWS, ConfigError, NumericalError, RunConfig, TrainState, ablate,
                          batch_indices, check_params, evaluate, format_ablation, init_state, load_config,
                          log_header, param_lr, parse_config_text, poly_lr, predict, train)

TINY = dict(widths=(4, 8, 8), scale_channels=4, head_hidden=4, batch_size=2, max_iter=6, checkpoint_every=3)


def make_dataset(count=8, size=40, seed=0):
    samples = [generate(SynthSpec(size=size, seed=seed), i) for i in range(count)]
    meta = {"size": size, "nClass": 5, "seed": seed, "count": count}
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples]), meta


@pytest.fixture(scope="module")
def dataset():
    return make_dataset()


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


class TestSchedule:
    def test_spot_values(self):
        assert poly_lr(0.01, 0, 2000) == 0.01
        assert poly_lr(0.01, 2000, 2000) == 0.0
        assert poly_lr(0.01, 1000, 2000) == pytest.approx(0.01 * 0.5 ** 0.9, abs=1e-12)
        assert poly_lr(0.01, 1000, 2000) == pytest.approx(0.005359, abs=1e-6)

    def test_past_the_end_clamps_with_warning(self):
        with pytest.warns(UserWarning, match="clamped"):
            assert poly_lr(0.01, 2001, 2000) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 10_000), st.floats(0.1, 3.0), st.data())
    def test_property_strictly_decreasing(self, max_iter, power, data):
        i = data.draw(st.integers(0, max_iter - 1))
        assert poly_lr(1.0, i + 1, max_iter, power) < poly_lr(1.0, i, max_iter, power)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1999))
    def test_property_decoder_rate_is_ten_times_encoder(self, it):
        cfg = RunConfig()
        enc = param_lr(cfg, "backbone.conv2.weight", it)
        for name in ("decoder.score.weight", "stream_conv.1.bias", "head.loc.hidden.weight", "head.rec.out.bias"):
            assert param_lr(cfg, name, it) == enc * 10

    def test_every_parameter_has_a_group(self):
        groups = {param_group(k) for k in init_params(RunConfig().model_config())}
        assert groups == {"encoder", "decoder"}


class TestBatches:
    def test_each_epoch_visits_every_sample_once(self):
        pool = list(range(0, 20, 2))
        seen = [i for it in range(5) for i in batch_indices(pool, 2, seed=3, iteration=it)]
        assert sorted(seen) == pool

    def test_depends_only_on_iteration(self):
        pool = list(range(10))
        assert batch_indices(pool, 4, 1, 7) == batch_indices(pool, 4, 1, 7)
        assert batch_indices(pool, 4, 1, 7) != batch_indices(pool, 4, 2, 7)


class TestConfig:
    def test_parse_text(self):
        text = "# comment\nbase_lr = 0.02\n\nscales = 1.0, 0.5\nmulti_stage = false\n"
        cfg = RunConfig.from_pairs(parse_config_text(text))
        assert cfg.base_lr == 0.02 and cfg.scales == (1.0, 0.5) and cfg.multi_stage is False

    def test_text_roundtrip(self):
        cfg = RunConfig(seed=4, dilations=(3, 9), location_attention="maxpool", extra_branch=False)
        assert RunConfig.from_pairs(parse_config_text(cfg.to_text())) == cfg

    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("seed = 3\nmax_iter = 10\n")
        cfg = load_config(str(path), {"seed": "9", "batch-size": "4"})
        assert (cfg.seed, cfg.max_iter, cfg.batch_size) == (9, 10, 4)

    @pytest.mark.parametrize("pairs,match", [
        ({"nope": "1"}, "unknown"),
        ({"multi_stage": "maybe"}, "bad value"),
        ({"max_iter": "1.5"}, "bad value"),
        ({"power": "0"}, "power"),
        ({"location_attention": "avgpool"}, "extra_branch"),
        ({"dilations": "2"}, "dilation"),
    ])
    def test_invalid(self, pairs, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_pairs(pairs)

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("seed = 1\nbroken\n")


class TestTraining:
    def test_zero_rate_leaves_parameters_unchanged(self, dataset):
        cfg = tiny(base_lr=0.0, max_iter=1)
        state = train(cfg, dataset=dataset)
        init = init_state(cfg).params
        assert all(np.array_equal(state.params[k].data, init[k].data) for k in init)

    def test_log_and_checkpoints(self, dataset, tmp_path):
        train(tiny(), out_dir=str(tmp_path), dataset=dataset)
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss_total,loss_final,loss_s1,loss_s2" == log_header(2)
        assert len(lines) == 7 and lines[1].startswith("0,0.01,")
        names = sorted(os.listdir(tmp_path))
        assert names == ["ckpt_000003.msat", "ckpt_000006.msat", "model.msat", "run.cfg", "train_log.csv"]
        for row in lines[1:]:
            _, _, total, *terms = map(float, row.split(","))
            assert total == pytest.approx(sum(terms), rel=1e-5)

    def test_runs_are_bit_identical(self, dataset, tmp_path):
        for d in ("a", "b"):
            train(tiny(), out_dir=str(tmp_path / d), dataset=dataset)
        for name in ("train_log.csv", "model.msat", "ckpt_000003.msat"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted_run(self, dataset, tmp_path):
        full = train(tiny(), out_dir=str(tmp_path / "full"), dataset=dataset)
        part = tmp_path / "part"
        train(tiny(), out_dir=str(part), stop_at=3, dataset=dataset)
        resumed = TrainState.from_tensors(checkpoint.load(str(part / "ckpt_000003.msat")))
        assert resumed.iteration == 3
        train(tiny(), out_dir=str(part), resume=resumed, dataset=dataset)
        assert (part / "model.msat").read_bytes() == (tmp_path / "full" / "model.msat").read_bytes()
        assert (part / "train_log.csv").read_bytes() == (tmp_path / "full" / "train_log.csv").read_bytes()
        assert all(np.array_equal(full.params[k].data, resumed.params[k].data) for k in full.params)

    def test_state_tensor_roundtrip(self):
        state = init_state(tiny())
        state.iteration = 17
        state.momentum["decoder.score.bias"][:] = 0.5
        back = TrainState.from_tensors(checkpoint.loads(checkpoint.dumps(state.to_tensors())))
        assert back.iteration == 17 and set(back.params) == set(state.params)
        assert np.all(back.momentum["decoder.score.bias"] == 0.5)

    def test_non_finite_loss_aborts_with_diagnostic(self, dataset):
        images, labels, meta = dataset
        bad = images.copy()
        bad[:] = np.nan
        with pytest.raises(NumericalError, match=r"first non-finite tensor: node #\d+ \(const, image\)"):
            train(tiny(), dataset=(bad, labels, meta))

    def test_class_count_mismatch(self, dataset):
        images, labels, meta = dataset
        with pytest.raises(ConfigError, match="classes"):
            train(tiny(), dataset=(images, labels, {**meta, "nClass": 3}))

    @pytest.mark.slow
    def test_loss_drops_below_uniform_baseline(self):
        data = make_dataset(count=64, size=64)
        state = train(RunConfig(max_iter=200), dataset=data)
        baseline = 3 * math.log(5)
        assert np.mean([r[2] for r in state.log_rows[-10:]]) < baseline


class TestEvaluate:
    def test_zero_decoder_predicts_background(self, dataset):
        cfg = tiny()
        params = init_state(cfg).params
        for k in params:
            if param_group(k) == "decoder":
                params[k] = Tensor.zeros(params[k].shape)
        report = evaluate(params, cfg, dataset)
        _, labels, _ = dataset
        background = np.mean(labels[1::2] == 0)
        assert report["pixel_accuracy"] == pytest.approx(background, abs=1e-12)
        assert report["iou_class0"] == pytest.approx(background, abs=1e-12)

    def test_report_files_and_repeatability(self, dataset, tmp_path):
        cfg = tiny()
        params = init_state(cfg).params
        a = evaluate(params, cfg, dataset, out_dir=str(tmp_path))
        b = evaluate(params, cfg, dataset)
        assert a == b
        kv = (tmp_path / "metrics.kv").read_text()
        assert f"miou={a['miou']!r}" in kv
        assert "pixel_accuracy" in (tmp_path / "metrics.txt").read_text()

    def test_checkpoint_config_mismatch(self, dataset):
        params = init_state(tiny()).params
        with pytest.raises(ConfigError, match="classes"):
            check_params(params, tiny(n_class=4))
        with pytest.raises(ConfigError, match="missing"):
            check_params(params, tiny(extra_branch=False, location_attention="maxpool"))


class TestAblate:
    def test_table_has_a_row_per_configuration(self, dataset, tmp_path):
        results = ablate(tiny(max_iter=2), seeds=(0,), dataset=dataset, out_dir=str(tmp_path))
        assert [r["name"] for r in results] == [name for name, _ in ABLATION_ROWS]
        assert all(0.0 <= r["median_miou"] <= 1.0 for r in results)
        table = (tmp_path / "ablation.txt").read_text().splitlines()
        assert len(table) == 2 + 6 and table == format_ablation(results).splitlines()


class TestPredict:
    def test_outputs(self, dataset):
        cfg = tiny()
        params = train(cfg, dataset=dataset).params
        image = dataset[0][1]
        pred = predict(params, cfg, image)
        assert pred.mask.shape == (40, 40) and pred.mask.dtype == np.uint8
        assert pred.mask.max() < 5
        assert len(pred.attention) == 2 and len(pred.recalibration) == 5
        total = sum(m.astype(np.int64) for m in pred.attention) / 255.0
        assert np.all(np.abs(total - 1.0) <= 2 / 255)
        again = predict(params, cfg, image)
        assert np.array_equal(pred.mask, again.mask)
        assert all(np.array_equal(a, b) for a, b in zip(pred.attention, again.attention))

    def test_pooling_merge_has_no_maps(self, dataset):
        cfg = tiny(location_attention="maxpool", extra_branch=False)
        pred = predict(init_state(cfg).params, cfg, dataset[0][0])
        assert pred.attention == [] and pred.recalibration == []

    def test_size_violation_asks_for_padding(self, dataset):
        cfg = tiny()
        with pytest.raises(ShapeError, match="pad"):
            predict(init_state(cfg).params, cfg, dataset[0][0][:, :36, :36])
