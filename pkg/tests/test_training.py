import math

import numpy as np
import pytest

from querytrack import autodiff as ad
from querytrack.core import RunConfig
from querytrack.model import build_model, checksum
from querytrack.synthgen import generate_benchmark
from querytrack.training import (
    AdamW,
    TrainExample,
    TrainHistory,
    joint_loss,
    mask_loss,
    purport_loss,
    sample_example,
    text_loss,
    train,
)

from helpers import fd_gradient, rel_err

CFG = RunConfig(brain_dim=32, brain_blocks=1, brain_heads=2, decoder_dim=16,
                decoder_blocks=1, decoder_heads=2, encoder_blocks=1,
                encoder_heads=2, patch_size=4, image_token_count=16,
                batch_size=2, brain_pretrain_steps=0, seed=0)


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(2, 1, seed=5, n_frames=4, canvas=(32, 32),
                              max_shapes=2, change_fraction=0.0)


def example_for(bench, kind="explicit", indices=(0, 1, 2)):
    seq = bench.train[0]
    record = next(r for r in seq.instructions if r.kind == kind)
    return TrainExample(sequence=seq, record=record, text=record.seed_text,
                        frame_indices=indices)


class TestTextLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = ad.constant(np.zeros((7, 11)))
        ids = np.arange(7) % 11
        loss = text_loss(logits, ids, prompt_len=3)
        assert float(loss.data) == pytest.approx(math.log(11), rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(6, 9))
        ids = rng.integers(0, 9, size=6)

        def f(x):
            with ad.no_grad():
                return float(text_loss(ad.constant(x), ids, prompt_len=2).data)

        x = ad.parameter(x0.copy())
        text_loss(x, ids, prompt_len=2).backward()
        assert rel_err(x.grad, fd_gradient(f, x0.copy())) < 1e-6

    def test_rejects_empty_answer(self):
        with pytest.raises(ValueError, match="answer"):
            text_loss(ad.constant(np.zeros((3, 4))), [1, 2, 3], prompt_len=3)


class TestMaskLoss:
    def test_matches_naive_bce_and_dice(self):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=2.0, size=(5, 5))
        y = rng.random((5, 5)) < 0.5
        with ad.no_grad():
            got = float(mask_loss(ad.constant(x), y, 2.0, 0.5).data)
        p = 1.0 / (1.0 + np.exp(-x))
        bce = np.mean(-(y * np.log(p) + (~y) * np.log(1.0 - p)))
        dice = 1.0 - (2.0 * (p * y).sum() + 1.0) / (p.sum() + y.sum() + 1.0)
        assert got == pytest.approx(2.0 * bce + 0.5 * dice, rel=1e-10)

    def test_perfect_prediction_scores_lower(self):
        y = np.zeros((6, 6), bool)
        y[2:4, 2:4] = True
        sharp = np.where(y, 12.0, -12.0)
        with ad.no_grad():
            good = float(mask_loss(ad.constant(sharp), y, 2.0, 0.5).data)
            bad = float(mask_loss(ad.constant(-sharp), y, 2.0, 0.5).data)
        assert good < 0.1 < bad

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(4, 4))
        y = rng.random((4, 4)) < 0.4

        def f(x):
            with ad.no_grad():
                return float(mask_loss(ad.constant(x), y, 2.0, 0.5).data)

        x = ad.parameter(x0.copy())
        mask_loss(x, y, 2.0, 0.5).backward()
        assert rel_err(x.grad, fd_gradient(f, x0.copy())) < 1e-6


class TestPurportLoss:
    def test_squared_error(self):
        with ad.no_grad():
            loss = purport_loss(ad.constant(np.float64(0.3)), 0.5)
        assert float(loss.data) == pytest.approx(0.04, rel=1e-12)


@pytest.fixture(scope="module")
def model():
    return build_model(CFG)


class TestJointLoss:
    def test_parts_sum_to_total(self, model, bench):
        total, parts = joint_loss(model, example_for(bench))
        assert set(parts) == {"text", "mask", "purport"}
        assert float(total.data) == pytest.approx(
            parts["text"] + parts["mask"] + parts["purport"], rel=1e-12)
        assert np.isfinite(total.data)

    def test_three_frame_example_reaches_every_group(self, bench):
        model = build_model(CFG)
        total, _ = joint_loss(model, example_for(bench))
        total.backward()
        for probe in ("lora/blk0/attn/wq/b", "imgproj/w", "phi/l2/w",
                      "dec/mask_tok", "dec/init_q", "prop/l0/w"):
            g = model.params[probe].grad
            assert g is not None and np.any(g != 0.0), probe

    def test_single_frame_example_skips_propagation(self, bench):
        model = build_model(CFG)
        total, _ = joint_loss(model, example_for(bench, indices=(1,)))
        total.backward()
        assert model.params["prop/l0/w"].grad is None
        assert model.params["dec/init_q"].grad is not None

    def test_gradient_spot_check_against_fd(self, bench):
        model = build_model(CFG)
        example = example_for(bench)
        total, _ = joint_loss(model, example)
        total.backward()
        rng = np.random.default_rng(3)
        for name in ("dec/mask_tok", "prop/l0/w", "lora/blk0/attn/wv/b"):
            p = model.params[name]
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in rng.choice(flat.size, size=2, replace=False):
                orig = flat[idx]
                flat[idx] = orig + 1e-5
                up, _ = joint_loss(model, example)
                flat[idx] = orig - 1e-5
                dn, _ = joint_loss(model, example)
                flat[idx] = orig
                fd = (float(up.data) - float(dn.data)) / 2e-5
                assert rel_err(gflat[idx], fd, floor=1e-4) < 1e-3, name


class TestAdamW:
    def test_descends_a_quadratic(self):
        p = ad.parameter(np.array([10.0, -4.0]))
        params = {"x": p}
        opt = AdamW(params, ["x"], lr=0.2)
        for _ in range(200):
            opt.zero_grad()
            ((p - ad.constant(np.array([3.0, 1.0]))) ** 2).sum().backward()
            opt.step()
        assert np.allclose(p.data, [3.0, 1.0], atol=1e-2)

    def test_none_grad_leaves_param_untouched(self):
        a = ad.parameter(np.ones(3))
        b = ad.parameter(np.ones(3))
        params = {"a": a, "b": b}
        opt = AdamW(params, ["a", "b"], lr=0.5)
        opt.zero_grad()
        (a * ad.constant(np.arange(3.0))).sum().backward()
        opt.step()
        assert not np.array_equal(a.data, np.ones(3))
        assert np.array_equal(b.data, np.ones(3))


class TestSampling:
    def test_stage_curriculum(self, bench):
        rng = np.random.default_rng(0)
        for _ in range(10):
            e1 = sample_example(rng, bench.train, 1)
            assert e1.record.kind == "explicit" and len(e1.frame_indices) == 1
            e2 = sample_example(rng, bench.train, 2)
            assert e2.record.kind == "explicit" and len(e2.frame_indices) == 3
        kinds = {sample_example(rng, bench.train, 3).record.kind for _ in range(30)}
        assert kinds == {"explicit", "implicit"}

    def test_indices_strictly_increase(self, bench):
        rng = np.random.default_rng(1)
        for _ in range(20):
            e = sample_example(rng, bench.train, 2)
            assert all(b > a for a, b in zip(e.frame_indices, e.frame_indices[1:]))

    def test_validation(self, bench):
        seq = bench.train[0]
        record = seq.instructions[0]
        with pytest.raises(ValueError, match="strictly increase"):
            TrainExample(sequence=seq, record=record, text=record.seed_text,
                         frame_indices=(2, 1, 0))
        with pytest.raises(ValueError, match="1 or 3"):
            TrainExample(sequence=seq, record=record, text=record.seed_text,
                         frame_indices=(0, 1))
        with pytest.raises(ValueError, match="phrasings"):
            TrainExample(sequence=seq, record=record, text="something else",
                         frame_indices=(0,))


class TestTrain:
    def test_smoke_run_updates_only_trainable(self, bench, tmp_path):
        model = build_model(CFG)
        frozen_before = checksum(model.params, "enc/"), checksum(model.params, "brain/")
        prop_before = model.params["prop/l0/w"].data.copy()
        dec_before = model.params["dec/mask_tok"].data.copy()
        history = train(model, bench.train, stage=1, steps=3,
                        csv_path=tmp_path / "loss.csv")
        assert isinstance(history, TrainHistory)
        assert len(history.totals) == 3
        assert history.initial == history.totals[0]
        assert (checksum(model.params, "enc/"),
                checksum(model.params, "brain/")) == frozen_before
        # stage 1 never runs propagation: its weights must not move at all
        assert np.array_equal(model.params["prop/l0/w"].data, prop_before)
        assert not np.array_equal(model.params["dec/mask_tok"].data, dec_before)

    def test_rerun_is_byte_identical(self, bench, tmp_path):
        for tag in ("a", "b"):
            train(build_model(CFG), bench.train, stage=1, steps=3,
                  csv_path=tmp_path / f"{tag}.csv")
        assert ((tmp_path / "a.csv").read_bytes()
                == (tmp_path / "b.csv").read_bytes())

    def test_csv_layout(self, bench, tmp_path):
        train(build_model(CFG), bench.train, stage=1, steps=2,
              csv_path=tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,total,text,mask,purport"
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "0"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_step(self, bench):
        model = build_model(CFG)
        model.params["brain/head/b"].data[:] = np.inf
        with pytest.raises(RuntimeError, match="step 0"):
            train(model, bench.train, stage=1, steps=1)

    def test_stage_and_steps_validated(self, bench):
        model = build_model(CFG)
        with pytest.raises(ValueError, match="stage"):
            train(model, bench.train, stage=4, steps=1)
        with pytest.raises(ValueError, match="steps"):
            train(model, bench.train, stage=1, steps=0)

    def test_stage2_needs_three_frames(self):
        short = generate_benchmark(1, 1, seed=9, n_frames=2, canvas=(32, 32),
                                   max_shapes=2, change_fraction=0.0)
        model = build_model(CFG)
        with pytest.raises(ValueError, match="stage-2"):
            train(model, short.train, stage=2, steps=1)
