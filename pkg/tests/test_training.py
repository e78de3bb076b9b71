import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import glyphnet as gn
from glyphnet.data import derive_rng, synth_glyphs
from glyphnet.exceptions import (
    BadMagic,
    EmptyBatch,
    EmptyDataset,
    InvalidConfig,
    InvalidLabel,
    NonFiniteGradient,
    TruncatedFile,
    VersionMismatch,
)
from glyphnet.layers import build_model, mv3_mini_config
from glyphnet.tensor import Graph, Tensor, backward
from glyphnet.training import (
    Checkpoint,
    ConfusionMatrix,
    OptimizerState,
    PlateauScheduler,
    SchedulerConfig,
    TrainConfig,
    adamw_step,
    checkpoint_from_model,
    cross_entropy_loss,
    evaluate,
    fit_model,
    load_checkpoint,
    metric_defs,
    restore_model,
    restore_optimizer,
    run_cross_validation,
    save_checkpoint,
    train_epoch,
)


def metric_bruteforce(labels, preds, n_classes=3):
    """Independent tp/fp/fn scan over (label, prediction) pairs."""
    per = []
    for c in range(n_classes):
        tp = sum(1 for l, p in zip(labels, preds) if l == c and p == c)
        fp = sum(1 for l, p in zip(labels, preds) if l != c and p == c)
        fn = sum(1 for l, p in zip(labels, preds) if l == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per.append((precision, recall, f1))
    acc = sum(1 for l, p in zip(labels, preds) if l == p) / len(labels)
    return per, acc


def cm_from_pairs(labels, preds, n_classes=3):
    counts = np.zeros((n_classes, n_classes), np.int64)
    for l, p in zip(labels, preds):
        counts[l, p] += 1
    return ConfusionMatrix(counts)


class TestCrossEntropy:
    def test_uniform_logits_ln3(self):
        loss = cross_entropy_loss(Tensor([[0.0, 0.0, 0.0]]), [1])
        assert loss.item() == pytest.approx(math.log(3.0), rel=1e-5)

    def test_large_logit_stable(self):
        loss = cross_entropy_loss(Tensor([[1000.0, 0.0, 0.0]]), [0])
        assert 0.0 <= loss.item() < 1e-6

    def test_batch_is_mean_of_individuals(self):
        l1 = cross_entropy_loss(Tensor([[0.0, 0.0, 0.0]]), [1]).item()
        l2 = cross_entropy_loss(Tensor([[1000.0, 0.0, 0.0]]), [0]).item()
        both = cross_entropy_loss(
            Tensor([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]), [1, 0]
        ).item()
        assert both == pytest.approx((l1 + l2) / 2, rel=1e-6)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            cross_entropy_loss(Tensor(np.zeros((0, 3), np.float32)), [])

    def test_invalid_label(self):
        with pytest.raises(InvalidLabel):
            cross_entropy_loss(Tensor([[0.0, 0.0, 0.0]]), [3])

    def test_gradient_direction(self):
        logits = Tensor(np.zeros((1, 3), np.float32), requires_grad=True)
        with Graph() as g:
            loss = cross_entropy_loss(logits, [2])
        backward(loss, g)
        # softmax grad: p - onehot = [1/3, 1/3, -2/3]
        np.testing.assert_allclose(logits.grad, [[1 / 3, 1 / 3, -2 / 3]], atol=1e-6)


class TestAdamW:
    def _cfg(self, lr=0.1, wd=0.0):
        return TrainConfig(lr=lr, weight_decay=wd)

    def _one_param(self, value):
        p = Tensor(np.array([value], np.float32), requires_grad=True)
        params = {"w": p}
        return params, OptimizerState.fresh(params)

    def test_single_step_no_decay(self):
        params, state = self._one_param(1.0)
        adamw_step(params, {"w": np.array([1.0], np.float32)}, state, self._cfg())
        # mhat=1, vhat=1 -> step = 0.1/(1+1e-8)
        assert params["w"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_single_step_with_decoupled_decay(self):
        params, state = self._one_param(1.0)
        adamw_step(params, {"w": np.array([1.0], np.float32)}, state, self._cfg(wd=0.01))
        assert params["w"].data[0] == pytest.approx(0.899, abs=1e-6)

    def test_zero_gradient_leaves_param(self):
        params, state = self._one_param(1.5)
        adamw_step(params, {"w": np.array([0.0], np.float32)}, state, self._cfg())
        assert params["w"].data[0] == 1.5

    def test_nonfinite_gradient_rejected(self):
        params, state = self._one_param(1.0)
        with pytest.raises(NonFiniteGradient):
            adamw_step(params, {"w": np.array([np.nan], np.float32)}, state, self._cfg())

    def test_order_invariance_without_decay(self, rng):
        values = {f"p{i}": rng.normal(size=4).astype(np.float32) for i in range(5)}
        grads = {k: rng.normal(size=4).astype(np.float32) for k in values}
        results = []
        for names in (list(values), list(reversed(values))):
            params = {k: Tensor(values[k].copy(), requires_grad=True) for k in names}
            state = OptimizerState.fresh(params)
            for _ in range(3):
                adamw_step(params, grads, state, self._cfg())
            results.append({k: params[k].data.copy() for k in values})
        for k in values:
            np.testing.assert_array_equal(results[0][k], results[1][k])

    def test_step_counter_shared(self):
        params, state = self._one_param(1.0)
        for _ in range(4):
            adamw_step(params, {"w": np.array([1.0], np.float32)}, state, self._cfg())
        assert state.t == 4


class TestScheduler:
    def test_monotone_improvement_keeps_lr(self):
        sched = PlateauScheduler(0.1, SchedulerConfig(factor=0.1, patience=2))
        for loss in (1.0, 0.9, 0.8):
            sched.step(loss)
        assert sched.lr == 0.1

    def test_plateau_trace(self):
        sched = PlateauScheduler(0.1, SchedulerConfig(factor=0.1, patience=2))
        lrs = [sched.step(1.0) for _ in range(4)]
        assert lrs == [0.1, 0.1, 0.1, pytest.approx(0.01)]
        assert sched.counter == 0

    def test_min_lr_floor(self):
        sched = PlateauScheduler(0.1, SchedulerConfig(factor=0.1, patience=0, min_lr=0.05))
        for _ in range(5):
            sched.step(1.0)
        assert sched.lr == 0.05

    def test_never_raises_lr(self):
        sched = PlateauScheduler(0.1, SchedulerConfig())
        seen = [sched.step(float(l)) for l in np.linspace(1.0, 0.1, 30)]
        assert all(b <= a for a, b in zip(seen, seen[1:]))

    def test_threshold_is_absolute(self):
        sched = PlateauScheduler(0.1, SchedulerConfig(factor=0.5, patience=0, threshold=1e-4))
        sched.step(1.0)
        sched.step(1.0 - 5e-5)  # below-threshold improvement counts as plateau
        assert sched.lr == pytest.approx(0.05)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(InvalidConfig):
            TrainConfig(lr=1e-7)  # not above min_lr
        with pytest.raises(InvalidConfig):
            TrainConfig(batch_size=0)
        with pytest.raises(InvalidConfig):
            TrainConfig(betas=(0.9, 1.0))

    def test_dict_roundtrip(self):
        cfg = TrainConfig(epochs=3, lr=0.01, seed=5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainEpoch:
    def test_deterministic_summaries(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, batch_size=8, seed=3)
        outs = []
        for _ in range(2):
            model = build_model(mv3_mini_config(), derive_rng(cfg.seed, 0, 11))
            state = OptimizerState.fresh(model.params)
            outs.append(train_epoch(model, tiny_dataset.samples, cfg, state, epoch=0))
        assert outs[0] == outs[1]

    def test_empty_dataset_rejected(self):
        model = build_model(mv3_mini_config(), derive_rng(0))
        with pytest.raises(EmptyDataset):
            train_epoch(model, [], TrainConfig(), OptimizerState.fresh(model.params))

    def test_parameters_move(self, tiny_dataset):
        model = build_model(mv3_mini_config(), derive_rng(0))
        before = {k: t.data.copy() for k, t in model.params.items()}
        train_epoch(model, tiny_dataset.samples, TrainConfig(batch_size=16),
                    OptimizerState.fresh(model.params), epoch=0)
        moved = any(not np.array_equal(before[k], model.params[k].data) for k in before)
        assert moved


class TestEvaluateAndMetrics:
    def test_perfect_predictions(self):
        cm = cm_from_pairs([0, 1, 2, 0], [0, 1, 2, 0])
        report = metric_defs(cm)
        assert report.accuracy == 1.0
        assert report.macro_precision == 1.0
        assert report.macro_recall == 1.0
        assert report.macro_f1 == 1.0
        assert np.trace(cm.counts) == cm.total

    def test_two_class_hand_case(self):
        # true rows: [[1,1],[0,2]] over two classes
        cm = ConfusionMatrix(np.array([[1, 1], [0, 2]], np.int64))
        report = metric_defs(cm)
        assert report.macro_precision == pytest.approx((1.0 + 2 / 3) / 2)
        assert report.macro_recall == pytest.approx((0.5 + 1.0) / 2)

    def test_uniform_matrix(self):
        cm = ConfusionMatrix(np.full((3, 3), 4, np.int64))
        report = metric_defs(cm)
        assert report.accuracy == pytest.approx(1 / 3)
        for pc in report.per_class:
            assert pc["precision"] == pytest.approx(1 / 3)
            assert pc["recall"] == pytest.approx(1 / 3)

    def test_absent_class_flagged_zero(self):
        cm = cm_from_pairs([0, 0, 1], [0, 0, 1])  # class 2 never appears
        report = metric_defs(cm)
        assert 2 in report.flagged
        assert report.per_class[2]["precision"] == 0.0
        assert report.per_class[2]["recall"] == 0.0

    def test_one_class_only_predictions(self):
        cm = cm_from_pairs([0, 0, 1, 2], [0, 0, 0, 0])
        report = metric_defs(cm)
        assert report.per_class[0]["precision"] == pytest.approx(0.5)
        assert report.per_class[1]["precision"] == 0.0
        assert report.per_class[2]["precision"] == 0.0

    def test_macro_equals_mean_of_per_class(self):
        cm = cm_from_pairs([0, 1, 2, 2, 1, 0, 0], [0, 2, 2, 1, 1, 0, 1])
        report = metric_defs(cm)
        assert report.macro_f1 == pytest.approx(
            sum(p["f1"] for p in report.per_class) / 3
        )

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=100))
    @settings(max_examples=150, deadline=None)
    def test_matches_bruteforce_oracle(self, pairs):
        labels = [l for l, _ in pairs]
        preds = [p for _, p in pairs]
        report = metric_defs(cm_from_pairs(labels, preds))
        per, acc = metric_bruteforce(labels, preds)
        assert report.accuracy == acc
        for c in range(3):
            assert report.per_class[c]["precision"] == per[c][0]
            assert report.per_class[c]["recall"] == per[c][1]
            assert report.per_class[c]["f1"] == per[c][2]

    def test_f1_between_precision_and_recall(self):
        for seed in range(50):
            r = np.random.default_rng(seed)
            labels = r.integers(0, 3, 30)
            preds = r.integers(0, 3, 30)
            report = metric_defs(cm_from_pairs(labels, preds))
            for pc in report.per_class:
                lo, hi = min(pc["precision"], pc["recall"]), max(pc["precision"], pc["recall"])
                assert lo - 1e-12 <= pc["f1"] <= hi + 1e-12

    def test_evaluate_on_model(self, tiny_dataset):
        model = build_model(mv3_mini_config(), derive_rng(0))
        cm, report, loss = evaluate(model, tiny_dataset.samples)
        assert cm.total == len(tiny_dataset.samples)
        assert 0.0 <= report.accuracy <= 1.0
        assert loss > 0.0
        assert cm.counts.sum(axis=1).tolist() == tiny_dataset.counts

    def test_evaluate_empty(self):
        model = build_model(mv3_mini_config(), derive_rng(0))
        with pytest.raises(EmptyDataset):
            evaluate(model, [])

    def test_evaluate_restores_mode(self, tiny_dataset):
        model = build_model(mv3_mini_config(), derive_rng(0)).train()
        evaluate(model, tiny_dataset.samples[:4])
        assert model.mode == "train"

    def test_argmax_ties_break_to_lowest_class(self):
        logits = np.array([[0.5, 0.5, 0.1], [0.2, 0.7, 0.7]], np.float32)
        np.testing.assert_array_equal(logits.argmax(axis=1), [0, 1])


class TestCheckpoint:
    def _roundtrip(self, tmp_path, optimizer=False):
        model = build_model(mv3_mini_config(), derive_rng(4))
        opt = OptimizerState.fresh(model.params) if optimizer else None
        if opt is not None:
            opt.t = 7
            for k in opt.m:
                opt.m[k][...] = 0.25
        ckpt = checkpoint_from_model(
            model, {"seed": 1, "fold": 0, "epoch": 2, "val_accuracy": 0.5,
                    "class_names": ["Normal", "Reversed", "Corrected"]},
            optimizer=opt)
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        return model, opt, load_checkpoint(path), path

    def test_roundtrip_bitwise(self, tmp_path):
        model, _, loaded, _ = self._roundtrip(tmp_path)
        restored = restore_model(loaded)
        for name in model.params:
            np.testing.assert_array_equal(model.params[name].data, restored.params[name].data)
        for name, arr in model.state_arrays().items():
            np.testing.assert_array_equal(arr, restored.state_arrays()[name])
        assert loaded.metadata["val_accuracy"] == 0.5

    def test_optimizer_roundtrip(self, tmp_path):
        model, opt, loaded, _ = self._roundtrip(tmp_path, optimizer=True)
        restored_model = restore_model(loaded)
        restored_opt = restore_optimizer(loaded, restored_model)
        assert restored_opt.t == 7
        for k in opt.m:
            np.testing.assert_array_equal(opt.m[k], restored_opt.m[k])

    def test_no_optimizer_returns_none(self, tmp_path):
        _, _, loaded, _ = self._roundtrip(tmp_path, optimizer=False)
        assert restore_optimizer(loaded, restore_model(loaded)) is None

    def test_magic_bytes(self, tmp_path):
        _, _, _, path = self._roundtrip(tmp_path)
        assert path.read_bytes()[:4] == b"LXGC"

    def test_bad_magic(self, tmp_path):
        _, _, _, path = self._roundtrip(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        _, _, _, path = self._roundtrip(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_truncated_mid_tensor(self, tmp_path):
        _, _, _, path = self._roundtrip(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 37])
        with pytest.raises(TruncatedFile):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        _, _, _, path = self._roundtrip(tmp_path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(TruncatedFile):
            load_checkpoint(path)

    def test_identical_saves_byte_identical(self, tmp_path):
        model = build_model(mv3_mini_config(), derive_rng(4))
        meta = {"seed": 1, "fold": 0, "epoch": 2, "val_accuracy": 0.5}
        ckpt = checkpoint_from_model(model, meta)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.fixture(scope="module")
def cv_result(tmp_path_factory):
    ds = synth_glyphs(10, seed=42)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=42, k_folds=5)
    out = tmp_path_factory.mktemp("cv")
    res = run_cross_validation(ds, mv3_mini_config(), cfg, out_dir=out)
    return ds, cfg, out, res


class TestCrossValidation:
    def test_fold_report_count_and_sizes(self, cv_result):
        ds, cfg, _, res = cv_result
        assert len(res.fold_reports) == 5
        for fold in range(5):
            assert len(res.fold_plan.val_indices(fold)) == 6

    def test_partition_property(self, cv_result):
        ds, _, _, res = cv_result
        seen = np.concatenate([res.fold_plan.val_indices(f) for f in range(5)])
        assert sorted(seen.tolist()) == list(range(len(ds.samples)))

    def test_checkpoints_written(self, cv_result):
        _, _, out, res = cv_result
        for fold in range(5):
            assert (out / "folds" / f"fold{fold + 1}" / "best.ckpt").exists()

    def test_best_checkpoint_is_first_argmax_of_history(self, cv_result):
        _, _, _, res = cv_result
        for fold in range(5):
            accs = [h["val_accuracy"] for h in res.histories[fold]]
            best_epoch = int(np.argmax(accs))  # first maximum wins ties
            assert res.best_checkpoints[fold].metadata["epoch"] == best_epoch
            assert res.fold_reports[fold].accuracy == accs[best_epoch]

    def test_best_fold_selection(self, cv_result):
        _, _, _, res = cv_result
        accs = [r.accuracy for r in res.fold_reports]
        assert res.best_fold == int(np.argmax(accs))

    def test_test_dataset_contract(self):
        ds = synth_glyphs(6, seed=1)
        test_ds = synth_glyphs(4, seed=2)
        cfg = TrainConfig(epochs=1, batch_size=16, seed=0, k_folds=2)
        res = run_cross_validation(ds, mv3_mini_config(), cfg, test_dataset=test_ds)
        assert res.test_report is not None
        assert res.test_confusion.total == len(test_ds.samples)

    def test_fold_failure_names_fold(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, batch_size=8, seed=0, k_folds=11)
        with pytest.raises(Exception, match="needs >= 11"):
            run_cross_validation(tiny_dataset, mv3_mini_config(), cfg)


class TestFitModel:
    def test_training_survives_lr_hitting_min_lr(self, tiny_dataset):
        # aggressive plateau schedule drives lr to the floor within the run
        sched = SchedulerConfig(factor=0.5, patience=0, min_lr=2e-4, threshold=10.0)
        cfg = TrainConfig(epochs=6, batch_size=16, seed=0, lr=4e-4, scheduler=sched)
        _, _, history = fit_model(tiny_dataset.samples, mv3_mini_config(), cfg)
        assert history[-1]["lr"] == 2e-4  # floored, and the run completed

    def test_history_and_determinism(self, tiny_dataset):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=9)
        m1, _, h1 = fit_model(tiny_dataset.samples, mv3_mini_config(), cfg)
        m2, _, h2 = fit_model(tiny_dataset.samples, mv3_mini_config(), cfg)
        assert h1 == h2
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)

    def test_finetune_from_checkpoint(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=16, seed=9)
        model, opt, _ = fit_model(tiny_dataset.samples, mv3_mini_config(), cfg)
        ckpt = checkpoint_from_model(model, {"seed": 9}, optimizer=opt)
        m2, _, h2 = fit_model(tiny_dataset.samples, mv3_mini_config(), cfg, init=ckpt)
        assert len(h2) == 1
