"""Optimizer, schedule, training loop, persistence, and driver tests."""

import math

import numpy as np
import pytest

from dfnet.data import AugmentConfig, SyntheticDatasetSpec, generate_synthetic
from dfnet.errors import ConfigError, FormatError, TrainingDiverged, UsageError
from dfnet.model import DFNetConfig, build_model
from dfnet.tensor import Tensor
from dfnet.train import (ABLATION_HEADER, ABLATION_VARIANTS,
                         DEFAULT_LAMBDA_GRID, HISTORY_HEADER, SWEEP_HEADER,
                         EpochRecord, OptimState, PlateauSchedule,
                         ablation_csv_lines, evaluate_model,
                         history_csv_lines, load_training_state,
                         predict_maps, run_ablation, run_lambda_sweep,
                         save_training_state, schedule_update, sgd_momentum_step,
                         sharpness, sweep_csv_lines, train)

NO_AUG = AugmentConfig(hflip_probability=0.0, rotation_range_degrees=(0.0, 0.0))


def tiny_config():
    return DFNetConfig(branch_channels=2, fuse_channels=8, ami_channels=8,
                       input_size=(32, 32), dtype="float32")


def tiny_samples(n_train=6, n_test=3, seed=11):
    spec = SyntheticDatasetSpec(n_train=n_train, n_test=n_test,
                                canvas=(32, 32), seed=seed)
    return generate_synthetic(spec)


def scalar_param(value=0.0):
    return Tensor(np.full((1, 1, 1, 1), value), requires_grad=True)


class TestSgdMomentum:
    def test_first_step_displacement(self):
        p = scalar_param()
        state = OptimState(learning_rate=0.1, momentum=0.9)
        sgd_momentum_step([("p", p)], {"p": np.ones((1, 1, 1, 1))}, state)
        assert p.data.item() == -0.1

    def test_two_step_cumulative_displacement(self):
        p = scalar_param()
        state = OptimState(learning_rate=0.1, momentum=0.9)
        g = {"p": np.ones((1, 1, 1, 1))}
        sgd_momentum_step([("p", p)], g, state)
        sgd_momentum_step([("p", p)], g, state)
        assert p.data.item() == pytest.approx(-0.29, rel=1e-12)

    def test_zero_gradient_keeps_param(self):
        p = scalar_param(2.5)
        state = OptimState()
        sgd_momentum_step([("p", p)], {"p": np.zeros((1, 1, 1, 1))}, state)
        assert p.data.item() == 2.5

    def test_velocity_buffer_reused(self):
        p = scalar_param()
        state = OptimState(learning_rate=0.1, momentum=0.9)
        g = {"p": np.ones((1, 1, 1, 1))}
        sgd_momentum_step([("p", p)], g, state)
        buf = state.velocities["p"]
        sgd_momentum_step([("p", p)], g, state)
        assert state.velocities["p"] is buf
        assert buf.item() == pytest.approx(-0.19, rel=1e-12)

    def test_missing_gradient_rejected(self):
        with pytest.raises(UsageError, match="no gradient"):
            sgd_momentum_step([("p", scalar_param())], {}, OptimState())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(UsageError, match="shape"):
            sgd_momentum_step([("p", scalar_param())],
                              {"p": np.ones((1, 1, 2, 2))}, OptimState())

    def test_float32_params_stay_float32(self):
        p = Tensor(np.zeros((1, 1, 1, 1), np.float32), requires_grad=True)
        state = OptimState()
        sgd_momentum_step([("p", p)],
                          {"p": np.ones((1, 1, 1, 1), np.float32)}, state)
        assert p.dtype == np.float32
        assert state.velocities["p"].dtype == np.float32

    def test_validate(self):
        with pytest.raises(ConfigError):
            OptimState(learning_rate=0.0).validate()
        with pytest.raises(ConfigError):
            OptimState(momentum=1.0).validate()


class TestPlateauSchedule:
    def test_flat_loss_divides_at_epoch_ten(self):
        state = OptimState(learning_rate=8e-3)
        schedule = PlateauSchedule()
        drops = []
        for epoch in range(11):
            drops.append(schedule_update(schedule, 1.0, state))
        assert drops == [False] * 10 + [True]
        assert state.learning_rate == 8e-4
        assert schedule.epochs_since_improvement == 0

    def test_improvement_at_nine_resets_counter(self):
        state = OptimState(learning_rate=8e-3)
        schedule = PlateauSchedule()
        losses = [1.0] * 9 + [0.9] + [0.9] * 10
        for loss in losses[:-1]:
            assert not schedule_update(schedule, loss, state)
        assert state.learning_rate == 8e-3
        assert schedule_update(schedule, losses[-1], state)
        assert state.learning_rate == 8e-4

    def test_strictly_decreasing_losses_never_drop(self):
        state = OptimState(learning_rate=8e-3)
        schedule = PlateauSchedule()
        for loss in np.linspace(1.0, 0.1, 50):
            assert not schedule_update(schedule, float(loss), state)
        assert state.learning_rate == 8e-3

    def test_best_survives_drop(self):
        # equal-to-best losses never reset the counter, so a second drop
        # comes exactly patience epochs after the first
        state = OptimState(learning_rate=8e-3)
        schedule = PlateauSchedule()
        schedule_update(schedule, 0.5, state)
        rates = []
        for _ in range(20):
            schedule_update(schedule, 0.5, state)
            rates.append(state.learning_rate)
        assert rates[9] == 8e-4
        assert rates[19] == 8e-5
        assert schedule.best_loss == 0.5

    def test_lr_sequence_non_increasing(self):
        rng = np.random.default_rng(31)
        state = OptimState(learning_rate=8e-3)
        schedule = PlateauSchedule()
        prev = state.learning_rate
        for _ in range(100):
            schedule_update(schedule, float(rng.uniform(0.2, 0.4)), state)
            assert state.learning_rate <= prev
            prev = state.learning_rate


class TestTrainLoop:
    def test_history_shape_and_determinism(self):
        samples, _ = tiny_samples()
        runs = []
        for _ in range(2):
            model = build_model(tiny_config(), seed=3)
            records = train(model, samples, epochs=3, batch_size=4, seed=7,
                            log_every=0)
            runs.append((records, {n: p.data.copy()
                                   for n, p in model.named_parameters()}))
        rec_a, params_a = runs[0]
        rec_b, params_b = runs[1]
        assert [r.epoch for r in rec_a] == [0, 1, 2]
        assert [r.train_loss for r in rec_a] == [r.train_loss for r in rec_b]
        assert all(r.learning_rate == 8e-3 for r in rec_a)
        assert all(r.seconds >= 0.0 for r in rec_a)
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name])

    def test_training_seed_changes_trajectory(self):
        samples, _ = tiny_samples()
        losses = []
        for seed in (0, 1):
            model = build_model(tiny_config(), seed=3)
            records = train(model, samples, epochs=2, batch_size=4,
                            seed=seed, log_every=0)
            losses.append(records[-1].train_loss)
        assert losses[0] != losses[1]

    def test_start_epoch_resume_matches_uninterrupted(self, tmp_path):
        samples, _ = tiny_samples()
        model_a = build_model(tiny_config(), seed=3)
        optim_a = OptimState()
        sched_a = PlateauSchedule()
        rec_a = train(model_a, samples, epochs=6, batch_size=4, seed=7,
                      optim=optim_a, schedule=sched_a, log_every=0)

        model_b = build_model(tiny_config(), seed=3)
        optim_b = OptimState()
        sched_b = PlateauSchedule()
        rec_b1 = train(model_b, samples, epochs=3, batch_size=4, seed=7,
                       optim=optim_b, schedule=sched_b, log_every=0)
        path = tmp_path / "state.dfnc"
        save_training_state(path, model_b, optim_b, sched_b, next_epoch=3)

        model_c = build_model(tiny_config(), seed=99)  # init to be overwritten
        optim_c, sched_c, start = load_training_state(path, model_c)
        assert start == 3
        rec_b2 = train(model_c, samples, epochs=6, batch_size=4, seed=7,
                       optim=optim_c, schedule=sched_c, start_epoch=start,
                       log_every=0)

        assert ([r.train_loss for r in rec_b1 + rec_b2]
                == [r.train_loss for r in rec_a])
        for (name, pa), (_, pc) in zip(model_a.named_parameters(),
                                       model_c.named_parameters()):
            assert np.array_equal(pa.data, pc.data), name
        assert optim_c.learning_rate == optim_a.learning_rate
        assert sched_c.best_loss == sched_a.best_loss

    def test_single_image_overfit(self):
        spec = SyntheticDatasetSpec(n_train=1, n_test=1, seed=5)
        samples, _ = generate_synthetic(spec)
        model = build_model(DFNetConfig(dtype="float32"), seed=0)
        records = train(model, samples, epochs=200, batch_size=1, seed=0,
                        augment_cfg=NO_AUG,
                        schedule=PlateauSchedule(patience=25), log_every=0)
        losses = [r.train_loss for r in records]
        assert len(losses) == 200
        assert min(losses) < 0.05
        # past the warmup the 20-epoch running mean keeps decreasing
        windows = [np.mean(losses[i:i + 20]) for i in range(80, 181, 10)]
        for earlier, later in zip(windows, windows[1:]):
            assert later <= earlier + 1e-4

    def test_divergence_raises(self):
        samples, _ = tiny_samples(n_train=2)
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(TrainingDiverged):
            train(model, samples, epochs=5, batch_size=2, seed=0,
                  optim=OptimState(learning_rate=1e12), log_every=0)

    def test_unknown_loss_kind(self):
        samples, _ = tiny_samples(n_train=2)
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(ConfigError, match="loss"):
            train(model, samples, epochs=1, loss_kind="dice")

    def test_empty_dataset(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(UsageError):
            train(model, [], epochs=1)

    def test_cross_entropy_loss_kind_trains(self):
        samples, _ = tiny_samples(n_train=4)
        model = build_model(tiny_config(), seed=0)
        records = train(model, samples, epochs=2, batch_size=4, seed=0,
                        loss_kind="cross_entropy", log_every=0)
        assert records[1].train_loss < records[0].train_loss


class TestStatePersistence:
    def test_round_trip(self, tmp_path):
        samples, _ = tiny_samples(n_train=4)
        model = build_model(tiny_config(), seed=3)
        optim = OptimState()
        schedule = PlateauSchedule()
        train(model, samples, epochs=2, batch_size=2, seed=1, optim=optim,
              schedule=schedule, log_every=0)
        path = tmp_path / "state.dfnc"
        save_training_state(path, model, optim, schedule, next_epoch=2)

        other = build_model(tiny_config(), seed=44)
        optim2, schedule2, start = load_training_state(path, other)
        assert start == 2
        assert optim2.learning_rate == optim.learning_rate
        assert optim2.momentum == optim.momentum
        assert schedule2.patience == schedule.patience
        assert schedule2.best_loss == schedule.best_loss
        for name, p in model.named_parameters():
            assert np.array_equal(optim2.velocities[name],
                                  optim.velocities[name])
        for (n, pa), (_, pb) in zip(model.named_parameters(),
                                    other.named_parameters()):
            assert np.array_equal(pa.data, pb.data), n

    def test_missing_velocity_rejected(self, tmp_path):
        from dfnet.checkpoint import load_tensors, save_tensors

        samples, _ = tiny_samples(n_train=2)
        model = build_model(tiny_config(), seed=3)
        path = tmp_path / "state.dfnc"
        save_training_state(path, model, OptimState(), PlateauSchedule(), 0)
        tensors = load_tensors(path)
        victim = next(k for k in tensors if k.startswith("velocity."))
        del tensors[victim]
        save_tensors(path, tensors)
        with pytest.raises(FormatError, match="velocity"):
            load_training_state(path, build_model(tiny_config(), seed=3))

    def test_wrong_architecture_rejected(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        path = tmp_path / "state.dfnc"
        save_training_state(path, model, OptimState(), PlateauSchedule(), 0)
        bigger = build_model(DFNetConfig(dtype="float32"), seed=3)
        with pytest.raises(FormatError):
            load_training_state(path, bigger)


class TestInferenceHelpers:
    def test_predict_maps_batch_split_invariant(self):
        _, test = tiny_samples(n_test=5)
        model = build_model(tiny_config(), seed=3)
        whole = predict_maps(model, test, batch_size=32)
        split = predict_maps(model, test, batch_size=2)
        assert len(whole) == 5
        for a, b in zip(whole, split):
            assert a.shape == (32, 32)
            # float32 accumulation order varies with the batch shape
            assert np.abs(a - b).max() <= 1e-6

    def test_sharpness_values(self):
        assert sharpness([np.zeros((4, 4))]) == 1.0
        assert sharpness([np.ones((4, 4))]) == 1.0
        assert sharpness([np.full((4, 4), 0.5)]) == pytest.approx(1.0 / 255.0)
        mixed = sharpness([np.zeros((4, 4)), np.full((4, 4), 0.5)])
        assert mixed == pytest.approx(0.5 * (1.0 + 1.0 / 255.0))
        with pytest.raises(UsageError):
            sharpness([])

    def test_evaluate_model_report(self):
        train_s, test_s = tiny_samples(n_train=2, n_test=4)
        model = build_model(tiny_config(), seed=3)
        report, sharp = evaluate_model(model, test_s)
        assert report.n_images == 4
        assert 0.0 <= sharp <= 1.0
        assert 0.0 <= report.avg_f <= 1.0


class TestDrivers:
    def test_ablation_rows_and_csv(self):
        train_s, test_s = tiny_samples(n_train=8, n_test=3)
        rows = run_ablation(train_s, test_s,
                            variants=("full", "cross_entropy"), seeds=(0,),
                            base_config=tiny_config(), epochs=2, batch_size=4)
        assert [(r.variant, r.seed) for r in rows] == [("full", 0),
                                                       ("cross_entropy", 0)]
        for r in rows:
            for value in (r.avg_f, r.weighted_f, r.max_f, r.mae, r.sharpness):
                assert math.isfinite(value) and 0.0 <= value <= 1.0
        lines = ablation_csv_lines(rows)
        assert lines[0] == ABLATION_HEADER
        assert len(lines) == 3
        assert lines[1].startswith("full,0,")

    def test_ablation_unknown_variant(self):
        train_s, test_s = tiny_samples(n_train=2, n_test=2)
        with pytest.raises(ConfigError, match="without_mag"):
            run_ablation(train_s, test_s, variants=("no_such_thing",),
                         seeds=(0,), base_config=tiny_config(), epochs=1)

    def test_variant_list_matches_table_rows(self):
        assert ABLATION_VARIANTS == ("full", "without_mag", "without_ami",
                                     "without_mag_ami", "without_cas",
                                     "cross_entropy")

    def test_sweep_rows_and_default_grid(self):
        assert DEFAULT_LAMBDA_GRID == (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0,
                                       2.25, 2.5)
        train_s, test_s = tiny_samples(n_train=4, n_test=2)
        rows = run_lambda_sweep(train_s, test_s, values=(0.5, 2.0), seed=0,
                                base_config=tiny_config(), epochs=1,
                                batch_size=4)
        assert [r.lam for r in rows] == [0.5, 2.0]
        lines = sweep_csv_lines(rows)
        assert lines[0] == SWEEP_HEADER
        assert len(lines) == 3

    def test_sweep_needs_values(self):
        train_s, test_s = tiny_samples(n_train=2, n_test=2)
        with pytest.raises(ConfigError):
            run_lambda_sweep(train_s, test_s, values=(),
                             base_config=tiny_config())


class TestHistoryCSV:
    def test_header_contracts(self):
        assert HISTORY_HEADER == "epoch,train_loss,lr,seconds"
        assert ABLATION_HEADER == "variant,seed,avgF,wF,maxF,MAE,sharpness"
        assert SWEEP_HEADER == "lambda,avgF,wF,maxF,MAE"

    def test_lines_round_trip(self):
        records = [EpochRecord(0, 0.75, 8e-3, 1.25),
                   EpochRecord(1, 0.5, 8e-4, 1.5)]
        lines = history_csv_lines(records)
        assert lines[0] == HISTORY_HEADER
        epoch, loss, lr, seconds = lines[2].split(",")
        assert int(epoch) == 1
        assert float(loss) == 0.5
        assert float(lr) == 8e-4
        assert float(seconds) == 1.5
