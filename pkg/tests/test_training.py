import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtsda import training as Tr
from dtsda.autodiff import NonFiniteError
from dtsda.data import DataError, make_synth_spec, prepare_task, synthesize_dataset

TINY_ARCH = dict(conv_channels=(3, 4), kernel=3, bottleneck=6, hidden=5)


def tiny_task(seed=0, C=2, T=2):
    spec = make_synth_spec(
        num_classes=C, num_states=T, num_channels=2, seed=seed, mixing_shift=0.3,
        segments_per_activity=2, dwell_min=2, dwell_max=3, window_len=8,
    )
    sd = synthesize_dataset(spec)
    return prepare_task(sd.source, sd.target, seed=seed)


def tiny_config(**kw):
    base = dict(num_states=2, epochs=2, batch_size=8, seed=0, **TINY_ARCH)
    base.update(kw)
    return Tr.TrainConfig(**base)


# ------------------------------------------------------------- lambda schedule


def test_lambda_endpoints():
    assert Tr.lambda_schedule(0.0) == 0.0
    assert Tr.lambda_schedule(1.0, 2.0) == pytest.approx(2 * (2 / (1 + math.exp(-10)) - 1), rel=1e-15)
    assert Tr.lambda_schedule(1.0) == pytest.approx(0.99991, abs=5e-6)
    for p in (-0.01, 1.01):
        with pytest.raises(ValueError):
            Tr.lambda_schedule(p)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5))
def test_lambda_monotone_and_bounded(p, q, lmax):
    lo, hi = sorted((p, q))
    assert Tr.lambda_schedule(lo, lmax) <= Tr.lambda_schedule(hi, lmax)
    assert 0 <= Tr.lambda_schedule(hi, lmax) <= lmax


# ------------------------------------------------------------- batching


@given(st.integers(1, 300), st.integers(2, 70), st.integers(0, 100))
def test_minibatches_partition(n, bs, seed):
    batches = Tr.minibatches(n, bs, np.random.default_rng(seed))
    allidx = np.concatenate(batches)
    assert sorted(allidx.tolist()) == list(range(n))
    if n >= 2:
        assert min(len(b) for b in batches) >= 2
    assert max(len(b) for b in batches) <= bs + 1


# ------------------------------------------------------------- config


@pytest.mark.parametrize(
    "bad", [dict(num_states=0), dict(gamma=-1), dict(epochs=-1), dict(batch_size=1), dict(learning_rate=0),
            dict(lambda_max=-0.1)]
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        Tr.TrainConfig(**bad)


def test_config_from_mapping():
    cfg = Tr.config_from_mapping(
        {"num_states": "4", "gamma": "0.5", "update_extractor_in_phases_2_3": "true", "conv_channels": "8,16",
         "data": "ignored"}
    )
    assert cfg.num_states == 4 and cfg.gamma == 0.5 and cfg.update_extractor_in_phases_2_3
    assert cfg.conv_channels == (8, 16)


# ------------------------------------------------------------- initialize


def test_initialize_sets_ts_zero_and_pseudo_equals_class():
    task = tiny_task()
    task.dataset.ts[:] = 1
    tr = Tr.initialize(task, tiny_config())
    ds = tr.dataset
    assert np.all(ds.ts == 0)
    assert np.array_equal(ds.pseudo_labels(), ds.labels)
    C = ds.num_classes
    assert ds.pseudo_labels().min() >= 0 and ds.pseudo_labels().max() <= 2 * C - 1


def test_initialize_same_seed_same_parameters():
    a = Tr.initialize(tiny_task(), tiny_config()).model.named_tensors()
    b = Tr.initialize(tiny_task(), tiny_config()).model.named_tensors()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_class_count_mismatch_rejected():
    a = synthesize_dataset(make_synth_spec(num_classes=2, num_channels=2, segments_per_activity=1, window_len=8))
    b = synthesize_dataset(make_synth_spec(num_classes=3, num_channels=2, segments_per_activity=1, window_len=8))
    with pytest.raises(DataError, match="class count"):
        prepare_task(a.source, b.target, seed=0)


# ------------------------------------------------------------- epochs and fit


def test_fit_zero_epochs_returns_initial_model():
    task = tiny_task()
    init = Tr.initialize(tiny_task(), tiny_config(epochs=0)).model.named_tensors()
    model, log = Tr.fit(task, tiny_config(epochs=0))
    assert log == []
    assert all(np.array_equal(init[k], v) for k, v in model.named_tensors().items())


def test_fit_log_rows_and_determinism(tmp_path):
    m1, log1 = Tr.fit(tiny_task(), tiny_config(epochs=3))
    m2, log2 = Tr.fit(tiny_task(), tiny_config(epochs=3))
    assert len(log1) == 3
    for st_ in log1:
        assert all(math.isfinite(v) for k, v in st_.row().items())
        assert 0.0 <= st_.ts_change_fraction <= 1.0
        assert st_.source_windows > 0 and st_.target_windows > 0
    lams = [s.lam for s in log1]
    assert lams == sorted(lams) and lams[0] == 0.0
    assert [s.loss_f for s in log1] == [s.loss_f for s in log2]
    a, b = m1.named_tensors(), m2.named_tensors()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    Tr.write_training_log(log1, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lambda,L_f,L_t,L_c,ts_change_fraction,wall_seconds"
    assert len(lines) == 4
    assert float(lines[1].split(",")[2]) == log1[0].loss_f


def test_frozen_extractor_only_moves_in_phase_one():
    task = tiny_task()
    tr = Tr.initialize(task, tiny_config())
    fe_params = tr.model.feature_extractor.parameters()
    assert fe_params[0] not in tr.phase_params("temporal")
    assert fe_params[0] not in tr.phase_params("cross")
    assert fe_params[0] in tr.phase_params("fine")
    tr2 = Tr.initialize(task, tiny_config(update_extractor_in_phases_2_3=True))
    assert tr2.model.feature_extractor.parameters()[0] in tr2.phase_params("cross")
    Tr.train_epoch(tr2)  # the unfrozen path runs


def test_single_state_never_changes():
    task = tiny_task()
    tr = Tr.initialize(task, tiny_config(num_states=1))
    for _ in range(2):
        st_ = Tr.train_epoch(tr)
        assert st_.ts_change_fraction == 0.0
        assert np.array_equal(tr.dataset.pseudo_labels(), tr.dataset.labels)


def test_ts_changes_only_at_relabel(monkeypatch):
    task = tiny_task()
    tr = Tr.initialize(task, tiny_config())
    seen = []
    orig = Tr.fine_grained_loss

    def spy(model, x, yhat, d):
        seen.append(tr.dataset.ts.copy())
        return orig(model, x, yhat, d)

    monkeypatch.setattr(Tr, "fine_grained_loss", spy)
    Tr.train_epoch(tr)
    assert all(np.array_equal(s, seen[0]) for s in seen)
    assert np.all(seen[0] == 0)  # epoch 0 phase 1 sees the initial labels


def test_non_finite_loss_aborts_with_snapshot(monkeypatch):
    task = tiny_task()
    tr = Tr.initialize(task, tiny_config())

    def boom(*a, **k):
        raise NonFiniteError("loss is nan")

    monkeypatch.setattr(Tr, "temporal_component_loss", boom)
    with pytest.raises(Tr.TrainingError) as info:
        Tr.train_epoch(tr)
    assert info.value.snapshot["phase"] == "temporal"
    assert info.value.snapshot["epoch"] == 0
