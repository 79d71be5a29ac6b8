import csv
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtsda import evaluation as E
from dtsda.data import make_synth_spec, prepare_task, synthesize_dataset, synthesize_users
from dtsda.networks import predict_target
from dtsda.training import TrainConfig

TINY_ARCH = dict(conv_channels=(3, 4), kernel=3, bottleneck=6, hidden=5)


def tiny_cfg(**kw):
    base = dict(num_states=2, epochs=2, batch_size=16, seed=0, **TINY_ARCH)
    base.update(kw)
    return TrainConfig(**base)


def tiny_spec(**kw):
    base = dict(num_classes=2, num_states=2, num_channels=2, segments_per_activity=3, dwell_min=2, dwell_max=3,
                window_len=8, seed=0)
    base.update(kw)
    return make_synth_spec(**base)


# ------------------------------------------------------------- metrics


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1])
    ev = E.evaluate(y, y, 3)
    assert ev.accuracy == 1.0
    assert np.array_equal(ev.confusion.counts, np.diag([1, 2, 2]))


def test_all_zero_predictions_balanced_truth():
    ev = E.evaluate(np.zeros(6, int), np.array([0, 1] * 3), 2)
    assert ev.accuracy == 0.5
    assert ev.recall.tolist() == [1.0, 0.0]


def test_confusion_matches_hand_tally():
    rng = np.random.default_rng(0)
    truth, pred = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    tally = [[0] * 4 for _ in range(4)]
    for t, p in zip(truth, pred):
        tally[t][p] += 1
    ev = E.evaluate(pred, truth, 4)
    assert ev.confusion.counts.tolist() == tally
    assert ev.accuracy == sum(tally[i][i] for i in range(4)) / 200


@pytest.mark.parametrize(
    "pred,truth", [([0, 1], [0]), ([], []), ([0, 2], [0, 1]), ([0, -1], [0, 1]), ([0, 1], [0, 5])]
)
def test_evaluate_errors(pred, truth):
    with pytest.raises(ValueError):
        E.evaluate(np.array(pred, int), np.array(truth, int), 2)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    truth, pred = (np.array(v) for v in zip(*pairs))
    ev = E.evaluate(pred, truth, 5)
    cm = ev.confusion.counts
    assert (cm >= 0).all()
    assert np.array_equal(cm.sum(axis=1), np.bincount(truth, minlength=5))
    assert ev.accuracy == np.trace(cm) / cm.sum()


def test_experiment_result_rejects_bad_accuracy():
    cm = E.ConfusionMatrix(np.eye(2, dtype=int))
    with pytest.raises(ValueError):
        E.ExperimentResult("a->b", "dtsda", 1.5, np.ones(2), cm, 0)


# ------------------------------------------------------------- baselines


def _task(seed=0, **kw):
    sd = synthesize_dataset(tiny_spec(seed=seed, **kw))
    return prepare_task(sd.source, sd.target, seed=seed)


def test_dann_with_zero_lambda_equals_source_only():
    task = _task(mixing_shift=0.5)
    cfg = tiny_cfg(lambda_max=0.0, epochs=3)
    so, _ = E.train_baseline(task, cfg, adversarial=False)
    dann, _ = E.train_baseline(task, cfg, adversarial=True)
    x = task.dataset.data[task.dataset.domain == 1]
    assert np.array_equal(predict_target(so, x), predict_target(dann, x))
    shared = [p.name for p in E._baseline_params(so, adversarial=False)]
    a, b = so.named_tensors(), dann.named_tensors()
    assert all(a[k].tobytes() == b[k].tobytes() for k in shared)


def test_baselines_deterministic():
    task = _task(mixing_shift=0.5)
    for method in ("source_only", "dann"):
        r1 = E._run(method, task, tiny_cfg(), "a->b")
        r2 = E._run(method, task, tiny_cfg(), "a->b")
        assert r1.accuracy == r2.accuracy
        assert np.array_equal(r1.confusion.counts, r2.confusion.counts)


def test_source_only_on_identical_users():
    # no user shift: the target is another draw from the source distribution
    task = _task(separation=3.0, segments_per_activity=6)
    r = E.baseline_source_only(task, tiny_cfg(epochs=30, conv_channels=(8, 8), bottleneck=16))
    assert r.accuracy >= 0.95


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        E._run("coral", _task(), tiny_cfg(), "a->b")


# ------------------------------------------------------------- experiment runner and reports


@pytest.fixture(scope="module")
def three_user_results():
    users = synthesize_users(tiny_spec(num_users=3, mixing_shift=0.3))
    data = {k: v.dataset for k, v in users.items()}
    return data, E.run_experiment(data, tiny_cfg(epochs=1), ("source_only", "dann"))


def test_three_users_give_six_tasks_per_method(three_user_results):
    _, results = three_user_results
    for m in ("source_only", "dann"):
        tasks = [r.task for r in results if r.method == m]
        assert len(tasks) == 6 and len(set(tasks)) == 6
    # seeds derive from the task index; methods on a task share seed and prepared data
    by_task = {}
    for r in results:
        by_task.setdefault(r.task, set()).add((r.seed, r.dataset_hash))
    assert all(len(v) == 1 for v in by_task.values())
    assert sorted(next(iter(v))[0] for v in by_task.values()) == list(range(6))


def test_summary_recomputes_from_results(tmp_path, three_user_results):
    _, results = three_user_results
    E.emit_reports(results, tmp_path)
    with open(tmp_path / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(tmp_path / "summary.csv", newline="") as fh:
        summary = {r["method"]: r for r in csv.DictReader(fh)}
    for m, s in summary.items():
        acc = np.array([float(r["accuracy"]) for r in rows if r["method"] == m])
        assert abs(float(s["mean_accuracy"]) - acc.mean()) <= 1e-12
        assert abs(float(s["std_accuracy"]) - acc.std()) <= 1e-12


def test_reports_round_trip(tmp_path, three_user_results):
    _, results = three_user_results
    E.emit_reports(results, tmp_path, heatmaps=True)
    back = E.read_results(tmp_path)
    assert len(back) == len(results)
    for a, b in zip(results, back):
        assert (a.task, a.method, a.seed, a.accuracy, a.dataset_hash) == (b.task, b.method, b.seed, b.accuracy, b.dataset_hash)
        assert np.array_equal(a.recall, b.recall)
        assert np.array_equal(a.confusion.counts, b.confusion.counts)
        assert a.confusion.class_names == b.confusion.class_names
    svg = (tmp_path / f"confusion_{results[0].task_slug}_{results[0].method}.svg").read_text()
    assert len(re.findall(r"<rect ", svg)) == 2 * 2


def test_rerun_is_byte_identical(tmp_path, three_user_results):
    data, results = three_user_results
    again = E.run_experiment(data, tiny_cfg(epochs=1), ("source_only", "dann"))
    E.emit_reports(results, tmp_path / "a")
    E.emit_reports(again, tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_empty_results_write_nothing(tmp_path):
    with pytest.raises(ValueError, match="no results"):
        E.emit_reports([], tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_svg_rect_count():
    cm = E.ConfusionMatrix(np.arange(25).reshape(5, 5))
    assert E.confusion_svg(cm).count("<rect ") == 25


def test_color_ramp_endpoints():
    assert E._color(0.0) == "#ffffff"
    assert E._color(1.0) == "#08306b"


def test_run_experiment_checks_inputs(three_user_results):
    data, _ = three_user_results
    with pytest.raises(ValueError, match="unknown method"):
        E.run_experiment(data, tiny_cfg(epochs=1), ("dtsda", "sa"))
    with pytest.raises(KeyError):
        E.run_experiment(data, tiny_cfg(epochs=1), ("dtsda",), users=["U1", "U9"])


def test_dtsda_method_runs():
    r = E.run_dtsda(_task(mixing_shift=0.3), tiny_cfg(epochs=1))
    assert 0.0 <= r.accuracy <= 1.0 and r.method == "dtsda"
    assert r.confusion.counts.sum() == len(_task(mixing_shift=0.3).target_true_labels)
