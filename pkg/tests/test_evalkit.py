import random

import numpy as np
import pytest

from protocode import evalkit as ev
from protocode import protolearn as pl
from protocode.synth import synth_corpus

from .reference import (
    ref_average_precision,
    ref_precision_at_recall,
    ref_roc_auc,
    ref_top2_pca,
)


# --- metrics ---------------------------------------------------------------------

def test_perfect_ranking_metrics():
    scores = [0.9, 0.8, 0.2, 0.1]
    labels = [1, 1, 0, 0]
    assert ev.average_precision(scores, labels) == 1.0
    assert ev.precision_at_recall(scores, labels, 0.5) == 1.0
    assert ev.roc_auc(scores, labels) == 1.0


def test_average_precision_worked_example():
    got = ev.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    assert abs(got - (1.0 + 2 / 3) / 2) < 1e-9
    assert abs(got - 0.833333) < 1e-6


def test_precision_at_recall_worked_examples():
    scores, labels = [0.9, 0.8, 0.7], [1, 0, 1]
    assert ev.precision_at_recall(scores, labels, 0.5) == 1.0
    assert abs(ev.precision_at_recall(scores, labels, 1.0) - 2 / 3) < 1e-9


def test_roc_auc_all_ties_is_half():
    assert ev.roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_metric_error_conditions():
    with pytest.raises(ev.NoPositives):
        ev.average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(ev.NoPositives):
        ev.precision_at_recall([0.1], [0], 0.5)
    with pytest.raises(ev.OneClassOnly):
        ev.roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        ev.precision_at_recall([0.1], [1], 0.0)


def test_metrics_match_quadratic_oracles():
    rng = random.Random(0)
    for trial in range(300):
        n = rng.randrange(2, 60)
        # coarse scores force plenty of ties
        scores = [round(rng.random(), 2) for _ in range(n)]
        labels = [rng.randrange(2) for _ in range(n)]
        if sum(labels) == 0:
            labels[rng.randrange(n)] = 1
        assert abs(ev.average_precision(scores, labels)
                   - ref_average_precision(scores, labels)) < 1e-9
        r = rng.choice([0.25, 0.5, 0.75, 1.0])
        assert abs(ev.precision_at_recall(scores, labels, r)
                   - ref_precision_at_recall(scores, labels, r)) < 1e-9
        if 0 < sum(labels) < n:
            assert abs(ev.roc_auc(scores, labels)
                       - ref_roc_auc(scores, labels)) < 1e-9


def test_roc_auc_invariant_under_monotone_transforms():
    rng = random.Random(1)
    scores = [rng.random() for _ in range(40)]
    labels = [rng.randrange(2) for _ in range(40)]
    labels[0], labels[1] = 1, 0
    base = ev.roc_auc(scores, labels)
    for fn in (lambda s: 3 * s + 1, lambda s: s**3, np.tanh):
        assert abs(ev.roc_auc([fn(s) for s in scores], labels) - base) < 1e-9


# --- splits -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(seed=20, num_questions=8, students_per_question=30)


def test_held_out_rubric_fraction(corpus):
    items = {rec.rubric_item_id for rec in corpus.records}
    plan = ev.make_split(corpus, "held_out_rubric", 0.1, seed=0)
    held_items = {
        rec.rubric_item_id
        for rec in corpus.records
        if ev.rubric_task_id(rec.rubric_option_id) in set(plan.test_ids)
    }
    assert len(held_items) == max(1, int(len(items) * 0.1 + 0.5))
    ev.assert_no_leak(plan, corpus)


def test_held_out_question_and_exam_grouping(corpus):
    for mode, key in (
        ("held_out_question", lambda r: r.question_id),
        ("held_out_exam", lambda r: r.exam_id),
    ):
        plan = ev.make_split(corpus, mode, 0.2, seed=3)
        test = set(plan.test_ids)
        sides = {}
        for rec in corpus.records:
            side = ev.rubric_task_id(rec.rubric_option_id) in test
            assert sides.setdefault(key(rec), side) == side
        ev.assert_no_leak(plan, corpus)


def test_single_exam_raises():
    ds = synth_corpus(seed=21, num_questions=2, students_per_question=10)
    for rec in ds.records:
        object.__setattr__(rec, "exam_id", "exam0")
    with pytest.raises(ev.TooFewUnits):
        ev.make_split(ds, "held_out_exam", 0.5, seed=0)


def test_split_deterministic(corpus):
    a = ev.make_split(corpus, "held_out_question", 0.25, seed=9)
    b = ev.make_split(corpus, "held_out_question", 0.25, seed=9)
    assert a == b
    c = ev.make_split(corpus, "held_out_question", 0.25, seed=10)
    assert c.test_ids != a.test_ids or c.train_ids != a.train_ids


def test_split_ids_disjoint_and_cover(corpus):
    plan = ev.make_split(corpus, "held_out_rubric", 0.2, seed=4)
    train, test = set(plan.train_ids), set(plan.test_ids)
    assert not train & test
    every = {ev.rubric_task_id(r.rubric_option_id) for r in corpus.records}
    assert train | test == every


def test_split_plan_round_trip(corpus, tmp_path):
    plan = ev.make_split(corpus, "held_out_exam", 0.5, seed=5)
    path = tmp_path / "plan.json"
    plan.save(path)
    assert ev.SplitPlan.load(path) == plan


# --- meta-test evaluation -------------------------------------------------------------

def _trained(tiny_world, fusion="none", epochs=6, seed=0, tasks=None):
    cfg = tiny_world.encoder_config(fusion=fusion)
    loss_cfg = tiny_world.loss_config()
    codec = tiny_world.codec()
    train_cfg = pl.TrainConfig(epochs=epochs, k=3, q=3, seed=seed, peak_lr=2e-3)
    params, _ = pl.train_meta(tasks or tiny_world.tasks, cfg, loss_cfg, codec, train_cfg)
    return params, cfg, loss_cfg, codec


def test_eval_report_deterministic_and_pure(tiny_world):
    params, cfg, loss_cfg, codec = _trained(tiny_world, epochs=2)
    tasks = tiny_world.tasks[:4]
    before = {n: p.data.copy() for n, p in params.items()}
    a = ev.eval_meta_test(params, cfg, loss_cfg, codec, tasks, 3, 3, seeds=[0, 1])
    b = ev.eval_meta_test(params, cfg, loss_cfg, codec, tasks, 3, 3, seeds=[0, 1])
    assert a.per_task == b.per_task
    assert a.aggregate() == b.aggregate()
    for name, data in before.items():
        assert np.array_equal(data, params[name].data)
    for task_id, metrics in a.per_task.items():
        for m, (mean, std) in metrics.items():
            assert 0.0 <= mean <= 1.0 and std >= 0.0


def test_eval_separated_task_gets_perfect_ap(tiny_world):
    # train long enough that at least one task separates cleanly
    params, cfg, loss_cfg, codec = _trained(tiny_world, epochs=12, seed=3)
    report = ev.eval_meta_test(params, cfg, loss_cfg, codec,
                               tiny_world.tasks, 3, 3, seeds=[0, 1, 2])
    best = max(mean for m in report.per_task.values() for (mean, _) in [m["ap"]])
    assert best == 1.0


def test_eval_report_rendering(tiny_world):
    params, cfg, loss_cfg, codec = _trained(tiny_world, epochs=1)
    report = ev.eval_meta_test(params, cfg, loss_cfg, codec,
                               tiny_world.tasks[:3], 3, 3, seeds=[0, 1])
    text = report.to_text()
    assert "aggregate ap:" in text
    tsv = report.to_tsv()
    assert tsv.splitlines()[0].startswith("task\tap_mean")
    assert tsv.strip().splitlines()[-1].startswith("AGGREGATE")


def test_support_shot_truncation_is_nested(tiny_world):
    task = tiny_world.tasks[0]
    from protocode.taskforge import sample_episode
    episode = sample_episode(task, 3, 3, seed=0)
    cut = ev._truncate_support(episode, 2)
    assert len(cut.support) == 4
    assert cut.support == [
        pair for pair in episode.support
        if pair in cut.support
    ]
    assert cut.query == episode.query


# --- supervised baseline -----------------------------------------------------------------

def test_baseline_memorizes_duplicated_support(tiny_world):
    from protocode.lexnorm import lex_normalize
    from protocode.taskforge import Task
    pos = [lex_normalize("x = 1\n")] * 8
    neg = [lex_normalize("y = 2 + 2\n")] * 8
    task = Task("toy", "rubric_option", ("absent", "present"), {0: neg, 1: pos})
    cfg = tiny_world.encoder_config()
    metrics = ev.supervised_baseline(task, 3, 3, cfg, tiny_world.loss_config(),
                                     tiny_world.codec(), steps=25, seed=0, lr=3e-3)
    assert metrics["train_accuracy"] == 1.0
    assert metrics["ap"] == 1.0


def test_baseline_deterministic(tiny_world):
    task = tiny_world.tasks[0]
    cfg = tiny_world.encoder_config()
    kw = dict(steps=5, seed=4, lr=1e-3)
    a = ev.supervised_baseline(task, 3, 3, cfg, tiny_world.loss_config(),
                               tiny_world.codec(), **kw)
    b = ev.supervised_baseline(task, 3, 3, cfg, tiny_world.loss_config(),
                               tiny_world.codec(), **kw)
    assert a == b


# --- PCA -------------------------------------------------------------------------------

def test_pca_collinear_flags_second_component():
    base = np.array([1.0, 2.0, 3.0])
    vectors = np.stack([t * base for t in np.linspace(-2, 2, 9)])
    result = ev.pca_2d(vectors)
    assert result.second_degenerate
    assert result.explained[1] <= 1e-10
    assert abs(result.coords[:, 1]).max() < 1e-8


def test_pca_zero_variance_raises():
    with pytest.raises(ev.DegenerateCovariance):
        ev.pca_2d(np.ones((5, 3)))


def test_pca_components_orthogonal_and_match_eigh():
    rng = np.random.default_rng(6)
    for d in (3, 5, 8):
        x = rng.normal(size=(40, d)) @ rng.normal(size=(d, d))
        result = ev.pca_2d(x)
        ref_vals, _ = ref_top2_pca(x)
        assert np.allclose(result.explained, ref_vals, rtol=1e-6, atol=1e-8)
        centered = x - x.mean(axis=0)
        recon = result.coords
        # projections reproduce the same variance as the eig decomposition
        assert np.allclose(recon.var(axis=0, ddof=1), ref_vals, rtol=1e-6, atol=1e-8)


def test_export_embeddings_file_format(tiny_world, tmp_path):
    params, cfg, loss_cfg, codec = _trained(tiny_world, epochs=1)
    path = tmp_path / "emb.tsv"
    result = ev.export_embeddings(params, cfg, codec, tiny_world.dataset, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == len(tiny_world.dataset.programs())
    first = lines[0].split("\t")
    assert first[0] == "p000000" and len(first) == 3
    float(first[1]), float(first[2])
    assert result.coords.shape[1] == 2
