import json

import numpy as np
import pytest

from ddlab import data, evaluate, models

TINY = models.ModelConfig(resolution=16, width=16, heads=2, blocks=1, embed_dim=8, mlp_ratio=2)


@pytest.fixture(scope="module")
def enc():
    return models.init_dual_encoder(TINY, 0)


@pytest.fixture(scope="module")
def val():
    return data.make_dataset(160, 16, 0).take_split("val")


@pytest.fixture(scope="module")
def head(enc):
    return evaluate.build_zero_shot_head(enc)


# -- heads ---------------------------------------------------------------------------------
def test_singleton_head_is_the_text_embedding(enc):
    h = evaluate.build_zero_shot_head(enc, ["red circle"], ("a photo of a {}",))
    ref = models.encode_text(enc, data.pad_tokens([data.tokenize("a photo of a red circle")], 16)).data[0]
    np.testing.assert_allclose(h.matrix[0], ref, rtol=0, atol=1e-12)


def test_duplicate_templates_do_not_change_head(enc):
    a = evaluate.build_zero_shot_head(enc, templates=("a photo of a {}",))
    b = evaluate.build_zero_shot_head(enc, templates=("a photo of a {}",) * 3)
    np.testing.assert_allclose(a.matrix, b.matrix, rtol=0, atol=1e-12)


def test_head_rows_unit_and_class_count(head):
    assert head.matrix.shape == (16, TINY.embed_dim)
    np.testing.assert_allclose(np.linalg.norm(head.matrix, axis=1), 1.0, atol=1e-12)
    assert head.class_names[0] == "red circle"


def test_head_errors(enc):
    with pytest.raises(ValueError):
        evaluate.build_zero_shot_head(enc, templates=())
    with pytest.raises(data.TokenizeError):
        evaluate.build_zero_shot_head(enc, ["purple hexagon"])


def test_classify_orthonormal_head():
    h = evaluate.ZeroShotHead(["a", "b", "c"], ("{}",), np.eye(3))
    labels, logits = evaluate.classify(h, np.array([[0.0, 0.0, 1.0]]))
    assert labels[0] == 2 and logits[0, 2] == 1.0


def test_classify_head_row_and_ties(head):
    labels, logits = evaluate.classify(head, head.matrix[[5, 11]])
    assert list(labels) == [5, 11]
    tie = evaluate.ZeroShotHead(["a", "b"], ("{}",), np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert evaluate.classify(tie, np.array([[1.0, 0.0]]))[0][0] == 0


def test_classify_range_and_equivariance(enc, head, val):
    emb = models.encode_image(enc, val.images).data
    _, logits = evaluate.classify(head, emb)
    assert logits.min() >= -1 - 1e-12 and logits.max() <= 1 + 1e-12
    perm = np.random.default_rng(0).permutation(16)
    h2 = evaluate.ZeroShotHead([head.class_names[i] for i in perm], head.templates, head.matrix[perm])
    np.testing.assert_array_equal(evaluate.classify(h2, emb)[1], logits[:, perm])
    with pytest.raises(ValueError):
        evaluate.classify(head, np.zeros((1, 3)))


def test_subset_rows():
    a = evaluate.subset_rows(100, 10, 3)
    assert np.array_equal(a, evaluate.subset_rows(100, 10, 3)) and np.all(np.diff(a) > 0)
    assert not np.array_equal(a, evaluate.subset_rows(100, 10, 4))
    assert np.array_equal(evaluate.subset_rows(5, None, 0), np.arange(5))
    with pytest.raises(ValueError):
        evaluate.subset_rows(5, 6, 0)


# -- zero-shot robustness -------------------------------------------------------------------------
def test_eps_zero_robust_equals_clean(trained_tiny):
    enc, head, val = trained_tiny
    r = evaluate.eval_robust_accuracy(enc, head, val, eps=0.0, steps=4)
    assert r.get("robust_accuracy") == r.get("clean_accuracy") > 0.4


def test_robust_at_most_clean_and_in_range(trained_tiny):
    enc, head, val = trained_tiny
    r = evaluate.eval_robust_accuracy(enc, head, val, eps=8 / 255, steps=4, count=24, seed=1)
    clean, rob = r.get("clean_accuracy"), r.get("robust_accuracy")
    assert 0 <= rob < clean <= 1
    assert r.sample_count["zero_shot"] == 24
    (detail,) = r.details.values()
    assert sum(detail["broken_by_stage"]) == 24 and len(detail["rows"]) == 24
    # column 0 counts samples no stage broke: misclassified ones plus the robust ones
    assert detail["broken_by_stage"][0] == round(24 * (1 - clean)) + round(24 * rob)


def test_adding_a_stage_never_raises_robust_accuracy(trained_tiny):
    enc, head, val = trained_tiny
    accs = [evaluate.eval_robust_accuracy(enc, head, val, 2 / 255, steps=4, kinds=k).get("robust_accuracy")
            for k in (("fgsm",), ("fgsm", "ce"), ("fgsm", "ce", "dlr"))]
    assert accs[0] >= accs[1] >= accs[2]
    assert accs[0] > accs[2]


def test_more_steps_not_more_robust_on_fixed_instance(trained_tiny):
    # not a theorem for APGD (different step counts give different schedules);
    # checked on this fixed instance
    enc, head, val = trained_tiny
    accs = [evaluate.eval_robust_accuracy(enc, head, val, 2 / 255, steps=k).get("robust_accuracy")
            for k in (2, 5, 10)]
    assert accs[0] >= accs[1] >= accs[2]


def test_zero_shot_report_is_deterministic(trained_tiny):
    enc, head, val = trained_tiny
    a = evaluate.eval_robust_accuracy(enc, head, val, 4 / 255, steps=3, count=8, seed=2)
    b = evaluate.eval_robust_accuracy(enc, head, val, 4 / 255, steps=3, count=8, seed=2)
    assert a.rows == b.rows and a.details == b.details


# -- captioner metrics ----------------------------------------------------------------------------
def test_token_accuracy():
    assert evaluate.token_accuracy([5, 6], [5, 6]) == 1.0
    assert evaluate.token_accuracy([5, 7], [5, 6]) == pytest.approx(2 / 3)
    assert evaluate.token_accuracy([], [5, 6]) == 0.0
    assert evaluate.token_accuracy([5, 6, 7], [5, 6]) == pytest.approx(2 / 3)


@pytest.fixture(scope="module")
def cap():
    return models.init_captioner(TINY, 0)


def test_caption_eps_zero(enc, cap, val):
    r = evaluate.eval_caption_robustness(cap, enc, val, eps=0.0, steps=2, count=4)
    clean = r.get("caption_token_accuracy", attack="none")
    assert r.get("caption_token_accuracy", attack="apgd-nll") == clean
    assert r.get("caption_degradation") == 0.0 and 0 <= clean <= 1


def test_caption_attack_rates_in_range(enc, cap, val):
    r = evaluate.eval_caption_robustness(cap, enc, val, eps=8 / 255, steps=2, count=4)
    for row in r.rows:
        assert -1 <= row["value"] <= 1


def test_targeted_eps_zero_gives_zero_asr(enc, cap, val):
    r = evaluate.eval_targeted_asr(cap, enc, val, targets=("vaccines are dangerous", "sell stocks now"),
                                   eps=0.0, steps=2, per_target=3)
    assert r.get("asr_mean") == 0.0
    assert set(r.details["targeted/0/255"]) == {"vaccines are dangerous", "sell stocks now"}
    assert r.sample_count["targeted"] == 6


def test_targeted_rejects_unknown_words(enc, cap, val):
    with pytest.raises(data.TokenizeError):
        evaluate.eval_targeted_asr(cap, enc, val, targets=("buy bitcoin",), eps=0.0, steps=2, per_target=1)


def test_default_targets_are_expressible_answers():
    answers = {data.answer_text(s, "describe the image") for s in data.make_dataset(400, 16, 0).specs()}
    assert len(evaluate.DEFAULT_TARGETS) == len(set(evaluate.DEFAULT_TARGETS)) == 6
    for t in evaluate.DEFAULT_TARGETS:
        data.tokenize(t)
        assert t in answers, t


def test_targeted_rows_skip_samples_already_answering_the_target(trained_tiny):
    enc, _, val = trained_tiny
    cap = models.init_captioner(enc.config, 0)
    spec = val.specs()[0]
    target = data.answer_text(spec, "describe the image")
    same = [i for i, s in enumerate(val.specs()) if data.answer_text(s, "describe the image") == target]
    r = evaluate.eval_targeted_asr(cap, enc, val, targets=(target,), eps=0.0, steps=2,
                                   per_target=len(val) - len(same))
    rows = r.details["targeted/0/255"][target]["rows"]
    assert sorted(rows) == sorted(set(range(len(val))) - set(same))


# -- report object --------------------------------------------------------------------------------
def test_report_round_trip_and_csv():
    r = evaluate.EvalReport(model="m", seed=3)
    r.add("clean_accuracy", 0.5)
    r.add("robust_accuracy", 0.25, attack="apgd-ce", epsilon=4 / 255, steps=20)
    r.details["x"] = {"a": [1, 2]}
    back = evaluate.EvalReport.from_json(r.to_json())
    assert back.rows == r.rows and back.details == r.details and back.model == "m"
    lines = r.to_csv().splitlines()
    assert lines[0] == "metric,attack,epsilon,steps,value,seed"
    assert lines[2].split(",")[:2] == ["robust_accuracy", "apgd-ce"]
    assert float(lines[2].split(",")[2]) == 4 / 255
    assert json.loads(r.to_json())["seed"] == 3
    with pytest.raises(KeyError):
        r.get("asr_mean")
    assert r.get("robust_accuracy", epsilon=4 / 255) == 0.25


def test_report_merge():
    a, b = evaluate.EvalReport(seed=1), evaluate.EvalReport(seed=1)
    a.add("clean_accuracy", 1.0)
    b.add("asr_mean", 0.0)
    b.sample_count["targeted"] = 5
    a.merge(b)
    assert [r["metric"] for r in a.rows] == ["clean_accuracy", "asr_mean"] and a.sample_count == {"targeted": 5}
