import math

import numpy as np
import pytest

from memseg.errors import DimensionError, EmptyInputError, UndefinedMetricError
from memseg.metrics import (
    acc_per_class,
    ImageScore,
    aggregate,
    average_precision,
    binary_map_score,
    confusion,
    emit_report,
    iou_per_class,
    macc,
    map_score,
    miou,
    recall,
    report_rows,
    score_image,
)
from memseg.raster import MaskMap, ProbMap

import oracles


def mask(rows):
    return MaskMap(np.array(rows))


def test_confusion_examples():
    gt = mask([[1, 1], [1, 1]])
    c = confusion(mask([[1, 1], [1, 0]]), gt)
    assert (c.tp[1], c.fn[1], c.fp[0]) == (3, 1, 1)
    same = confusion(gt, gt)
    assert not same.fp.any() and not same.fn.any()
    disjoint = confusion(mask([[0, 0], [0, 0]]), gt)
    assert disjoint.tp[1] == 0


def test_confusion_shape_mismatch():
    with pytest.raises(DimensionError):
        confusion(mask([[0, 1]]), mask([[0], [1]]))


def test_iou_examples():
    gt = mask([[1, 1, 1, 1]])
    assert iou_per_class(confusion(gt, gt))[1] == 1.0
    half = confusion(mask([[1, 1, 0, 0]]), gt)  # TP=2, FP=0, FN=2
    assert iou_per_class(half)[1] == 0.5
    assert iou_per_class(confusion(mask([[0, 0, 0, 0]]), gt))[1] == 0.0


def test_miou_examples():
    c = confusion(mask([[1, 1, 0, 0]]), mask([[1, 1, 1, 1]]))
    assert miou(c, [1]) == 0.5
    assert miou(confusion(mask([[1, 0]]), mask([[1, 2]])), [1, 2]) == 0.5
    # class 3 absent from both masks: same mean with or without it
    c3 = confusion(mask([[1, 0]]), mask([[1, 2]]), n_classes=4)
    assert miou(c3, [1, 2, 3]) == 0.5
    with pytest.raises(UndefinedMetricError):
        miou(c3, [3])


def test_accuracy_examples():
    gt = mask([[1, 1, 1, 1, 0]])
    assert macc(confusion(gt, gt)) == 1.0
    c = confusion(mask([[1, 1, 1, 0, 0]]), gt)
    assert c.tp[1] / c.gt_size[1] == 0.75
    # class 2 predicted but absent from ground truth: ignored
    c2 = confusion(mask([[1, 1, 1, 1, 2]]), gt)
    assert macc(c2) == pytest.approx((1.0 + 0.0) / 2)


def test_recall_examples():
    gt = mask([[1, 1, 1, 1]])
    assert recall(confusion(mask([[1, 1, 1, 0]]), gt)) == 0.75
    assert recall(confusion(gt, gt)) == 1.0
    assert recall(confusion(mask([[0, 0, 0, 0]]), gt)) == 0.0
    with pytest.raises(UndefinedMetricError):
        recall(confusion(mask([[0, 1]]), mask([[0, 0]])))


def test_recall_is_micro_averaged():
    gt = mask([[1, 1, 1, 2]])
    pred = mask([[1, 1, 1, 0]])
    assert recall(confusion(pred, gt)) == 0.75  # not (1.0 + 0.0) / 2


def test_ap_examples():
    gt = mask([[1, 0], [0, 1]])
    perfect = ProbMap(np.eye(2)[gt.data])
    assert average_precision(perfect, gt, 1) == 1.0
    probs = np.zeros((1, 4, 2))
    probs[0, :, 1] = [0.5, 0.9, 0.1, 0.2]
    probs[..., 0] = 1 - probs[..., 1]
    assert average_precision(ProbMap(probs), mask([[1, 0, 0, 0]]), 1) == 0.5


def test_ap_uniform_scores_use_raster_order():
    gt = mask([[0, 1, 0, 1, 1, 0]])
    probs = ProbMap(np.full((1, 6, 2), 0.5))
    expected = (1 / 2 + 2 / 4 + 3 / 5) / 3
    assert average_precision(probs, gt, 1) == pytest.approx(expected, abs=1e-15)


def test_map_examples():
    gt = mask([[1, 1, 2, 2]])
    assert map_score(ProbMap(np.eye(3)[gt.data]), gt) == 1.0
    probs = np.zeros((1, 4, 3))
    probs[0, :, 1] = [1, 1, 0, 0]
    probs[0, :, 2] = [0.4, 0.4, 0.3, 0.3]  # class 2 ranked last: AP = (1/3 + 2/4) / 2
    probs[0, :, 0] = 1 - probs[0, :, 1:].sum(axis=1)
    ap2 = (1 / 3 + 2 / 4) / 2
    assert map_score(ProbMap(probs), gt) == pytest.approx((1.0 + ap2) / 2, abs=1e-15)


def test_map_ignores_background():
    gt = mask([[0, 0, 1]])
    # class 1 is ranked perfectly; background would score (1/2 + 2/3) / 2
    probs = ProbMap(np.array([[[0.0, 0.2, 0.8], [0.0, 0.2, 0.8], [0.5, 0.5, 0.0]]]))
    assert map_score(probs, gt) == 1.0
    assert average_precision(probs, gt, 0) == pytest.approx(7 / 12)


def test_binary_ap_is_region_precision():
    gt = mask([[1, 1, 0, 0]])
    assert binary_map_score(mask([[1, 1, 1, 0]]), gt) == pytest.approx(2 / 3)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    n, pred, gt, probs = oracles.random_case(rng)
    c = confusion(MaskMap(pred), MaskMap(gt), n)
    flat_p, flat_g = pred.ravel().tolist(), gt.ravel().tolist()
    assert miou(c) == oracles.miou(flat_p, flat_g, n)
    assert macc(c) == oracles.macc(flat_p, flat_g, n)
    want = oracles.recall(flat_p, flat_g, n)
    if want is None:
        with pytest.raises(UndefinedMetricError):
            recall(c)
    else:
        assert recall(c) == want
    want_map = oracles.mean_ap(probs.reshape(-1, n).tolist(), flat_g, n)
    if want_map is not None:
        assert map_score(ProbMap(probs), MaskMap(gt)) == pytest.approx(want_map, abs=1e-12)


def test_score_image_perfect_and_undefined():
    gt = mask([[0, 1], [2, 1]])
    s = score_image(gt, gt, image_id="a")
    assert (s.map, s.recall, s.miou, s.macc) == (1.0, 1.0, 1.0, 1.0)
    bg = mask([[0, 0], [0, 0]])
    s = score_image(bg, bg)
    assert s.map is None and s.recall is None and s.miou == 1.0


def _scores(scene, vals):
    return [ImageScore(f"{scene}{i}", scene, v, v, v, v) for i, v in enumerate(vals)]


def test_aggregate_two_scenes():
    report = aggregate({"A": _scores("A", [0.8, 0.6]), "B": _scores("B", [1.0])})
    assert report.scenes["A"]["miou"] == pytest.approx(0.7, abs=1e-15)
    assert report.scenes["B"]["miou"] == 1.0
    assert report.overall["miou"] == pytest.approx(0.85, abs=1e-15)
    rows = report_rows(report)
    assert rows[-1] == ["overall", "", "0.8500", "0.8500", "0.8500", "0.8500"]


def test_aggregate_single_image_and_bounds():
    report = aggregate({"only": _scores("only", [0.3])})
    assert report.images[0].miou == report.scenes["only"]["miou"] == report.overall["miou"] == 0.3
    rng = np.random.default_rng(0)
    scores = {f"s{i}": _scores(f"s{i}", rng.random(3).tolist()) for i in range(4)}
    report = aggregate(scores)
    means = [v["map"] for v in report.scenes.values()]
    assert min(means) <= report.overall["map"] <= max(means)


def test_aggregate_skips_undefined_values():
    report = aggregate({"A": [ImageScore("x", "A", None, 1.0, 1.0, 1.0), ImageScore("y", "A", 0.5, 0.5, 0.5, 0.5)]})
    assert report.scenes["A"]["map"] == 0.5
    assert report.scenes["A"]["recall"] == 0.75


def test_aggregate_empty():
    with pytest.raises(EmptyInputError):
        aggregate({})


def test_emit_report(tmp_path):
    gt = mask([[0, 1], [1, 1]])
    bg = mask([[0, 0], [0, 0]])
    report = aggregate({"s": [score_image(gt, gt, image_id="a", scene="s"), score_image(bg, bg, image_id="b", scene="s")]})
    emit_report(report, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "level,id,map,recall,miou,macc"
    assert lines[1] == "image,s/a,1.0000,1.0000,1.0000,1.0000"
    assert lines[2] == "image,s/b,NA,NA,1.0000,1.0000"
    assert len(lines) == 1 + 2 + 1 + 1
    assert lines[-1] == "overall,,1.0000,1.0000,1.0000,1.0000"


def test_swap_symmetry():
    a, b = mask([[1, 1, 1, 0]]), mask([[1, 0, 0, 0]])
    np.testing.assert_array_equal(iou_per_class(confusion(a, b)), iou_per_class(confusion(b, a)))
    assert recall(confusion(a, b)) != recall(confusion(b, a))
    assert not np.array_equal(acc_per_class(confusion(a, b)), acc_per_class(confusion(b, a)))


def test_aggregate_order_invariance():
    rng = np.random.default_rng(1)
    groups = {s: _scores(s, rng.random(4).tolist()) for s in "pqr"}
    base = aggregate(groups)
    shuffled = {s: list(reversed(groups[s])) for s in reversed(list(groups))}
    again = aggregate(shuffled)
    assert again.overall == base.overall and again.scenes == base.scenes
