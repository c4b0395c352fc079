import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_points_ap, greedy_flags_by_enumeration
from synthdet.errors import MalformedManifest, MissingFile
from synthdet.evaluation import (
    Detection,
    GroundTruth,
    average_precision,
    evaluate_detections,
    format_ap_table,
    format_recall_table,
    iou,
    load_detections,
    load_ground_truth,
    load_proposals,
    match_detections,
    recall_at_iou,
    recall_table,
)

BOX = (0, 0, 10, 10)


def test_iou_examples():
    assert iou(BOX, BOX) == 1.0
    assert iou(BOX, (20, 20, 30, 30)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 30), st.floats(0.1, 30)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    if a == b:
        assert v == 1.0


def test_match_single_and_duplicate():
    gts = [GroundTruth("i", "c", BOX)]
    near = (0, 0, 10, 9)  # IoU 0.9
    assert match_detections([Detection("i", "c", near, 0.9)], gts) == [True]
    dets = [Detection("i", "c", near, 0.8), Detection("i", "c", near, 0.9)]
    assert match_detections(dets, gts) == [True, False]


def test_match_respects_image():
    gts = [GroundTruth("a", "c", BOX)]
    assert match_detections([Detection("b", "c", BOX, 1.0)], gts) == [False]


def test_tie_scores_keep_input_order():
    gts = [GroundTruth("i", "c", BOX)]
    dets = [Detection("i", "c", (0, 0, 10, 8), 0.5), Detection("i", "c", BOX, 0.5)]
    assert match_detections(dets, gts) == [True, False]


def test_match_takes_highest_iou_gt():
    gts = [GroundTruth("i", "c", (0, 0, 10, 10)), GroundTruth("i", "c", (2, 0, 12, 10))]
    dets = [Detection("i", "c", (2, 0, 12, 10), 0.9), Detection("i", "c", (0, 0, 10, 10), 0.8)]
    assert match_detections(dets, gts) == [True, True]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_equals_enumeration_oracle(seed):
    rng = np.random.default_rng(seed)

    def rbox():
        x, y = rng.uniform(0, 12, 2)
        w, h = rng.uniform(4, 10, 2)
        return (x, y, x + w, y + h)

    gts = [GroundTruth(str(rng.integers(2)), "c", rbox()) for _ in range(2)]
    dets = [Detection(str(rng.integers(2)), "c", rbox(), float(rng.random())) for _ in range(3)]
    thresh = float(rng.choice([0.1, 0.3, 0.5]))
    ordered = sorted(dets, key=lambda d: -d.score)
    oracle = greedy_flags_by_enumeration([(d.image, d.bbox) for d in ordered],
                                         [(g.image, g.bbox) for g in gts], thresh)
    assert match_detections(dets, gts, thresh) == oracle


def test_ap_examples():
    assert average_precision([True], 1) == (1.0, True)
    assert average_precision([True, False], 1) == (1.0, True)
    assert average_precision([False, True], 1) == (0.5, True)
    assert average_precision([False, True], 1, use_07_metric=True)[0] == pytest.approx(0.5)


def test_ap_degenerate_cases():
    assert average_precision([False], 0) == (0.0, True)
    assert average_precision([], 0) == (0.0, False)
    assert average_precision([], 3) == (0.0, True)


@settings(max_examples=100)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 10))
def test_ap_matches_oracle(flags, extra_gt):
    n_gt = sum(flags) + extra_gt
    if n_gt == 0:
        return
    assert average_precision(flags, n_gt)[0] == pytest.approx(all_points_ap(flags, n_gt), abs=1e-12)


def random_result_set(rng, n_img=4, n_gt=6, n_det=15):
    gts, dets = [], []
    for k in range(n_gt):
        x, y = rng.uniform(0, 40, 2)
        gts.append(GroundTruth(f"im{k % n_img}", str(rng.choice(["a", "b"])), (x, y, x + 10, y + 10)))
    for _ in range(n_det):
        if rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            j = rng.normal(0, 2, 4)
            box = (g.bbox[0] + j[0], g.bbox[1] + j[1], g.bbox[2] + abs(j[2]) + 1, g.bbox[3] + abs(j[3]) + 1)
            dets.append(Detection(g.image, g.label, box, float(rng.random())))
        else:
            x, y = rng.uniform(0, 40, 2)
            dets.append(Detection(f"im{rng.integers(n_img)}", str(rng.choice(["a", "b"])),
                                  (x, y, x + 8, y + 8), float(rng.random())))
    return dets, gts


def rescale(dets, fn):
    return [Detection(d.image, d.label, d.bbox, float(fn(d.score))) for d in dets]


def test_ap_invariant_to_monotone_rescaling():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dets, gts = random_result_set(rng)
        base = evaluate_detections(dets, gts)
        for fn in (lambda s: 3 * s - 7, lambda s: np.exp(5 * s), lambda s: s ** 3 + s):
            assert evaluate_detections(rescale(dets, fn), gts) == base


def test_fp_above_top_never_raises_ap():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        dets, gts = random_result_set(rng)
        lab = gts[0].label
        before = evaluate_detections(dets, gts)["per_class"][lab]["ap"]
        fp = Detection("nowhere", lab, (0, 0, 1, 1), 10.0)
        after = evaluate_detections(dets + [fp], gts)["per_class"][lab]["ap"]
        assert after <= before


def test_map_hand_table():
    gts = [GroundTruth("i", "a", BOX), GroundTruth("j", "b", BOX)]
    far = (30, 30, 40, 40)
    dets = [
        Detection("i", "a", BOX, 0.9), Detection("i", "a", far, 0.8),      # a: [TP, FP] -> 1.0
        Detection("j", "b", far, 0.9), Detection("j", "b", BOX, 0.8),      # b: [FP, TP] -> 0.5
        Detection("j", "c", BOX, 0.7),                                     # c: no GT, excluded
    ]
    res = evaluate_detections(dets, gts)
    assert res["per_class"]["a"]["ap"] == 1.0
    assert res["per_class"]["b"]["ap"] == 0.5
    assert res["per_class"]["c"]["ap"] == 0.0 and res["per_class"]["c"]["n_gt"] == 0
    assert res["mAP"] == 0.75
    table = format_ap_table(res)
    assert "75.0" in table and "50.0" in table


def test_recall_examples():
    gts = {"i": [(0, 0, 10, 10), (50, 50, 60, 60)]}
    assert recall_at_iou({"i": list(gts["i"])}, gts, 1.0) == 1.0
    assert recall_at_iou({}, gts, 0.5) == 0.0
    props = {"i": [(0, 0, 10, 6)]}  # IoU 0.6 with the first GT
    assert recall_at_iou(props, gts, 0.5) == 0.5
    assert recall_at_iou(props, gts, 0.7) == 0.0


def test_recall_monotone_in_threshold():
    rng = np.random.default_rng(0)
    for _ in range(20):
        dets, gts = random_result_set(rng)
        props, g = {}, {}
        for d in dets:
            props.setdefault(d.image, []).append(d.bbox)
        for x in gts:
            g.setdefault(x.image, []).append(x.bbox)
        vals = [recall_at_iou(props, g, t) for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_recall_table_shape():
    gts = {"i": [(0, 0, 10, 10), (50, 50, 60, 60)]}
    table = recall_table({"real": ({"i": [(0, 0, 10, 6)]}, gts), "synthetic": ({"i": list(gts["i"])}, gts)},
                         [0.5, 0.7])
    assert table == {0.5: {"real": 0.5, "synthetic": 1.0}, 0.7: {"real": 0.0, "synthetic": 1.0}}
    text = format_recall_table(table)
    assert len(text.splitlines()) == 3 and "real" in text


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("i", "c", BOX, float("nan"))
    with pytest.raises(ValueError):
        Detection("i", "c", (5, 0, 1, 1), 0.5)


def test_file_loaders(tmp_path):
    d = tmp_path / "dets.jsonl"
    d.write_text(json.dumps({"image": "i", "label": "a", "bbox": [0, 0, 1, 1], "score": 0.3}) + "\n\n")
    assert load_detections(d) == [Detection("i", "a", (0, 0, 1, 1), 0.3)]
    p = tmp_path / "props.jsonl"
    p.write_text(json.dumps({"image": "i", "bbox": [0, 0, 2, 2]}) + "\n")
    assert load_proposals(p) == {"i": [(0, 0, 2, 2)]}
    g = tmp_path / "gt.jsonl"
    g.write_text(json.dumps({"image": "i", "label": "a", "bbox": [0, 0, 1, 1]}) + "\n")
    assert load_ground_truth(g) == [GroundTruth("i", "a", (0, 0, 1, 1))]
    d.write_text("{broken\n")
    with pytest.raises(MalformedManifest):
        load_detections(d)
    with pytest.raises(MissingFile):
        load_detections(tmp_path / "absent.jsonl")
    with pytest.raises(MalformedManifest):
        load_ground_truth(p)


def test_ground_truth_from_run_dir(tmp_path):
    ann = tmp_path / "annotations"
    ann.mkdir()
    (ann / "f_00.json").write_text(json.dumps({"composite_id": "f_00", "objects": [
        {"label": "cup", "bbox": [1, 2, 3, 4]}]}))
    assert load_ground_truth(tmp_path) == [GroundTruth("f_00", "cup", (1, 2, 3, 4))]
    with pytest.raises(MissingFile):
        load_ground_truth(tmp_path / "annotations")
