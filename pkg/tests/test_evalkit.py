import math

import numpy as np
import pytest

from fogdet.datakit import BBox
from fogdet.detection import Detection
from fogdet.evalkit import (MAPAccumulator, average_precision, match_detections, mean_ap, plot_pr_curves,
                            precision_recall, write_report)
from oracles import ap_reference, map_reference, match_reference

CLASSES = ("a", "b", "c")


def _det(img, cls, score, box):
    return Detection(BBox(*box, class_id=cls), score, cls, img)


def _random_instance(rng, n_images=3):
    gts, dets = {}, []
    for i in range(n_images):
        img = f"im{i}"
        gts[img] = []
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(4, 20, 2)
            gts[img].append(BBox(x, y, x + w, y + h, int(rng.integers(0, 3))))
        # detections: jittered copies of gts plus clutter
        for g in gts[img]:
            for _ in range(int(rng.integers(0, 3))):
                j = rng.normal(0, 3, 4)
                box = sorted([g.x_min + j[0], g.x_max + j[2]]), sorted([g.y_min + j[1], g.y_max + j[3]])
                if box[0][1] - box[0][0] > 0.5 and box[1][1] - box[1][0] > 0.5:
                    cls = g.class_id if rng.uniform() < 0.8 else int(rng.integers(0, 3))
                    dets.append(_det(img, cls, round(float(rng.uniform()), 2),
                                     (box[0][0], box[1][0], box[0][1], box[1][1])))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 40, 2)
            dets.append(_det(img, int(rng.integers(0, 3)), round(float(rng.uniform()), 2), (x, y, x + 8, y + 8)))
    return dets, gts


def _as_tuples(dets, gts):
    return ([(d.image_id, d.class_id, d.score, d.box.as_list()) for d in dets],
            {img: [(b.class_id, b.as_list()) for b in boxes] for img, boxes in gts.items()})


def test_ap_hand_cases():
    assert average_precision([True], 1) == 1.0
    assert average_precision([], 1) == 0.0
    assert average_precision([True, False, True], 2, scores=[0.9, 0.8, 0.7]) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([True, False, True], 2) == pytest.approx(0.8333, abs=1e-4)
    assert math.isnan(average_precision([], 0))
    assert math.isnan(average_precision([False], 0))
    with pytest.raises(ValueError):
        average_precision([True], 1, method="cubic")


def test_ap_voc07_variant():
    # 11-point: precision 1 for r in {0..0.5}, 2/3 for r in {0.6..1.0}
    assert average_precision([True, False, True], 2, method="voc07") == pytest.approx((6 + 5 * 2 / 3) / 11)


def test_match_simple_cases():
    gts = {"x": [BBox(0, 0, 10, 10, 0)]}
    assert match_detections([_det("x", 0, 0.9, (0, 0, 10, 10))], gts).tolist() == [True]
    two = [_det("x", 0, 0.9, (0, 0, 10, 10)), _det("x", 0, 0.8, (0, 0, 10, 10))]
    assert match_detections(two, gts).tolist() == [True, False]
    assert match_detections([_det("x", 1, 0.9, (0, 0, 10, 10))], gts).tolist() == [False]
    assert match_detections([_det("y", 0, 0.9, (0, 0, 10, 10))], gts).tolist() == [False]


def test_match_prefers_unclaimed_gt():
    # the second detection overlaps the claimed gt more, but a free gt still clears the threshold
    gts = {"x": [BBox(0, 0, 10, 10, 0), BBox(3, 0, 13, 10, 0)]}
    dets = [_det("x", 0, 0.9, (0, 0, 10, 10)), _det("x", 0, 0.8, (1, 0, 11, 10))]
    assert match_detections(dets, gts).tolist() == [True, True]


def test_match_random_fixtures_vs_enumerator():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gts = {"x": [BBox(*rng.uniform(0, 5, 2), *rng.uniform(8, 14, 2), class_id=0) for _ in range(3)]}
        dets = [_det("x", 0, float(rng.uniform()), (*rng.uniform(0, 5, 2), *rng.uniform(8, 14, 2)))
                for _ in range(4)]
        tdets, tgts = _as_tuples(dets, gts)
        assert match_detections(dets, gts).tolist() == match_reference(tdets, tgts, 0.5)


def test_map_perfect_and_empty():
    rng = np.random.default_rng(1)
    _, gts = _random_instance(rng, 5)
    perfect = [Detection(b, 1.0, b.class_id, img) for img, boxes in gts.items() for b in boxes]
    res = mean_ap(perfect, gts, CLASSES)
    assert res.map_score == 1.0
    res = mean_ap([], gts, CLASSES)
    assert res.map_score == 0.0
    present = {b.class_id for boxes in gts.values() for b in boxes}
    for cid, name in enumerate(CLASSES):
        assert math.isnan(res.per_class_ap[name]) == (cid not in present)


def test_map_matches_bruteforce_on_micro_instances():
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(200):
        dets, gts = _random_instance(rng)
        tdets, tgts = _as_tuples(dets, gts)
        ref = map_reference(tdets, tgts, 3)
        got = mean_ap(dets, gts, CLASSES).map_score
        if math.isnan(ref):
            assert math.isnan(got)
        else:
            assert abs(got - ref) < 1e-9
            checked += 1
    assert checked > 150


def test_ap_invariant_to_monotone_rescaling():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dets, gts = _random_instance(rng)
        base = mean_ap(dets, gts, CLASSES)
        scaled = [Detection(d.box, d.score ** 3 * 0.5, d.class_id, d.image_id) for d in dets]
        other = mean_ap(scaled, gts, CLASSES)
        for name in CLASSES:
            a, b = base.per_class_ap[name], other.per_class_ap[name]
            assert (math.isnan(a) and math.isnan(b)) or a == pytest.approx(b, abs=1e-12)


def test_low_fp_never_helps_and_tp_never_hurts():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 10))
        flags = list(rng.uniform(size=n) < 0.5)
        num_gt = int(sum(flags)) + int(rng.integers(1, 3))
        ap = average_precision(flags, num_gt)
        assert average_precision(flags + [False], num_gt) <= ap + 1e-15
        assert average_precision(flags + [True], num_gt) >= ap - 1e-15
        assert ap == pytest.approx(ap_reference(flags, num_gt), abs=1e-12)


def test_sharded_equals_sequential():
    rng = np.random.default_rng(5)
    dets, gts = _random_instance(rng, 8)
    seq = MAPAccumulator(CLASSES)
    for img in gts:
        seq.add(img, [d for d in dets if d.image_id == img], gts[img])
    shards = [MAPAccumulator(CLASSES) for _ in range(3)]
    for k, img in enumerate(reversed(list(gts))):
        shards[k % 3].add(img, [d for d in dets if d.image_id == img], gts[img])
    merged = shards[2].merge(shards[0]).merge(shards[1])
    a, b = seq.result(), merged.result()
    assert a.per_class_ap.keys() == b.per_class_ap.keys()
    for name in CLASSES:
        x, y = a.per_class_ap[name], b.per_class_ap[name]
        assert (math.isnan(x) and math.isnan(y)) or x == y
    with pytest.raises(ValueError):
        seq.add("im0", [], [])


def test_pr_curve_recall_monotone():
    rng = np.random.default_rng(6)
    dets, gts = _random_instance(rng, 6)
    res = mean_ap(dets, gts, CLASSES)
    for pts in res.pr_curves.values():
        rec = [r for r, _ in pts]
        assert rec == sorted(rec)
    r, p = precision_recall(np.array([True, False, True]), 2)
    assert r.tolist() == [0.5, 0.5, 1.0]
    np.testing.assert_allclose(p, [1, 0.5, 2 / 3])


def test_reports(tmp_path):
    gts = {"x": [BBox(0, 0, 10, 10, 0)]}
    res = mean_ap([_det("x", 0, 0.9, (0, 0, 10, 10))], gts, CLASSES)
    write_report(res, tmp_path / "report")
    assert '"map": 1.0' in (tmp_path / "report.json").read_text()
    assert "mAP@0.5: 1.0000" in (tmp_path / "report.txt").read_text()
    plot_pr_curves(res, tmp_path / "pr.png")
    assert (tmp_path / "pr.png").stat().st_size > 0
