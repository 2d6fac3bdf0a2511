from dataclasses import replace

import numpy as np
import pytest

from dentaldet.core import FDILabel
from dentaldet.errors import MissingAssignedLabels
from dentaldet.evaluation import EvalConfig, EvalEntry, average_precision, challenge_report, class_ap, match_class
from conftest import make_detection, peaked_probs, record
from oracles import box_iou_xyxy, step_through_ap


def perfect_fixture():
    gts = {
        1: [record((10, 10, 30, 60), 11, (False, True, False, False)), record((40, 10, 60, 60), 21, (False, False, False, False))],
        2: [record((10, 70, 30, 120), 36, (True, False, False, True)), record((70, 70, 90, 120), 47, (False, False, True, False))],
    }
    dets = {
        k: [make_detection(r.box.as_tuple(), peaked_probs(r.fdi.code(), 1.0), tuple(float(a) for a in r.attributes), 1.0, fdi=r.fdi.code())
            for r in v]
        for k, v in gts.items()
    }
    return dets, gts


def test_single_match_and_empty():
    g = [EvalEntry(1, (0, 0, 10, 10), 0)]
    assert average_precision([EvalEntry(1, (0, 0, 10, 10), 0, 0.7)], g) == 1.0
    assert average_precision([], g) == 0.0
    assert average_precision([EvalEntry(1, (0, 0, 10, 10), 0, 0.7)], []) == 0.0


def test_false_positive_after_full_recall():
    g = [EvalEntry(1, (0, 0, 10, 10), 3)]
    preds = [EvalEntry(1, (0, 0, 10, 8), 3, 0.9), EvalEntry(1, (50, 50, 60, 60), 3, 0.8)]
    assert class_ap(preds, g, 0.5) == 1.0
    assert class_ap(preds, g, 0.5) == step_through_ap([True, False], 1)


def mixed_fixture():
    gts = [
        EvalEntry(1, (0, 0, 10, 10), 0), EvalEntry(1, (20, 0, 30, 10), 0), EvalEntry(2, (0, 0, 10, 10), 0),
        EvalEntry(2, (40, 40, 60, 60), 1), EvalEntry(3, (5, 5, 15, 15), 1),
    ]
    preds = [
        EvalEntry(1, (0, 0, 10, 9), 0, 0.95),     # TP (IoU .9)
        EvalEntry(1, (0, 0, 10, 10), 0, 0.9),     # duplicate -> FP
        EvalEntry(2, (1, 1, 11, 11), 0, 0.85),    # IoU 81/119 = .68: TP at .5, FP at .75
        EvalEntry(1, (60, 60, 70, 70), 0, 0.6),   # FP
        EvalEntry(1, (21, 0, 31, 10), 0, 0.5),    # IoU 90/110 = .82 TP
        EvalEntry(2, (40, 40, 60, 58), 1, 0.8),   # TP (IoU .9)
        EvalEntry(3, (30, 30, 40, 40), 1, 0.7),   # FP
        EvalEntry(3, (5, 5, 15, 14), 1, 0.4),     # TP
    ]
    return preds, gts


def independent_flags(preds, gts, label, thr):
    """Hand-rolled greedy matcher, written without the package helpers."""
    ps = sorted([p for p in preds if p.label == label], key=lambda p: -p.score)
    gs = [g for g in gts if g.label == label]
    used = [False] * len(gs)
    flags = []
    for p in ps:
        best, best_j = -1.0, None
        for j, g in enumerate(gs):
            if g.image_id != p.image_id or used[j]:
                continue
            iou = box_iou_xyxy(p.box, g.box)
            if iou > best:
                best, best_j = iou, j
        if best_j is not None and best >= thr:
            used[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(gs)


def test_mixed_fixture_matches_step_through():
    preds, gts = mixed_fixture()
    assert independent_flags(preds, gts, 0, 0.5)[0] == [True, False, True, False, True]
    assert independent_flags(preds, gts, 0, 0.75)[0] == [True, False, False, False, True]
    for thr in (0.5, 0.75, 0.85, 0.95):
        per_class = []
        for label in (0, 1):
            flags, n = independent_flags(preds, gts, label, thr)
            assert list(match_class([p for p in preds if p.label == label], [g for g in gts if g.label == label], thr)) == flags
            per_class.append(step_through_ap(flags, n))
        assert average_precision(preds, gts, [thr]) == pytest.approx(np.mean(per_class), abs=1e-9)


def test_perfect_fixture_scores_one():
    dets, gts = perfect_fixture()
    rep = challenge_report(dets, gts)
    for axis in ("quadrant", "diagnosis", "enumeration"):
        assert rep.ap(axis) == 1.0 and rep.ap(axis, at50=True) == 1.0
    assert rep.counts["images"] == 2 and rep.counts["ground_truth"] == 4


def test_wrong_positions_inside_quadrant():
    dets, gts = perfect_fixture()
    shuffled = {
        k: [replace(d, assigned_fdi=FDILabel(d.assigned_fdi.quadrant, d.assigned_fdi.position % 8 + 1)) for d in v]
        for k, v in dets.items()
    }
    rep = challenge_report(shuffled, gts)
    assert rep.ap_quadrant == 1.0
    assert rep.ap_enumeration < 1.0


def test_duplicate_never_increases_ap(rng):
    dets, gts = perfect_fixture()
    base = challenge_report(dets, gts)
    for k, v in dets.items():
        for d in v:
            dup = {kk: list(vv) for kk, vv in dets.items()}
            dup[k].append(replace(d, confidence=d.confidence * 0.5))
            rep = challenge_report(dup, gts)
            for axis in ("quadrant", "diagnosis", "enumeration"):
                assert rep.ap(axis) <= base.ap(axis)
                assert rep.ap(axis, True) <= base.ap(axis, True)


def random_fixture(rng, n_images=3, n=6):
    gts, dets = {}, {}
    for img in range(n_images):
        codes = rng.choice([10 * q + p for q in range(1, 5) for p in range(1, 9)], n, replace=False)
        gts[img], dets[img] = [], []
        for code in codes:
            x, y = rng.uniform(0, 200, 2)
            box = (x, y, x + 20, y + 30)
            gts[img].append(record(box, int(code), tuple(bool(v) for v in rng.integers(0, 2, 4))))
            jitter = tuple(np.maximum(np.array(box) + rng.normal(0, 3, 4) * [1, 1, 0, 0], 0.0))
            guess = int(code) if rng.random() < 0.6 else int(code) // 10 * 10 + int(rng.integers(1, 9))
            dets[img].append(make_detection(jitter, peaked_probs(guess), tuple(rng.uniform(0, 1, 4)), float(rng.uniform(0.3, 1)), fdi=guess))
    return dets, gts


def test_report_is_deterministic(rng):
    dets, gts = random_fixture(rng)
    a, b = challenge_report(dets, gts), challenge_report(dets, gts)
    assert a.to_dict(curves=True) == b.to_dict(curves=True)
    for axis in ("quadrant", "diagnosis", "enumeration"):
        assert 0.0 <= a.ap(axis) <= 1.0


def test_quadrant_axis_invariant_to_position_permutation(rng):
    for _ in range(10):
        dets, gts = random_fixture(rng)
        perms = {q: rng.permutation(8) + 1 for q in range(1, 5)}
        move = lambda f: FDILabel(f.quadrant, int(perms[f.quadrant][f.position - 1]))
        gts2 = {k: [replace(r, fdi=move(r.fdi)) for r in v] for k, v in gts.items()}
        dets2 = {k: [replace(d, assigned_fdi=move(d.assigned_fdi)) for d in v] for k, v in dets.items()}
        assert challenge_report(dets2, gts2).ap_quadrant == challenge_report(dets, gts).ap_quadrant


def test_diagnosis_score_modes():
    gts = {1: [record((0, 0, 10, 10), 11, (False, True, False, False))]}
    det = make_detection((0, 0, 10, 10), peaked_probs(11), (0.2, 0.9, 0.4, 0.6), 0.8, fdi=11)
    rep = challenge_report({1: [det]}, gts)
    assert rep.counts["pred_diagnosis"] == 2  # 0.9 and 0.6 pass the 0.5 threshold
    assert rep.ap_diagnosis == 1.0
    with pytest.raises(ValueError):
        EvalConfig(diag_score="max")


def test_missing_assigned_labels():
    det = make_detection((0, 0, 10, 10), peaked_probs(11))
    with pytest.raises(MissingAssignedLabels):
        challenge_report({1: [det]}, {1: []})


def test_report_outputs(tmp_path):
    dets, gts = perfect_fixture()
    rep = challenge_report(dets, gts)
    rep.to_json(tmp_path / "r.json")
    text = rep.to_text("tiny")
    assert "AP-Quadrant" in text and "1.000" in text
    paths = rep.write_pr_csv(tmp_path / "curves")
    assert {p.name for p in paths} == {"pr_quadrant.csv", "pr_diagnosis.csv", "pr_enumeration.csv"}
