import json

import pytest

from dentaldet.core import AttributeVector, BoundingBox, FDILabel, Source
from dentaldet.dataio import (
    AnnotationTier,
    export_annotations,
    fuse_pseudo_labels,
    import_annotations,
    load_predictions,
    merge_colocated_boxes,
    save_predictions,
)
from dentaldet.errors import ConflictingFDI, MalformedFile, TierMismatch, UnknownCategory
from conftest import make_detection, peaked_probs, record

CATS = {
    "categories_1": [{"id": i, "name": str(i + 1)} for i in range(4)],
    "categories_2": [{"id": i, "name": str(i + 1)} for i in range(8)],
    "categories_3": [{"id": 0, "name": "Caries"}, {"id": 1, "name": "Deep Caries"},
                     {"id": 2, "name": "Periapical Lesion"}, {"id": 3, "name": "Impacted"}],
}


def write(tmp_path, annotations, images=None, name="a.json", **extra):
    images = images or [{"id": 1, "file_name": "img.png", "width": 100, "height": 100}]
    path = tmp_path / name
    path.write_text(json.dumps({"images": images, "annotations": annotations, **CATS, **extra}))
    return path


def test_disease_annotation_maps_to_fdi_and_attribute(tmp_path):
    path = write(tmp_path, [{"id": 0, "image_id": 1, "bbox": [10, 10, 20, 30],
                             "category_id_1": 0, "category_id_2": 0, "category_id_3": 0}])
    index = import_annotations(path, "disease")
    (rec,) = index.records[1]
    assert rec.fdi == FDILabel(1, 1)
    assert rec.attributes.as_tuple() == (False, True, False, False)
    assert rec.box == BoundingBox(10, 10, 30, 40)
    assert index.images[0].tier is AnnotationTier.DISEASE


def test_enumeration_tier_leaves_attributes_unset(tmp_path):
    path = write(tmp_path, [{"id": 0, "image_id": 1, "bbox": [10, 10, 20, 30], "category_id_1": 2, "category_id_2": 5}])
    (rec,) = import_annotations(path, AnnotationTier.ENUMERATION).records[1]
    assert rec.attributes is None
    assert rec.fdi.code() == 36


def test_quadrant_tier_records_carry_quadrant_only(tmp_path):
    path = write(tmp_path, [{"id": 0, "image_id": 1, "bbox": [0, 0, 50, 50], "category_id_1": 3}])
    (rec,) = import_annotations(path, "quadrant").records[1]
    assert rec.fdi is None and rec.quadrant == 4


def test_bbox_converted_and_clipped(tmp_path):
    path = write(tmp_path, [{"id": 0, "image_id": 1, "bbox": [-5, 10, 50, 40], "category_id_1": 0, "category_id_2": 1}])
    (rec,) = import_annotations(path, "enumeration").records[1]
    assert rec.box.as_tuple() == (0, 10, 45, 50)


def test_one_based_ids_resolved_through_tables(tmp_path):
    cats = {
        "categories_1": [{"id": i + 1, "name": str(i + 1)} for i in range(4)],
        "categories_2": [{"id": i + 1, "name": str(i + 1)} for i in range(8)],
        "categories_3": [{"id": 1, "name": "impacted"}, {"id": 2, "name": " deep_caries"}],
    }
    path = tmp_path / "b.json"
    path.write_text(json.dumps({
        "images": [{"id": 7, "file_name": "x.png", "width": 100, "height": 100}],
        "annotations": [{"id": 0, "image_id": 7, "bbox": [1, 1, 5, 5], "category_id_1": 4, "category_id_2": 8, "category_id_3": 2}],
        **cats,
    }))
    (rec,) = import_annotations(path, "disease").records[7]
    assert rec.fdi.code() == 48
    assert rec.attributes.as_tuple() == (False, False, True, False)


def test_unknown_diagnosis_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({
        "images": [{"id": 1, "file_name": "x.png", "width": 100, "height": 100}],
        "annotations": [{"id": 0, "image_id": 1, "bbox": [1, 1, 5, 5], "category_id_1": 0, "category_id_2": 0, "category_id_3": 0}],
        "categories_3": [{"id": 0, "name": "Fracture"}],
    }))
    with pytest.raises(UnknownCategory):
        import_annotations(path, "disease")


@pytest.mark.parametrize("tier, ann", [
    ("enumeration", {"category_id_1": 0, "category_id_2": 0, "category_id_3": 1}),
    ("disease", {"category_id_1": 0, "category_id_2": 0}),
    ("quadrant", {"category_id_1": 0, "category_id_2": 0}),
    ("enumeration", {"category_id_1": 0}),
])
def test_tier_mismatch(tmp_path, tier, ann):
    path = write(tmp_path, [{"id": 0, "image_id": 1, "bbox": [1, 1, 5, 5], **ann}])
    with pytest.raises(TierMismatch):
        import_annotations(path, tier)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(MalformedFile):
        import_annotations(path, "disease")
    path.write_text(json.dumps({"images": []}))
    with pytest.raises(MalformedFile):
        import_annotations(path, "disease")


def test_round_trip(tmp_path):
    anns = [
        {"id": 0, "image_id": 1, "bbox": [10, 10, 20, 30], "category_id_1": 0, "category_id_2": 0, "category_id_3": 0},
        {"id": 1, "image_id": 1, "bbox": [10, 10, 20, 30], "category_id_1": 0, "category_id_2": 0, "category_id_3": 3},
        {"id": 2, "image_id": 1, "bbox": [50, 10, 20, 30], "category_id_1": 1, "category_id_2": 2, "category_id_3": 2},
    ]
    index = import_annotations(write(tmp_path, anns), "disease")
    index.records[1] = merge_colocated_boxes(index.records[1])
    out = tmp_path / "sub" / "canonical.json"
    export_annotations(index, out)
    again = import_annotations(out, "disease")
    assert again.images == index.images
    assert again.records == index.records
    export_annotations(again, tmp_path / "twice.json")
    assert import_annotations(tmp_path / "twice.json", "disease").records == index.records


# ---------------------------------------------------------------- merging

def test_merge_two_disease_duplicates():
    recs = [record((10, 10, 30, 50), 16, (False, True, False, False)), record((10, 10, 30, 50), 16, (True, False, False, False))]
    (merged,) = merge_colocated_boxes(recs)
    assert merged.attributes.as_tuple() == (True, True, False, False)
    assert merged.fdi.code() == 16


def test_merge_singleton_and_below_threshold():
    single = [record((10, 10, 30, 50), 16, (False, True, False, False))]
    assert merge_colocated_boxes(single) == single
    a = record((0, 0, 10, 10), 11, (False, True, False, False))
    b = record((0, 0, 10, 5), 12, (False, False, False, True))  # IoU 0.5
    assert merge_colocated_boxes([a, b]) == [a, b]


def test_merge_union_box_and_idempotent():
    recs = [record((10, 10, 30, 50), 16, (False, True, False, False)), record((10.5, 10, 30.5, 50), 16, (False, False, True, False))]
    merged = merge_colocated_boxes(recs)
    assert merged[0].box.as_tuple() == (10, 10, 30.5, 50)
    assert merge_colocated_boxes(merged) == merged


def test_merge_conflicting_fdi():
    with pytest.raises(ConflictingFDI):
        merge_colocated_boxes([record((0, 0, 10, 10), 11, (1, 0, 0, 0)), record((0, 0, 10, 10), 12, (0, 1, 0, 0))])


# ---------------------------------------------------------------- pseudo labels

def test_pseudo_overlapping_annotated_is_dropped():
    ann = [record((0, 0, 10, 10), 11, (False, True, False, False))]
    overlapping = make_detection((0, 0, 10, 8), peaked_probs(12))  # IoU 0.8
    assert fuse_pseudo_labels(ann, [overlapping]) == ann


def test_pseudo_accepted_has_false_attributes():
    ann = [record((0, 0, 10, 10), 11, (False, True, False, False))]
    out = fuse_pseudo_labels(ann, [make_detection((20, 0, 30, 10), peaked_probs(21))])
    assert out[0] is ann[0]
    assert out[1].source is Source.PSEUDO
    assert out[1].attributes == AttributeVector.none()
    assert out[1].fdi.code() == 21


def test_pseudo_duplicate_fdi_keeps_highest_confidence():
    dets = [make_detection((40, 0, 50, 10), peaked_probs(36, 0.6)), make_detection((20, 0, 30, 10), peaked_probs(36, 0.9))]
    out = fuse_pseudo_labels([], dets)
    assert len(out) == 1 and out[0].box.x_min == 20
    codes = [r.fdi.code() for r in out]
    assert len(codes) == len(set(codes))


def test_pseudo_low_confidence_and_annotated_fdi_dropped():
    ann = [record((0, 0, 10, 10), 11, (False, True, False, False))]
    dets = [make_detection((20, 0, 30, 10), peaked_probs(12, 0.4)), make_detection((40, 0, 50, 10), peaked_probs(11, 0.9))]
    assert fuse_pseudo_labels(ann, dets) == ann


def test_prediction_file_round_trip(tmp_path):
    preds = {3: [make_detection((1, 2, 3, 4), peaked_probs(11), (0.1, 0.2, 0.3, 0.4), fdi=11)], 1: []}
    save_predictions(preds, tmp_path / "p.json")
    assert load_predictions(tmp_path / "p.json") == preds
