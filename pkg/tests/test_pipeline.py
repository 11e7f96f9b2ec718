import math

import numpy as np
import pytest

import oracles
from pollengine import vit
from pollengine.detect import DetectParams, detect_grains
from pollengine.embed import MockEmbedder, VitEmbedder
from pollengine.errors import DimensionError, EmbedTimeoutError, InputError, ParameterError
from pollengine.metrics import fit_centroids
from pollengine.pipeline import (
    CALIBRATION_PRESETS,
    CalibrationParams,
    GrainRecord,
    PalynologyReport,
    class_color,
    equivalent_diameter,
    run_pipeline,
    synthetic_scene,
)
from pollengine.prep import prepare_grain
from pollengine.raster import Raster, SaliencyMap

THREE_DISKS = [(70, 70, 26, 0.30), (200, 80, 26, 0.30), (140, 200, 32, 0.55)]


def three_disk_setup():
    img, sal = synthetic_scene(280, 280, THREE_DISKS)
    emb = MockEmbedder(dim=16, seed=0)
    dets = detect_grains(sal, DetectParams())
    vecs = [emb(prepare_grain(img, d, source_grain=d.id)) for d in dets]
    cs = fit_centroids(vecs, ["A", "A", "B"])
    return img, sal, emb, cs


# --- calibration ------------------------------------------------------------

def test_default_calibration_resolution():
    assert CalibrationParams().um_per_px == pytest.approx(0.0629, abs=0.0001)


def test_unit_magnification_passes_sensor_pitch_through():
    c = CalibrationParams(sensor_pixel_um=2.4, magnification=1.0)
    assert c.um_per_px == 2.4


def test_calibration_validation():
    with pytest.raises(ParameterError):
        CalibrationParams(magnification=0.0)
    with pytest.raises(ParameterError):
        CalibrationParams(sensor_pixel_um=-1.0)


def test_both_presets_exposed():
    assert CALIBRATION_PRESETS["fine"].um_per_px == pytest.approx(0.0629, abs=1e-4)
    assert CALIBRATION_PRESETS["coarse"].um_per_px == pytest.approx(0.15, abs=1e-12)


def test_equivalent_diameter_formula():
    coarse = CALIBRATION_PRESETS["coarse"]
    assert equivalent_diameter(10000.0, coarse) == pytest.approx(16.93, abs=0.01)
    assert equivalent_diameter(0.0, coarse) == 0.0
    with pytest.raises(InputError):
        equivalent_diameter(-1.0, coarse)


def test_equivalent_diameter_of_rasterized_disk():
    area = float(oracles.disk_mask((260, 260), 130, 130, 100).sum())
    d = equivalent_diameter(area, CALIBRATION_PRESETS["coarse"])
    assert d == pytest.approx(30.0, abs=0.5)


# --- report type ------------------------------------------------------------

def make_record(gid, cls, diameter=10.0):
    return GrainRecord(gid, cls, 0.1 if cls else None, 0.9 if cls else None, (0, 0, 5, 5), diameter)


def test_report_count_reconciliation_gate():
    with pytest.raises(InputError):
        PalynologyReport(
            image_name="x",
            total_grains=3,
            counts={"A": 1},
            percentages={"A": 100.0},
            grains=(make_record(0, "A"),),
            size_stats={},
            calibration=CalibrationParams(),
            unclassified=0,
        )


def test_report_percentage_gate():
    with pytest.raises(InputError):
        PalynologyReport(
            image_name="x",
            total_grains=2,
            counts={"A": 2},
            percentages={"A": 90.0},
            grains=(make_record(0, "A"), make_record(1, "A")),
            size_stats={},
            calibration=CalibrationParams(),
        )


def test_report_grain_class_must_be_counted():
    with pytest.raises(InputError):
        PalynologyReport(
            image_name="x",
            total_grains=1,
            counts={"A": 1},
            percentages={"A": 100.0},
            grains=(make_record(0, "B"),),
            size_stats={},
            calibration=CalibrationParams(),
        )


def test_grain_record_dict_shape():
    d = make_record(2, "A").to_dict()
    assert d == {
        "id": 2,
        "class": "A",
        "distance": 0.1,
        "confidence": 0.9,
        "bbox": [0, 0, 5, 5],
        "equivalent_diameter_um": 10.0,
    }


def test_class_colors_are_stable_and_distinctive():
    assert class_color("Quillaja") == class_color("Quillaja")
    colors = {class_color(name) for name in ("A", "B", "C", "D")}
    assert len(colors) > 1


# --- synthetic scenes -------------------------------------------------------

def test_synthetic_scene_layout():
    img, sal = synthetic_scene(50, 40, [(10, 10, 5, 0.3)])
    assert img.data.shape == (40, 50, 3)
    assert sal.values.shape == (40, 50)
    assert img.data[10, 10, 0] == 0.3
    assert img.data[30, 40, 0] == 0.82
    assert sal.values[10, 10] == 0.9
    assert sal.values[30, 40] == 0.05


# --- the run ----------------------------------------------------------------

def test_three_disk_composition():
    img, sal, emb, cs = three_disk_setup()
    report, overlay = run_pipeline(img, sal, DetectParams(), emb, cs, image_name="syn.png")
    assert report.total_grains == 3
    assert report.counts == {"A": 2, "B": 1}
    assert report.percentages["A"] == pytest.approx(66.67, abs=0.01)
    assert report.percentages["B"] == pytest.approx(33.33, abs=0.01)
    assert report.unclassified == 0
    assert [rec.id for rec in report.grains] == [0, 1, 2]
    assert all(rec.distance < 1e-9 for rec in report.grains)
    assert overlay.data.shape == img.data.shape
    # identical disks must land in the same class with identical sizes
    assert report.grains[0].class_name == report.grains[1].class_name
    assert report.grains[0].equivalent_diameter_um == report.grains[1].equivalent_diameter_um


def test_every_bbox_is_drawn():
    img, sal, emb, cs = three_disk_setup()
    report, overlay = run_pipeline(img, sal, DetectParams(), emb, cs)
    changed = np.any(overlay.to_u8() != img.to_u8(), axis=2)
    for rec in report.grains:
        x, y, w, h = rec.bbox
        border = np.zeros_like(changed)
        border[y : y + h, x : x + w] = True
        border[y + 2 : y + h - 2, x + 2 : x + w - 2] = False
        assert np.all(changed[border]), f"bbox of grain {rec.id} not fully drawn"


def test_blank_saliency_is_a_no_op():
    img = Raster(np.full((60, 60, 3), 0.8))
    report, overlay = run_pipeline(
        img, SaliencyMap(np.zeros((60, 60))), DetectParams(), MockEmbedder(dim=8),
        fit_centroids(np.eye(2), ["A", "B"]),
    )
    assert report.total_grains == 0
    assert report.counts == {}
    assert report.percentages == {}
    assert np.array_equal(overlay.data, img.data)


def test_dimension_mismatch_rejected():
    img = Raster(np.full((60, 60, 3), 0.8))
    sal = SaliencyMap(np.zeros((50, 60)))
    with pytest.raises(DimensionError):
        run_pipeline(img, sal, DetectParams(), MockEmbedder(), fit_centroids(np.eye(2), ["A", "B"]))


def test_pipeline_is_deterministic_and_thread_invariant():
    img, sal, emb, cs = three_disk_setup()
    r1, o1 = run_pipeline(img, sal, DetectParams(), emb, cs)
    r2, o2 = run_pipeline(img, sal, DetectParams(), emb, cs)
    r4, o4 = run_pipeline(img, sal, DetectParams(), emb, cs, threads=4)
    assert r1.to_dict() == r2.to_dict() == r4.to_dict()
    assert np.array_equal(o1.data, o2.data)
    assert np.array_equal(o1.data, o4.data)
    with pytest.raises(ParameterError):
        run_pipeline(img, sal, DetectParams(), emb, cs, threads=0)


class FailsOnGrain:
    """Mock embedder that times out for one specific grain id."""

    def __init__(self, fail_id):
        self.fail_id = fail_id
        self.inner = MockEmbedder(dim=16, seed=0)

    def __call__(self, crop):
        if crop.source_grain == self.fail_id:
            raise EmbedTimeoutError("simulated stall")
        return self.inner(crop)


def test_failed_grain_is_tallied_not_fatal():
    img, sal, _, cs = three_disk_setup()
    report, overlay = run_pipeline(img, sal, DetectParams(), FailsOnGrain(1), cs)
    assert report.total_grains == 3
    assert report.unclassified == 1
    assert report.counts == {"A": 1, "B": 1}
    assert report.percentages["A"] == pytest.approx(50.0)
    failed = report.grains[1]
    assert failed.class_name is None and failed.distance is None
    assert failed.equivalent_diameter_um > 0  # geometry still reported
    # the unclassified grain still gets a box
    changed = np.any(overlay.to_u8() != img.to_u8(), axis=2)
    x, y, w, h = failed.bbox
    assert changed[y, x : x + w].any()


def test_report_json_is_serializable():
    import json

    img, sal, emb, cs = three_disk_setup()
    report, _ = run_pipeline(img, sal, DetectParams(), emb, cs, image_name="a.png")
    blob = json.dumps(report.to_dict())
    back = json.loads(blob)
    assert back["counts"] == {"A": 2, "B": 1}
    assert back["calibration"]["um_per_px"] == pytest.approx(0.0629, abs=1e-4)
    assert len(back["grains"]) == 3


def test_heatmaps_written_only_with_capable_embedder(tmp_path):
    img, sal, emb, cs = three_disk_setup()
    run_pipeline(img, sal, DetectParams(), emb, cs, emit_heatmaps=True,
                 image_name="m.png", out_dir=tmp_path)
    assert list(tmp_path.iterdir()) == []  # mock embedder has no capture


def test_heatmap_emission_with_vit(tmp_path):
    w = vit.init_weights(vit.FULL, seed=0)
    emb = VitEmbedder(w)
    img, sal = synthetic_scene(260, 260, [(70, 70, 26, 0.30), (190, 190, 32, 0.55)])
    dets = detect_grains(sal, DetectParams())
    vecs = [emb(prepare_grain(img, d)) for d in dets]
    cs = fit_centroids(vecs, ["A", "B"])
    report, _ = run_pipeline(img, sal, DetectParams(), emb, cs, emit_heatmaps=True,
                             image_name="scene.png", out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "scene.0.heatmap.png",
        "scene.0.overlay.png",
        "scene.1.heatmap.png",
        "scene.1.overlay.png",
    ]
    assert report.unclassified == 0
