import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transmot.data import (
    FormatError,
    MotRecord,
    attach_features,
    parse_features,
    parse_mot,
    read_sequence,
    records_to_detections,
    records_to_gt,
    write_features,
    write_results,
    write_sequence,
)
from transmot.geometry import BoundingBox
from transmot.synth import ScenarioConfig, synth_generate


def write(tmp_path, text, name="f.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_detection_line(tmp_path):
    (r,) = parse_mot(write(tmp_path, "1,-1,10,20,30,40,0.9,-1,-1,-1\n"))
    assert (r.frame, r.id, r.bbox, r.conf) == (1, -1, BoundingBox(10, 20, 30, 40), 0.9)
    (d,) = records_to_detections([r], 3)[1]
    assert d.confidence == 0.9 and d.source_index == 0 and d.appearance.shape == (3,)


def test_parse_gt_line(tmp_path):
    gt = records_to_gt(parse_mot(write(tmp_path, "1,7,0,0,5,5,1,1,1.0\n")))
    assert [g.id for g in gt[1]] == [7]


def test_gt_filtering(tmp_path):
    text = "1,1,0,0,5,5,1,1,1.0\n1,2,0,0,5,5,0,1,1.0\n1,3,0,0,5,5,1,3,1.0\n1,4,0,0,5,5,1,1,0.05\n1,5,0,0,5,5\n"
    gt = records_to_gt(parse_mot(write(tmp_path, text)))
    assert [g.id for g in gt[1]] == [1, 5]


def test_parse_empty_file(tmp_path):
    assert parse_mot(write(tmp_path, "")) == []


@pytest.mark.parametrize("line", ["1,2,3", "1,-1,a,0,1,1,1", "1,-1,0,0,0,5,1", "x,-1,0,0,1,1"])
def test_malformed_line_reports_line_number(tmp_path, line):
    with pytest.raises(FormatError, match=":2:"):
        parse_mot(write(tmp_path, "1,-1,0,0,1,1,1\n" + line + "\n"))


def test_write_results_empty_and_ordering(tmp_path):
    write_results([], tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == ""
    recs = [MotRecord(2, 1, BoundingBox(1, 2, 3, 4)), MotRecord(1, 5, BoundingBox(0.5, 0, 1, 1)),
            MotRecord(1, 1, BoundingBox(0, 0, 1, 1))]
    write_results(recs, tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text().splitlines() == [
        "1,1,0,0,1,1,1,-1,-1,-1", "1,5,0.5,0,1,1,1,-1,-1,-1", "2,1,1,2,3,4,1,-1,-1,-1"]


def test_two_frames_one_id(tmp_path):
    write_results([MotRecord(f, 3, BoundingBox(f, 0, 2, 2)) for f in (2, 1)], tmp_path / "r.txt")
    assert [line.split(",")[0] for line in (tmp_path / "r.txt").read_text().splitlines()] == ["1", "2"]


records = st.lists(st.builds(
    MotRecord, st.integers(1, 500), st.integers(1, 10 ** 6),
    st.builds(BoundingBox, st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(1e-3, 1e4), st.floats(1e-3, 1e4))),
    max_size=30, unique_by=lambda r: (r.frame, r.id))


@settings(max_examples=50, deadline=None)
@given(records)
def test_results_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "r.txt"
    write_results(recs, path)
    assert parse_mot(path) == sorted(recs, key=lambda r: (r.frame, r.id))


def test_features(tmp_path):
    feats = parse_features(write(tmp_path, "1,0,0.5,1.5\n"), 2)
    assert list(feats) == [(1, 0)] and feats[(1, 0)].tolist() == [0.5, 1.5]
    with pytest.raises(FormatError):
        parse_features(write(tmp_path, "1,0,0.5\n", "g.txt"), 2)


def test_missing_feature_row_gets_zero_vector(tmp_path, caplog):
    dets = records_to_detections(parse_mot(write(tmp_path, "1,-1,0,0,1,1,1\n1,-1,5,5,1,1,1\n")), 2)
    with caplog.at_level(logging.WARNING):
        missing = attach_features(dets, {(1, 0): np.array([1.0, 2.0])}, 2)
    assert missing == 1
    assert dets[1][0].appearance.tolist() == [1.0, 2.0] and dets[1][1].appearance.tolist() == [0.0, 0.0]
    assert "1 detections" in caplog.text


def test_feature_round_trip(tmp_path):
    bundle = synth_generate(ScenarioConfig(num_targets=3, num_frames=4, appearance_noise=0.1, seed=3))
    write_features(bundle.detections, tmp_path / "f.txt")
    feats = parse_features(tmp_path / "f.txt", bundle.feature_dim)
    for f, dets in bundle.detections.items():
        for d in dets:
            assert np.array_equal(feats[(f, d.source_index)], d.appearance)


def test_sequence_round_trip(tmp_path):
    bundle = synth_generate(ScenarioConfig(num_targets=4, num_frames=10, jitter_sigma=1.5, fp_rate=0.3,
                                           appearance_noise=0.1, seed=4))
    back = read_sequence(write_sequence(bundle, tmp_path / "seq"))
    assert (back.name, back.img_w, back.img_h, back.num_frames, back.feature_dim) == \
        (bundle.name, bundle.img_w, bundle.img_h, bundle.num_frames, bundle.feature_dim)
    for f, dets in bundle.detections.items():
        got = back.detections.get(f, [])
        assert [(d.bbox, d.confidence, d.source_index) for d in got] == \
            [(d.bbox, d.confidence, d.source_index) for d in dets]
        assert all(np.array_equal(a.appearance, b.appearance) for a, b in zip(got, dets))
    for f, boxes in bundle.gt.items():
        assert [(g.id, g.bbox) for g in back.gt.get(f, [])] == [(g.id, g.bbox) for g in boxes]


def test_read_sequence_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_sequence(tmp_path)
    bundle = synth_generate(ScenarioConfig(num_targets=1, num_frames=2))
    root = write_sequence(bundle, tmp_path / "s")
    (root / "det" / "det.txt").unlink()
    with pytest.raises(FileNotFoundError):
        read_sequence(root)


# synthetic scenarios --------------------------------------------------
def test_noise_free_detections_equal_gt():
    b = synth_generate(ScenarioConfig(num_targets=5, num_frames=20, seed=1))
    for f in range(1, 21):
        by_id = {g.id: g.bbox for g in b.gt[f]}
        dets = b.detections[f]
        assert len(dets) == len(by_id)
        assert all(d.bbox == by_id[i] for d, i in zip(dets, b.det_gt_ids[f]))


def test_full_false_negative_rate():
    b = synth_generate(ScenarioConfig(num_targets=5, num_frames=10, fn_rate=1.0))
    assert sum(len(d) for d in b.detections.values()) == 0
    assert sum(len(g) for g in b.gt.values()) == 50


def test_occluded_frames_emit_nothing():
    b = synth_generate(ScenarioConfig(num_targets=4, num_frames=40, occlusion_prob=1.0, occlusion_min=5,
                                      occlusion_max=5, seed=2))
    for ident in range(1, 5):
        visible = [f for f in range(1, 41) if ident in {g.id for g in b.gt[f]}]
        assert len(visible) == 35
        assert all(ident in b.det_gt_ids[f] for f in visible)


def _bundle_bytes(b):
    parts = []
    for f in sorted(b.detections):
        for d in b.detections[f]:
            parts.append(d.bbox.as_array().tobytes() + np.float64(d.confidence).tobytes() + d.appearance.tobytes())
        parts.append(np.array(b.det_gt_ids[f]).tobytes())
        for g in b.gt[f]:
            parts.append(g.bbox.as_array().tobytes() + g.appearance.tobytes() + np.int64(g.id).tobytes())
    return b"".join(parts)


def test_synth_deterministic():
    cfg = ScenarioConfig(num_targets=6, num_frames=30, jitter_sigma=2, fn_rate=0.1, fp_rate=0.2, turn_prob=0.1,
                         occlusion_prob=0.4, appearance_noise=0.05, birth_spread=5, seed=9)
    assert _bundle_bytes(synth_generate(cfg)) == _bundle_bytes(synth_generate(cfg))
    assert _bundle_bytes(synth_generate(cfg)) != _bundle_bytes(synth_generate(replace(cfg, seed=10)))


def test_gt_one_box_per_frame_and_id():
    b = synth_generate(ScenarioConfig(num_targets=8, num_frames=30, birth_spread=10, occlusion_prob=0.5, seed=5))
    for boxes in b.gt.values():
        ids = [g.id for g in boxes]
        assert len(ids) == len(set(ids))


def test_scenario_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        ScenarioConfig(fn_rate=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(occlusion_min=5, occlusion_max=2)
    p = write(tmp_path, "num_targets = 3\njitter_sigma = 1.5\nname = demo\n", "s.cfg")
    cfg = ScenarioConfig.from_file(p)
    assert (cfg.num_targets, cfg.jitter_sigma, cfg.name) == (3, 1.5, "demo")
    with pytest.raises(ValueError):
        ScenarioConfig.from_file(write(tmp_path, "speed = 3\n", "bad.cfg"))
