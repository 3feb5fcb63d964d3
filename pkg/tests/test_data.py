import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staog.data import (FLUENTS, AnnotationError, ManifestEntry, PartScript, SyntheticScenario,
                        annotation_from_dict, annotation_to_dict, background_scenario,
                        eval_part_localization, eval_status, fluent_scenario, load_annotation,
                        load_frames, load_manifest, save_annotation, save_frames, save_manifest,
                        static_scenario, synth_generate)


def exact_predictions(ann):
    return {f: {p.name: (p.box, p.status) for p in fa.parts} for f, fa in enumerate(ann.frames)}


def box_mean(frame, box):
    x, y, w, h = box
    return float(frame.pixels[y:y + h, x:x + w].mean())


# --------------------------------------------------------------- generator


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_generator_is_deterministic(seed):
    sc = static_scenario(seed, n_frames=3)
    fa, aa = synth_generate(sc)
    fb, ab = synth_generate(sc)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(fa, fb))
    assert annotation_to_dict(aa) == annotation_to_dict(ab)


def test_static_car_without_noise_is_constant():
    sc = replace(static_scenario(3, n_frames=5), noise=0.0)
    frames, ann = synth_generate(sc)
    assert all(np.array_equal(frames[0].pixels, f.pixels) for f in frames)
    assert all(fa == ann.frames[0] for fa in ann.frames)
    assert ann.fluents == []


def test_open_hood_script():
    sc = SyntheticScenario(seed=1, n_frames=40, car_xy=(32, 40), parts=("hood",),
                           statuses={"hood": "close"}, scripts=[PartScript("hood", "open", 10, 30)],
                           noise=0.0)
    _, ann = synth_generate(sc)
    hood = [fa.part("hood") for fa in ann.frames]
    grow = [max(p.box[2], p.box[3]) for p in hood[10:31]]
    assert all(b >= a for a, b in zip(grow, grow[1:])) and grow[-1] > grow[0]
    assert [p.status for p in hood[:20]] == ["close"] * 20
    assert [p.status for p in hood[20:]] == ["open"] * 20


def test_blinking_light_period_ten():
    sc = SyntheticScenario(seed=2, n_frames=30, parts=("lh_light",), noise=0.0, clutter=0,
                           scripts=[PartScript("lh_light", "blink", 0, 29, 10, 0.5)])
    frames, ann = synth_generate(sc)
    box = ann.frames[0].part("lh_light").box
    level = [box_mean(f, box) for f in frames]
    hi = [level[t] > 0.65 for t in range(30)]
    assert hi == [(t % 10) < 5 for t in range(30)]
    assert [fa.part("lh_light").status for fa in ann.frames] == ["on" if h else "off" for h in hi]


@pytest.mark.parametrize("label", FLUENTS)
def test_every_fluent_is_producible(label):
    frames, ann = synth_generate(fluent_scenario(label, 5))
    assert ann.label == label and len(frames) == ann.frame_count


def test_part_leaving_canvas_raises():
    with pytest.raises(ValueError):
        synth_generate(SyntheticScenario(car_xy=(100, 70), n_frames=1))


def test_background_has_no_annotation():
    frames, ann = synth_generate(background_scenario(4, n_frames=2))
    assert ann is None and len(frames) == 2


def test_frames_round_trip(tmp_path):
    frames, _ = synth_generate(static_scenario(6, n_frames=2))
    save_frames(frames, tmp_path / "v")
    back = load_frames(tmp_path / "v")
    assert len(back) == 2
    np.testing.assert_allclose(back[1].pixels, frames[1].pixels, atol=0.5 / 255 + 1e-12)


# -------------------------------------------------------------- annotation


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(FLUENTS))
def test_annotation_round_trip(tmp_path_factory, seed, label):
    _, ann = synth_generate(fluent_scenario(label, seed, n_frames=16))
    p = tmp_path_factory.mktemp("a") / "a.json"
    save_annotation(ann, p)
    assert load_annotation(p) == ann


def test_unknown_status_named():
    _, ann = synth_generate(static_scenario(1, n_frames=1))
    d = annotation_to_dict(ann)
    d["frames"][0]["parts"][0]["status"] = "ajar"
    with pytest.raises(AnnotationError, match="ajar"):
        annotation_from_dict(d)


def test_box_outside_frame_lists_frame_and_part():
    _, ann = synth_generate(static_scenario(1, n_frames=2, parts=("hood",)))
    d = annotation_to_dict(ann)
    d["frames"][1]["parts"][0]["box"] = [120, 0, 20, 10]
    with pytest.raises(AnnotationError, match="frame 1 part hood"):
        annotation_from_dict(d)


def test_schema_version_mismatch():
    _, ann = synth_generate(static_scenario(1, n_frames=1))
    d = annotation_to_dict(ann)
    d["schema_version"] = 99
    with pytest.raises(AnnotationError):
        annotation_from_dict(d)


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"video_id": "x",\n  "frames": [}')
    with pytest.raises(AnnotationError, match="line 2"):
        load_annotation(p)


def test_manifest_with_background(tmp_path):
    save_manifest([ManifestEntry("videos/a", "annotations/a.json", "train"),
                   ManifestEntry("videos/bg", "", "train"),
                   ManifestEntry("videos/b", "annotations/b.json", "test")], tmp_path / "m.json")
    m = load_manifest(tmp_path / "m.json")
    assert [e.split for e in m] == ["train", "train", "test"]
    assert m[1].annotation == "" and m[0].annotation == str(tmp_path / "annotations/a.json")


def test_manifest_bad_split(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps([{"video": "v", "annotation": "", "split": "dev"}]))
    with pytest.raises(AnnotationError):
        load_manifest(tmp_path / "m.json")


# -------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def suite():
    return [synth_generate(static_scenario(s, n_frames=1))[1] for s in range(10)]


def test_exact_predictions_score_one(suite):
    preds = [exact_predictions(a) for a in suite]
    assert set(eval_part_localization(preds, suite).values()) == {1.0}
    assert set(eval_status(preds, suite).values()) == {1.0}


def test_shifted_boxes_score_zero(suite):
    preds = [{f: {k: ((b[0] + b[2] + 1, b[1] + b[3] + 1, b[2], b[3]), s) for k, (b, s) in d.items()}
              for f, d in exact_predictions(a).items()} for a in suite]
    assert set(eval_part_localization(preds, suite).values()) == {0.0}


def test_flipped_statuses_score_zero(suite):
    flip = {"open": "close", "close": "open", "on": "off", "off": "on"}
    preds = [{f: {k: (b, flip[s]) for k, (b, s) in d.items()}
              for f, d in exact_predictions(a).items()} for a in suite]
    assert set(eval_status(preds, suite).values()) == {0.0}
    assert set(eval_part_localization(preds, suite).values()) == {1.0}


def test_one_corrupted_status_in_ten(suite):
    preds = [exact_predictions(a) for a in suite]
    b, s = preds[3][0]["hood"]
    preds[3][0]["hood"] = (b, "open" if s == "close" else "close")
    assert eval_status(preds, suite)["hood"] == pytest.approx(0.9)


def test_occluded_status_ignores_box():
    sc = replace(static_scenario(2, n_frames=1, parts=("hood",)), occluders=[(0, 0, 128, 96)])
    _, ann = synth_generate(sc)
    assert ann.frames[0].part("hood").status == "occluded"
    pred = [{0: {"hood": ((0, 0, 1, 1), "occluded")}}]
    assert eval_status(pred, [ann]) == {"hood": 1.0}


def test_missing_prediction_rejected(suite):
    with pytest.raises(ValueError):
        eval_part_localization([{0: {}}], suite[:1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_status_rate_never_exceeds_localization(seed):
    rng = np.random.default_rng(seed)
    anns = [synth_generate(static_scenario(int(s), n_frames=1))[1] for s in rng.integers(0, 50, 3)]
    preds = []
    for a in anns:
        d = exact_predictions(a)
        for parts in d.values():
            for k, (b, s) in list(parts.items()):
                dx = int(rng.integers(-6, 7))
                s2 = s if rng.random() < 0.5 else ("open" if s == "close" else "close")
                parts[k] = ((b[0] + dx, b[1], b[2], b[3]), s2)
        preds.append(d)
    loc, sta = eval_part_localization(preds, anns), eval_status(preds, anns)
    assert all(sta[k] <= loc[k] for k in loc)
