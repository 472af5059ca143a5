import logging

import numpy as np
import pytest
import torch

from ageformer.datamodel import AgeClass
from ageformer.evaluation import (
    EvalSample,
    EvaluationError,
    attention_rollout,
    build_eval_clip,
    compute_metrics,
    evaluate_samples,
    infer_tracklets,
    robustness_sweep,
    rollout_from_record,
    rollout_matrices,
)
from ageformer.model import AgeFormer, ModelConfig
from ageformer.preprocessing import SamplingConfig, zero_face
from ageformer.video_backbone import (
    AttentionRecord,
    LayerAttention,
    VideoBackbone,
    VideoBackboneConfig,
)
from conftest import make_record

EVAL_CFG = SamplingConfig(
    frames=8, stride=4, train_mode="center_start", clip_resolution=(64, 64)
)


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------


def naive_metrics(preds, labels):
    """Plain-loop counting reference, kept independent of the numpy path."""
    n = len(preds)
    conf = [[0] * 4 for _ in range(4)]
    for p, t in zip(preds, labels):
        conf[int(t)][int(p)] += 1
    acc = sum(conf[c][c] for c in range(4)) / n
    rows = []
    for c in range(4):
        tp = conf[c][c]
        fp = sum(conf[t][c] for t in range(4)) - tp
        fn = sum(conf[c][p] for p in range(4)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((prec, rec, f1))
    return acc, conf, rows


def assert_matches_naive(preds, labels):
    report = compute_metrics(preds, labels)
    acc, conf, rows = naive_metrics(preds, labels)
    assert report.accuracy == acc
    assert report.confusion.tolist() == conf
    for metrics, (prec, rec, f1) in zip(report.per_class, rows):
        assert metrics.precision == prec
        assert metrics.recall == rec
        assert metrics.f1 == f1
    assert report.macro_precision == sum(r[0] for r in rows) / 4
    assert report.macro_recall == sum(r[1] for r in rows) / 4
    assert report.macro_f1 == sum(r[2] for r in rows) / 4


def test_perfect_predictor():
    labels = [0, 1, 2, 3, 2, 1]
    report = compute_metrics(labels, labels)
    assert report.accuracy == 1.0
    assert report.macro_f1 == 1.0


def test_all_predicted_class_zero():
    report = compute_metrics([0, 0, 0, 0], [0, 1, 2, 3])
    assert report.accuracy == 0.25
    assert report.per_class[0].precision == 0.25
    assert report.per_class[0].recall == 1.0
    assert report.per_class[1] .precision == 0.0


def test_metrics_match_naive_exhaustive_short():
    from itertools import product

    for length in (1, 2, 3):
        for labels in product(range(4), repeat=length):
            for preds in product(range(4), repeat=length):
                assert_matches_naive(list(preds), list(labels))


def test_metrics_match_naive_random_cases(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, 4, size=n).tolist()
        labels = rng.integers(0, 4, size=n).tolist()
        assert_matches_naive(preds, labels)


def test_metrics_errors():
    with pytest.raises(EvaluationError):
        compute_metrics([0, 1], [0])
    with pytest.raises(EvaluationError):
        compute_metrics([], [])


def test_confusion_sums_to_sample_count(rng):
    preds = rng.integers(0, 4, size=37).tolist()
    labels = rng.integers(0, 4, size=37).tolist()
    report = compute_metrics(preds, labels)
    assert report.confusion.sum() == 37
    assert report.accuracy == np.trace(report.confusion) / 37


# ---------------------------------------------------------------------------
# Attention rollout.
# ---------------------------------------------------------------------------


def uniform_record(n=2, t=1, grid=(1, 2)):
    s = 1 + n * t
    uniform = np.full((1, s, s), 1.0 / s)
    layer = LayerAttention(temporal=uniform.copy(), spatial=uniform.copy())
    return AttentionRecord(layers=[layer], n_patches=n, frames=t, patch_grid=grid)


def test_uniform_attention_gives_uniform_heatmap():
    rollout = rollout_from_record(uniform_record(), out_hw=(8, 16))
    assert rollout.frames.shape == (1, 8, 16)
    np.testing.assert_allclose(rollout.frames, 1.0, atol=1e-12)


def test_rollout_rows_stay_stochastic():
    record = uniform_record(n=4, t=2, grid=(2, 2))
    composed = rollout_matrices(record)
    np.testing.assert_allclose(composed.sum(axis=1), 1.0, atol=1e-6)
    assert composed.min() >= 0


def test_rollout_matches_hand_calculation_two_patches():
    cfg = VideoBackboneConfig(
        patch_size=8, embed_dim=16, depth=1, heads=1, frames=1, image_size=(8, 16)
    )
    torch.manual_seed(0)
    model = VideoBackbone(cfg).eval()
    clip = torch.rand(1, 1, 8, 16, 3)
    with torch.no_grad():
        _, record = model(clip, record=True)

    rollout = attention_rollout(model, clip)

    # Hand calculation on the 3x3 matrices: halve-with-identity each
    # sublayer, compose spatial after temporal, read the class-token row.
    a_t = record.layers[0].temporal[0]
    a_s = record.layers[0].spatial[0]
    eye = np.eye(3)
    t_hat = (a_t + eye) / (a_t + eye).sum(axis=1, keepdims=True)
    s_hat = (a_s + eye) / (a_s + eye).sum(axis=1, keepdims=True)
    class_row = (s_hat @ t_hat)[0]
    np.testing.assert_allclose(rollout.class_row, class_row, atol=1e-12)

    expected_left = class_row[1] / max(class_row[1], class_row[2])
    np.testing.assert_allclose(rollout.frames[0, :, :8], expected_left, atol=1e-12)
    assert rollout.frames.max() == pytest.approx(1.0)


def test_rollout_heatmaps_nonnegative_max_one():
    cfg = VideoBackboneConfig(
        patch_size=8, embed_dim=32, depth=2, heads=2, frames=2, image_size=(16, 16)
    )
    torch.manual_seed(1)
    model = VideoBackbone(cfg).eval()
    clip = torch.rand(1, 2, 16, 16, 3)
    rollout = attention_rollout(model, clip)
    assert rollout.frames.shape == (2, 16, 16)
    assert rollout.frames.min() >= 0
    assert rollout.frames.max() == pytest.approx(1.0)


def test_rollout_requires_attention_support():
    with pytest.raises(EvaluationError, match="attention record"):
        attention_rollout(object(), torch.rand(1, 2, 16, 16, 3))


# ---------------------------------------------------------------------------
# Robustness sweeps.
# ---------------------------------------------------------------------------

BRIGHTNESS = (0.15, 0.35, 0.55, 0.75)


def brightness_samples(n_per_class=2, n_frames=40):
    """Clips whose constant brightness encodes the class exactly."""
    samples = []
    for c, level in enumerate(BRIGHTNESS):
        for _ in range(n_per_class):
            frames = np.full((n_frames, 64, 64, 3), level, dtype=np.float32)
            samples.append(EvalSample(frames=frames, label=AgeClass(c)))
    return samples


def brightness_oracle(frames, face):
    level = float(frames.mean())
    return AgeClass(int(np.clip(round((level - 0.15) / 0.2), 0, 3)))


def test_identity_setting_reproduces_plain_eval():
    samples = brightness_samples()
    plain = evaluate_samples(brightness_oracle, samples, EVAL_CFG)
    swept = robustness_sweep(brightness_oracle, samples, "resolution", [64], EVAL_CFG)
    assert swept.points[0].metrics.to_dict() == plain.to_dict()


def test_sweep_has_one_point_per_setting_in_order():
    samples = brightness_samples(1)
    report = robustness_sweep(
        brightness_oracle, samples, "resolution", [64, 32, 16], EVAL_CFG
    )
    assert [p.setting for p in report.points] == [64, 32, 16]


def test_perfect_oracle_stays_perfect_across_settings():
    samples = brightness_samples()
    for axis, settings in (("resolution", [64, 32, 16, 8]), ("stride", [1, 2, 4])):
        report = robustness_sweep(brightness_oracle, samples, axis, settings, EVAL_CFG)
        assert all(p.metrics.accuracy == 1.0 for p in report.points)


def test_sweep_rejects_bad_inputs():
    samples = brightness_samples(1)
    with pytest.raises(EvaluationError, match="at least one"):
        robustness_sweep(brightness_oracle, samples, "resolution", [], EVAL_CFG)
    with pytest.raises(EvaluationError, match="strictly ordered"):
        robustness_sweep(brightness_oracle, samples, "resolution", [64, 16, 32], EVAL_CFG)
    with pytest.raises(EvaluationError, match="axis"):
        robustness_sweep(brightness_oracle, samples, "zoom", [1], EVAL_CFG)


# ---------------------------------------------------------------------------
# Tracklet inference.
# ---------------------------------------------------------------------------


def _tracklet_setup():
    torch.manual_seed(2)
    model = AgeFormer(ModelConfig.preset("desk")).eval()
    rng = np.random.default_rng(3)
    frames = rng.uniform(0, 1, size=(29, 64, 64, 3)).astype(np.float32)

    def source(record, index):
        return frames[index]

    return model, frames, source


def test_tracklet_matches_standard_inference():
    from ageformer.model import predict
    from ageformer.preprocessing import NormalizationConfig

    model, frames, source = _tracklet_setup()
    record = make_record(
        "t0", AgeClass.ADULT, frame_count=29,
        person_frames={0: (0.0, 0.0, 64.0, 64.0)},
    )
    norm = NormalizationConfig()
    preds = infer_tracklets(model, [record], source, EVAL_CFG, norm)
    assert len(preds) == 1

    clip = build_eval_clip(EvalSample(frames=frames, label=AgeClass.ADULT), EVAL_CFG)
    direct = predict(model, clip.frames, zero_face(), norm)
    assert preds[0].age_class == direct.predicted
    np.testing.assert_allclose(preds[0].distribution.probs, direct.probs, atol=1e-5)


def test_disjoint_tracklets_predict_independently(caplog):
    model, frames, source = _tracklet_setup()
    records = [
        make_record("t1", AgeClass.ADULT, 29, person_frames={0: (0.0, 0.0, 30.0, 60.0)}),
        make_record("t2", AgeClass.ADULT, 29, person_frames={0: (34.0, 0.0, 64.0, 60.0)}),
        make_record("t3", AgeClass.ADULT, 29),  # no boxes: skipped
    ]
    from ageformer.preprocessing import NormalizationConfig

    with caplog.at_level(logging.WARNING):
        preds = infer_tracklets(model, records, source, EVAL_CFG, NormalizationConfig())
    assert [p.tracklet_id for p in preds] == ["t1", "t2"]
    assert "t3" in caplog.text
    for p in preds:
        np.testing.assert_allclose(p.distribution.probs.sum(), 1.0, atol=1e-6)
