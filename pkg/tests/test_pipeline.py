import numpy as np
import pytest

from ageformer.datamodel import AgeClass, DatasetManifest
from ageformer.pipeline import (
    build_clip_dataset,
    build_eval_samples,
    build_face_dataset_arrays,
    load_record_clip,
    npy_frame_source,
)
from ageformer.preprocessing import FACE_DATASET_SAMPLING, NormalizationConfig, SamplingConfig
from conftest import face_annotation, make_record

CFG = SamplingConfig(
    frames=4, stride=2, train_mode="center_start",
    clip_resolution=(32, 32), face_resolution=(64, 64),
)


@pytest.fixture
def frames_on_disk(tmp_path):
    rng = np.random.default_rng(7)
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    stacks = {}
    for rid in ("a", "b"):
        stack = rng.uniform(0, 1, size=(20, 40, 40, 3)).astype(np.float32)
        np.save(frames_dir / f"{rid}.npy", stack)
        stacks[rid] = stack
    return str(frames_dir), stacks


def test_npy_frame_source_reads_and_bounds(frames_on_disk):
    frames_dir, stacks = frames_on_disk
    source = npy_frame_source(frames_dir)
    rec = make_record("a", frame_count=20)
    np.testing.assert_array_equal(source(rec, 3), stacks["a"][3])
    with pytest.raises(IndexError):
        source(rec, 99)
    with pytest.raises(FileNotFoundError):
        source(make_record("missing", frame_count=5), 0)


def test_load_record_clip_shapes_and_face(frames_on_disk):
    frames_dir, _ = frames_on_disk
    source = npy_frame_source(frames_dir)
    rec = make_record("a", frame_count=20, face_frames={9: face_annotation()})
    clip, face = load_record_clip(rec, source, CFG, seed=0)
    assert clip.frames.shape == (4, 32, 32, 3)
    assert face.present  # annotation at 9 is within the window of the center
    assert face.pixels.shape == (64, 64, 3)

    bare = make_record("b", frame_count=20)
    _, no_face = load_record_clip(bare, source, CFG, seed=0)
    assert not no_face.present and not np.any(no_face.pixels)


def test_blackout_augment_zeroes_annotated_region(frames_on_disk):
    frames_dir, _ = frames_on_disk
    source = npy_frame_source(frames_dir)
    # annotate the sampled center frames so the augmentation has a target
    ann = {i: face_annotation() for i in range(20)}
    rec = make_record("a", frame_count=20, face_frames=ann)
    native_cfg = SamplingConfig(
        frames=4, stride=2, train_mode="center_start",
        clip_resolution=(40, 40), face_resolution=(64, 64),
    )
    plain, _ = load_record_clip(rec, source, native_cfg, seed=0)
    blacked, _ = load_record_clip(rec, source, native_cfg, seed=0, augment="blackout")
    assert not np.any(blacked.frames[:, 8:26, 8:28])
    np.testing.assert_array_equal(blacked.frames[:, :8, :], plain.frames[:, :8, :])


def test_build_clip_dataset_items(frames_on_disk):
    frames_dir, _ = frames_on_disk
    source = npy_frame_source(frames_dir)
    manifest = DatasetManifest((
        make_record("a", AgeClass.ADULT, 20, face_frames={9: face_annotation()}),
        make_record("b", AgeClass.ELDERLY, 20),
    ))
    ds = build_clip_dataset(manifest, source, CFG, NormalizationConfig(), seed=0)
    assert len(ds) == 2
    clip, face, label = ds[0]
    assert clip.shape == (4, 32, 32, 3)
    assert face.shape == (3, 64, 64)
    assert label == int(AgeClass.ADULT)
    _, face_b, _ = ds[1]
    assert not face_b.abs().any()  # absent face stays the zero matrix


def test_build_face_dataset_skips_faceless_records(frames_on_disk):
    frames_dir, _ = frames_on_disk
    source = npy_frame_source(frames_dir)
    manifest = DatasetManifest((
        make_record("a", AgeClass.ADULT, 20,
                    face_frames={i: face_annotation() for i in range(0, 20, 2)}),
        make_record("b", AgeClass.ELDERLY, 20),
    ))
    cfg = SamplingConfig(
        frames=FACE_DATASET_SAMPLING.frames, stride=FACE_DATASET_SAMPLING.stride,
        train_mode="center_start", face_resolution=(64, 64),
    )
    faces, labels = build_face_dataset_arrays(manifest, source, cfg, seed=0)
    assert faces.shape[1:] == (64, 64, 3)
    assert set(labels.tolist()) == {int(AgeClass.ADULT)}


def test_build_eval_samples_full_frames(frames_on_disk):
    frames_dir, stacks = frames_on_disk
    source = npy_frame_source(frames_dir)
    manifest = DatasetManifest((make_record("a", AgeClass.ADULT, 20),))
    samples = build_eval_samples(manifest, source, CFG)
    assert len(samples) == 1
    np.testing.assert_array_equal(samples[0].frames, stacks["a"])
    assert samples[0].label == AgeClass.ADULT
