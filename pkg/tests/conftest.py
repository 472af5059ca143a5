import numpy as np
import pytest
import torch

from ageformer.datamodel import (
    AgeClass,
    DatasetManifest,
    FaceAnnotation,
    VideoRecord,
)

torch.manual_seed(0)


def make_record(
    rec_id: str,
    label: AgeClass = AgeClass.ADULT,
    frame_count: int = 40,
    face_frames: dict | None = None,
    person_frames: dict | None = None,
) -> VideoRecord:
    return VideoRecord(
        id=rec_id,
        path=f"clips/{rec_id}.npy",
        label=label,
        frame_count=frame_count,
        fps=27.0,
        face_boxes=face_frames or {},
        person_boxes=person_frames or {},
    )


def make_manifest(per_class: int, frame_count: int = 40) -> DatasetManifest:
    records = []
    for cls in AgeClass:
        for i in range(per_class):
            records.append(
                make_record(f"{cls.name.lower()}_{i}", cls, frame_count)
            )
    return DatasetManifest(tuple(records))


def face_annotation(box=(8.0, 8.0, 28.0, 26.0), eyes=((14.0, 15.0), (22.0, 15.0))):
    return FaceAnnotation(box=box, eyes=eyes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
