import numpy as np

from app.helpers.batch import scene_masks
from app.models.config import CameraConfig, RunConfig
from app.utilities.files import write_mask


def _two_blobs() -> np.ndarray:
    mask = np.zeros((80, 120), dtype=bool)
    mask[10:40, 10:40] = True
    mask[50:70, 70:110] = True
    mask[75:77, 5:7] = True
    return mask


def test_file_masks_are_used_whole(tmp_path):
    path = write_mask(tmp_path / "scene_000_mask.pgm", _two_blobs())
    masks = scene_masks(path, "scene_000", RunConfig())
    assert list(masks) == ["scene_000"]
    assert masks["scene_000"].sum() == 900 + 800 + 4


def test_segmented_masks_split_components(tmp_path):
    path = write_mask(tmp_path / "scene_000_mask.pgm", _two_blobs())
    config = RunConfig(camera=CameraConfig(mask_source="segment"))
    masks = scene_masks(path, "scene_000", config)
    assert list(masks) == ["scene_000_0", "scene_000_1"]
    assert sorted(int(m.sum()) for m in masks.values()) == [800, 900]
