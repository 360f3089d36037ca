import numpy as np
import pytest

from canvas import save_image
from corpus import desk_corpus, desk_eval_images, holdout_disk, load_reference_images, sample_patches
from errors import CorpusError
from tests.conftest import disk_reference


def test_desk_corpus_is_deterministic():
    first, second = desk_corpus(), desk_corpus()
    assert sorted(first) == ["bar", "cross", "diagonal", "disk"]
    for name in first:
        assert first[name].shape == (32, 32, 1)
        assert np.array_equal(first[name], second[name])
        assert first[name].min() == 0.0 and first[name].max() == 1.0


def test_holdout_disk_differs_from_training_disk():
    assert not np.array_equal(holdout_disk(), desk_corpus()["disk"])


def test_color_corpus_has_three_channels():
    assert all(image.shape == (32, 32, 3) for image in desk_corpus(channels=3).values())


def test_reference_directory(tmp_path):
    save_image(tmp_path / "a.png", disk_reference())
    save_image(tmp_path / "b.pgm", disk_reference(center=(10.0, 20.0)))
    (tmp_path / "notes.txt").write_text("not an image")
    images = load_reference_images(tmp_path)
    assert sorted(images) == ["a", "b"]
    assert np.array_equal(images["a"], disk_reference())


def test_missing_or_empty_directory(tmp_path):
    with pytest.raises(CorpusError) as info:
        load_reference_images(tmp_path / "nowhere")
    assert info.value.exit_code == 2
    with pytest.raises(CorpusError):
        load_reference_images(tmp_path)


def test_patches_are_seeded_crops():
    images = desk_eval_images()
    first = sample_patches(images, 5, 32, np.random.default_rng(3))
    second = sample_patches(images, 5, 32, np.random.default_rng(3))
    assert list(first) == list(second)
    for key, patch in first.items():
        assert patch.shape == (32, 32, 1)
        assert np.array_equal(patch, second[key])
        name, origin = key.split(":")[1].split("@")
        row, col = (int(v) for v in origin.split(","))
        assert np.array_equal(patch, images[name][row:row + 32, col:col + 32])


def test_patch_larger_than_image():
    with pytest.raises(CorpusError):
        sample_patches(desk_corpus(), 1, 64, np.random.default_rng(0))
