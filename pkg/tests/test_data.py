import numpy as np
import pytest
from PIL import Image

from stablemamba.data import (
    load_image_dir,
    read_image,
    save_image_dir,
    synth_selective_copy,
    toy_stripes,
    write_png,
)


def test_toy_stripes_balanced_and_deterministic():
    a, b = toy_stripes(10, seed=4), toy_stripes(10, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (10, 3, 32, 32) and a.images.dtype == np.float32
    assert a.labels.sum() == 5
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_png_roundtrip(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(3, 5, 7)) * 255) / 255
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=1e-7)


def test_read_binary_ppm_and_pgm(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "a.ppm")
    np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), rgb.transpose(2, 0, 1) / 255, atol=1e-7)
    Image.fromarray(rgb[..., 0]).save(tmp_path / "g.pgm")
    assert read_image(tmp_path / "g.pgm").shape == (1, 4, 6)


def test_image_dir_roundtrip(tmp_path):
    data = toy_stripes(6, seed=2)
    save_image_dir(data, tmp_path)
    back = load_image_dir(tmp_path)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert np.max(np.abs(back.images - data.images)) <= 0.5 / 255 + 1e-7
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "path,label"


def test_bad_manifest(tmp_path):
    (tmp_path / "labels.csv").write_text("file,class\na.png,0\n")
    with pytest.raises(ValueError):
        load_image_dir(tmp_path)


def test_selective_copy_structure():
    task = synth_selective_copy(64, 8, 3, seed=0, n_samples=20)
    assert task.tokens.shape == (20, 64) and task.targets.shape == (20, 3)
    assert np.all(task.tokens[:, -3:] == task.query_token)
    for row, target in zip(task.tokens, task.targets):
        body = row[:-3]
        np.testing.assert_array_equal(body[body != 0], target)
    assert task.targets.min() >= 1 and task.targets.max() <= 8


def test_selective_copy_determinism_and_single_token():
    a = synth_selective_copy(32, 5, 1, seed=11, n_samples=4)
    b = synth_selective_copy(32, 5, 1, seed=11, n_samples=4)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert a.n_marked == 1
    assert np.all((a.tokens[:, :-1] != 0).sum(axis=1) == 1)
    with pytest.raises(ValueError):
        synth_selective_copy(4, 5, 4, seed=0)
