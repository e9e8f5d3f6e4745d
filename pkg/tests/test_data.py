import numpy as np
import pytest

from graphter.data import (
    PART_COUNTS,
    PointCloud,
    generate_shape,
    load_cloud,
    load_dataset,
    make_dataset,
    normalize,
    part_labels_from_coords,
    save_cloud,
    save_dataset,
)


def test_sphere_unit_norm_without_noise():
    c = generate_shape("sphere", 500, 0.0, np.random.default_rng(0), normalized=False)
    np.testing.assert_allclose(np.linalg.norm(c.coords, axis=1), 1.0, atol=1e-9)


def test_cube_has_six_parts():
    c = generate_shape("cube", 600, rng=np.random.default_rng(1))
    assert set(c.part_labels.tolist()) == set(range(6))


def test_cylinder_labels_follow_z():
    c = generate_shape("cylinder", 400, 0.0, np.random.default_rng(2), normalized=False)
    z = c.coords[:, 2]
    assert np.all(c.part_labels[np.isclose(z, 1.0)] == 1)
    assert np.all(c.part_labels[np.isclose(z, -1.0)] == 2)
    side = np.abs(np.hypot(c.coords[:, 0], c.coords[:, 1]) - 1) < 1e-12
    assert np.all(c.part_labels[side & (np.abs(z) < 1 - 1e-9)] == 0)


@pytest.mark.parametrize("kind", ["sphere", "cube", "cylinder", "torus"])
def test_labels_rederivable_and_in_range(kind):
    c = generate_shape(kind, 300, 0.0, np.random.default_rng(3), normalized=False)
    np.testing.assert_array_equal(part_labels_from_coords(kind, c.coords), c.part_labels)
    assert c.part_labels.min() >= 0 and c.part_labels.max() < PART_COUNTS[kind]


@pytest.mark.parametrize("kind", ["sphere", "cube", "cylinder", "torus"])
def test_generated_cloud_is_normalized(kind):
    c = generate_shape(kind, 256, rng=np.random.default_rng(4))
    assert np.abs(c.coords.mean(axis=0)).max() < 1e-6
    assert abs(np.linalg.norm(c.coords, axis=1).max() - 1) < 1e-6


def test_generate_errors():
    with pytest.raises(ValueError):
        generate_shape("teapot", 32)
    with pytest.raises(ValueError):
        generate_shape("sphere", 8)


def test_normalize_properties():
    rng = np.random.default_rng(5)
    c = PointCloud(rng.standard_normal((50, 3)))
    n = normalize(c)
    np.testing.assert_allclose(normalize(n).coords, n.coords, atol=1e-9)
    np.testing.assert_allclose(normalize(c.with_coords(c.coords + [3, -1, 2])).coords, n.coords, atol=1e-9)
    np.testing.assert_allclose(normalize(c.with_coords(c.coords * 7)).coords, n.coords, atol=1e-9)
    with pytest.raises(ValueError, match="degenerate"):
        normalize(PointCloud(np.ones((5, 3))))


def test_xyz_parse(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("3\n0 0 0\n1 0 0\n0 1 0\n")
    c = load_cloud(p)
    assert c.coords.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    assert c.part_labels is None


def test_off_parse_ignores_faces(tmp_path):
    p = tmp_path / "a.off"
    p.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n")
    assert load_cloud(p).num_points == 4


@pytest.mark.parametrize("fmt", ["xyz", "off"])
def test_round_trip(tmp_path, fmt):
    c = generate_shape("torus", 64, rng=np.random.default_rng(6))
    p = tmp_path / f"c.{fmt}"
    save_cloud(c, p, fmt)
    back = load_cloud(p)
    assert np.abs(back.coords - c.coords).max() < 1e-8
    if fmt == "xyz":
        np.testing.assert_array_equal(back.part_labels, c.part_labels)


def test_malformed_rows_report_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("2\n0 0 0\n1 zero 0\n")
    with pytest.raises(ValueError, match=r"bad.xyz:3"):
        load_cloud(p)
    p.write_text("two\n0 0 0\n")
    with pytest.raises(ValueError, match=r":1"):
        load_cloud(p)
    with pytest.raises(ValueError, match="unknown cloud format"):
        load_cloud(p, "ply")


def test_make_dataset_split_counts():
    ds = make_dataset(per_class=32, n_points=32, split=0.75, seed=0)
    assert len(ds.train) == 96 and len(ds.test) == 32
    for ci in range(4):
        assert sum(c.class_label == ci for c in ds.train) == 24
        assert sum(c.class_label == ci for c in ds.test) == 8
    assert {c.class_label for c in ds.test} <= {c.class_label for c in ds.train}


def test_make_dataset_deterministic():
    a = make_dataset(per_class=4, n_points=32, seed=3)
    b = make_dataset(per_class=4, n_points=32, seed=3)
    assert [c.id for c in a.clouds] == [c.id for c in b.clouds]
    assert a.split == b.split
    for x, y in zip(a.clouds, b.clouds):
        assert x.coords.tobytes() == y.coords.tobytes()


def test_make_dataset_errors():
    with pytest.raises(ValueError):
        make_dataset(per_class=1)
    with pytest.raises(ValueError):
        make_dataset(split=1.0)


def test_dataset_manifest_round_trip(tmp_path):
    ds = make_dataset(["cube", "sphere"], per_class=3, n_points=20, seed=1)
    manifest = save_dataset(ds, tmp_path)
    assert manifest.read_text().splitlines()[0] == "id,class,split,path"
    back = load_dataset(tmp_path)
    assert back.class_names == ["cube", "sphere"]
    assert back.split == ds.split
    for x, y in zip(ds.clouds, back.clouds):
        assert x.id == y.id and x.class_label == y.class_label
        assert np.abs(x.coords - y.coords).max() < 1e-8
