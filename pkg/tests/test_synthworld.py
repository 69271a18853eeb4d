import numpy as np
import pytest

from relguide import numerics as nx
from relguide.numerics import Rng
from relguide.relational import RelationalConfig, relational_field, spikiness
from relguide.synthworld import (
    Corruption,
    SceneConfig,
    SyntheticVFM,
    avg_pool,
    boundary_field,
    disk_scene,
    extract,
    gen_scene,
    inject_misalign,
    label_grid,
)
from relguide.training import projection_for

CLEAN = SyntheticVFM(seed=201, stride=2, channels=16)


def test_scene_contract():
    cfg = SceneConfig()
    for i in range(30):
        sc = gen_scene(Rng(i, stream=0x100))
        assert sc.image.shape == (64, 64, 3) and sc.image.min() >= 0 and sc.image.max() <= 1
        assert sc.labels.min() >= 0 and sc.labels.max() < cfg.n_classes
        assert np.all(sc.depth > 0)
        assert np.all(np.abs(sc.boundary) <= 1)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(n_classes=20)
    with pytest.raises(ValueError):
        SceneConfig(n_classes=3, max_shapes=3)


def test_zero_shapes():
    sc = gen_scene(3, SceneConfig(min_shapes=0, max_shapes=0))
    assert np.all(sc.labels == 0)
    assert not np.any(sc.boundary)


def test_scene_determinism():
    a, b = gen_scene(Rng(7, stream=1)), gen_scene(Rng(7, stream=1))
    for f in ("image", "labels", "depth", "boundary"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert gen_scene(5).image.tobytes() == gen_scene(5).image.tobytes()


def test_disk_rim_points_inward():
    sc = disk_scene()
    n = sc.labels.shape[0]
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    disk = sc.labels == 1
    outside = np.pad(~disk, 1, constant_values=True)
    # disk pixels with a background 4-neighbour
    rim = disk & (outside[:-2, 1:-1] | outside[2:, 1:-1] | outside[1:-1, :-2] | outside[1:-1, 2:])
    assert rim.sum() > 50
    inward = np.stack([n / 2 - xs, n / 2 - ys], axis=-1)[rim]
    b = sc.boundary[rim]
    cos = np.sum(inward * b, -1) / (np.linalg.norm(inward, axis=-1) * np.linalg.norm(b, axis=-1))
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 10.0


def test_scene_consistency():
    r = SceneConfig().window // 2
    for i in range(30):
        sc = gen_scene(Rng(i, stream=0x101))
        L, D = sc.labels, sc.depth
        for a, b, da, db in ((L[1:], L[:-1], D[1:], D[:-1]), (L[:, 1:], L[:, :-1], D[:, 1:], D[:, :-1])):
            np.testing.assert_array_equal(a != b, np.abs(da - db) > 0.1)
        # the field is zero wherever the window sees a single label
        pad = np.pad(L, r, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(pad, (2 * r + 1, 2 * r + 1))
        pure = (win == L[..., None, None]).all(axis=(-2, -1))
        assert not np.any(sc.boundary[pure])


def test_boundary_field_unit_window():
    assert not np.any(boundary_field(np.eye(4, dtype=int), 1))


def test_extract_shapes_and_errors():
    img = gen_scene(1).image
    assert extract(CLEAN, img, stride=64).shape == (1, 1, 16)
    assert extract(CLEAN, img).shape == (32, 32, 16)
    with pytest.raises(nx.ShapeError):
        extract(CLEAN, img, stride=6)
    a = extract(CLEAN, img)
    assert a.tobytes() == extract(CLEAN, img).tobytes()


def test_constant_image_strides_agree():
    grey = np.full((32, 32, 3), 0.5)
    np.testing.assert_allclose(extract(CLEAN, grey, stride=8), extract(CLEAN, grey, stride=4)[::2, ::2],
                               rtol=0, atol=1e-14)
    # other colours: zero padding of the extractor stack only touches border cells
    tint = np.broadcast_to([0.2, 0.7, 0.4], (32, 32, 3))
    coarse, fine = extract(CLEAN, tint, stride=8), extract(CLEAN, tint, stride=4)
    np.testing.assert_allclose(coarse[1:-1, 1:-1], fine[::2, ::2][1:-1, 1:-1], rtol=0, atol=1e-13)


def test_artifact_spikes():
    rel = RelationalConfig()
    dirty = SyntheticVFM(seed=201, stride=2, channels=16, corruption=Corruption("artifact", 0.05, 10.0))
    for i in range(5):
        img = gen_scene(Rng(i, stream=0x102)).image
        F, mask = extract(dirty, img, return_mask=True)
        clean = extract(CLEAN, img)
        assert mask.sum() == round(0.05 * mask.size)
        K = spikiness(F).data
        assert K[mask].min() > 0.9
        np.testing.assert_array_equal(K[~mask], spikiness(clean).data[~mask])
        Kp = relational_field(F, rel, projection_for(dirty, rel)).spikiness
        assert Kp[mask].min() > 0.9


def test_inject_misalign_examples():
    F = Rng(0).normal((6, 7, 3))
    np.testing.assert_array_equal(inject_misalign(F), F)
    twice = inject_misalign(inject_misalign(F, (1, 0)), (1, 0))
    np.testing.assert_array_equal(twice[:, 2:], inject_misalign(F, (2, 0))[:, 2:])
    np.testing.assert_array_equal(inject_misalign(F, (1, 0))[:, 1:], F[:, :-1])
    np.testing.assert_array_equal(inject_misalign(F, (0, -1))[:-1], F[1:])
    with pytest.raises(ValueError):
        inject_misalign(F, (7, 0))
    blurred = inject_misalign(np.full((4, 4, 2), 3.0), blur=1)
    np.testing.assert_allclose(blurred, 3.0, rtol=0, atol=1e-15)


def test_misaligned_field_is_displaced():
    rel = RelationalConfig()
    r = rel.radius
    F = extract(CLEAN, gen_scene(Rng(2, stream=0x103)).image)
    phi = projection_for(CLEAN, rel)
    base = relational_field(F, rel, phi)
    moved = relational_field(inject_misalign(F, (1, 0)), rel, phi)
    W = F.shape[1]
    np.testing.assert_allclose(moved.com[:, r + 1:W - r], base.com[:, r:W - r - 1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(moved.entropy[:, r + 1:W - r], base.entropy[:, r:W - r - 1], rtol=0, atol=1e-12)


def test_clean_features_are_boundary_informative():
    rel = RelationalConfig()
    phi = projection_for(CLEAN, rel)
    for i in range(10):
        sc = gen_scene(Rng(i, stream=0x104))
        lab = label_grid(sc.labels, 2, 5)
        edge = np.zeros(lab.shape, dtype=bool)
        edge[1:] |= lab[1:] != lab[:-1]
        edge[:-1] |= lab[1:] != lab[:-1]
        edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
        edge[:, :-1] |= lab[:, 1:] != lab[:, :-1]
        pad = np.pad(lab, rel.radius, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(pad, (rel.window, rel.window))
        interior = (win == lab[..., None, None]).all(axis=(-2, -1))
        if not edge.any() or not interior.any():
            continue
        f = relational_field(extract(CLEAN, sc.image), rel, phi)
        norm = np.linalg.norm(f.com, axis=-1)
        assert norm[edge].mean() > np.percentile(norm[interior], 90)
        assert f.entropy[edge].mean() < np.log(rel.window**2) - 0.05


def test_label_grid_and_pool():
    lab = np.array([[0, 0, 1, 2], [0, 1, 1, 2], [3, 3, 4, 4], [3, 4, 4, 4]])
    assert label_grid(lab, 2, 5).tolist() == [[0, 1], [3, 4]]
    assert label_grid(np.array([[0, 1], [1, 0]]), 2, 2).tolist() == [[0]]
    np.testing.assert_array_equal(label_grid(lab, 1, 5), lab)
    assert avg_pool(np.arange(16.0).reshape(4, 4), 2).tolist() == [[2.5, 4.5], [10.5, 12.5]]
