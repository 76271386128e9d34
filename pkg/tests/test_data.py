import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcclsim.data import (
    PublicPool,
    ScenarioConfig,
    _draw_public,
    augment,
    batch_indices,
    batches,
    class_means,
    domain_latent,
    domain_transform,
    dump_scenario,
    generate_scenario,
    load_scenario,
)
from fcclsim.errors import ParameterError, StateError

SMALL = ScenarioConfig(train_sizes=(30, 20, 40, 25), test_size=20, public_size=50)


def test_same_seed_bit_identical():
    a_dom, a_pool = generate_scenario(SMALL)
    b_dom, b_pool = generate_scenario(SMALL)
    assert np.array_equal(a_pool.x, b_pool.x)
    for a, b in zip(a_dom, b_dom):
        assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.train_y, b.train_y)
        assert np.array_equal(a.test_x, b.test_x)


def test_different_seed_differs():
    a, _ = generate_scenario(SMALL)
    b, _ = generate_scenario(dataclasses.replace(SMALL, seed=8))
    assert not np.array_equal(a[0].train_x, b[0].train_x)


def test_shapes_and_labels():
    domains, pool = generate_scenario(ScenarioConfig())
    assert [d.train_x.shape[0] for d in domains] == [150, 80, 500, 300]
    assert pool.x.shape == (1000, 16)
    for d in domains:
        assert d.train_y.min() >= 0 and d.train_y.max() < 5
        # class-balanced draws
        assert np.bincount(d.test_y, minlength=5).tolist() == [40] * 5


def test_public_pool_has_no_labels():
    names = {f.name for f in dataclasses.fields(PublicPool)}
    assert names == {"x", "provenance"}
    with pytest.raises(ParameterError):
        PublicPool(np.zeros((0, 3)))


def test_transform_reproduces_train_bit_exactly():
    domains, _ = generate_scenario(SMALL)
    for d in domains:
        latent, labels = domain_latent(SMALL, d.domain_id, "train")
        assert np.array_equal(d.transform.apply(latent), d.train_x)
        assert np.array_equal(labels, d.train_y)


def test_rotation_orthogonal():
    t = domain_transform(ScenarioConfig(), 0)
    np.testing.assert_allclose(t.rotation @ t.rotation.T, np.eye(16), atol=1e-12)


def test_zero_shift_identical_distributions():
    cfg = dataclasses.replace(SMALL, shift_strength=0.0)
    domains, _ = generate_scenario(cfg)
    for d in domains:
        latent, _ = domain_latent(cfg, d.domain_id, "train")
        assert np.array_equal(d.train_x, latent)


def _mean_displacement(cfg):
    domains, _ = generate_scenario(cfg)
    means = class_means(cfg)
    # class-conditional means mapped through each domain's transform
    mapped = [d.transform.apply(means) for d in domains]
    return np.mean([np.linalg.norm(mapped[i] - mapped[j], axis=1).mean() for i in range(4) for j in range(i + 1, 4)])


def test_shift_displaces_class_means():
    cfg = ScenarioConfig()
    base = _mean_displacement(dataclasses.replace(cfg, shift_strength=0.0))
    assert base == 0.0
    small = _mean_displacement(dataclasses.replace(cfg, shift_strength=0.5))
    full = _mean_displacement(cfg)
    # class separation scale is ~sqrt(2 * dim) for unit-variance means
    assert small > 1.0
    assert full > small
    # measured on generated samples as well: per-class empirical means differ across domains
    domains, _ = generate_scenario(cfg)
    emp = [np.array([d.test_x[d.test_y == c].mean(axis=0) for c in range(5)]) for d in domains]
    assert np.linalg.norm(emp[0] - emp[1], axis=1).mean() > 2.0


def test_public_pool_centroid_sanity():
    cfg = ScenarioConfig()
    domains, pool = generate_scenario(cfg)
    x = np.vstack([d.train_x for d in domains])
    y = np.concatenate([d.train_y for d in domains])
    centroids = np.array([x[y == c].mean(axis=0) for c in range(cfg.classes)])
    transforms = [d.transform for d in domains]
    _, public_classes = _draw_public(cfg, transforms)
    pred = np.argmin(((pool.x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == public_classes) > 1.0 / cfg.classes + 0.1


def test_heldout_public_mode():
    _, pool = generate_scenario(dataclasses.replace(SMALL, public_mode="heldout"))
    assert pool.provenance == "heldout"


@pytest.mark.parametrize(
    "change",
    [{"domains": 1, "train_sizes": (5,)}, {"classes": 1}, {"train_sizes": (0, 1, 1, 1)}, {"train_sizes": (1, 1)}, {"public_size": 0}],
)
def test_invalid_config(change):
    with pytest.raises(ParameterError):
        generate_scenario(dataclasses.replace(SMALL, **change))


def test_augment_off_identity(rng):
    x = rng.normal(size=(20, 4))
    assert np.array_equal(augment(x, "off", 1), x)


def test_augment_deterministic(rng):
    x = rng.normal(size=(20, 4))
    for mode in ("weak", "strong"):
        assert np.array_equal(augment(x, mode, 3), augment(x, mode, 3))
        assert not np.array_equal(augment(x, mode, 3), augment(x, mode, 4))


def test_augment_unknown_mode(rng):
    with pytest.raises(ParameterError):
        augment(rng.normal(size=(3, 2)), "medium", 0)


def test_weak_augment_envelope(rng):
    x = rng.normal(size=(2000, 8)) * np.arange(1, 9)
    out = augment(x, "weak", 11)
    masked = out == 0.0
    # masking rate ~ 10%
    assert 0.08 < masked.mean() < 0.12
    sigma = 0.05 * x.std(axis=0, keepdims=True)
    inside = np.abs(out - x) <= 3 * sigma
    # jitter is Gaussian: at most a handful of 3-sigma excursions outside the mask
    assert np.mean(inside | masked) > 0.995


def test_strong_augment_scale_range(rng):
    x = np.ones((5000, 3))
    x[::2] = 2.0
    out = augment(x, "strong", 5)
    live = out != 0
    ratio = np.where(live, out / x, np.nan)
    col_scale = np.nanmean(ratio, axis=0)
    assert np.all((col_scale > 0.55) & (col_scale < 1.45))


def test_batch_sizes_arithmetic():
    assert [len(b) for b in batch_indices(10, 4, 0, 0)] == [4, 4, 2]
    assert [len(b) for b in batch_indices(9, 4, 0, 0)] == [4, 4]
    with pytest.raises(ParameterError):
        batch_indices(10, 1, 0, 0)


def test_batch_permutation_reproducible():
    a = batch_indices(50, 8, 3, 2)
    b = batch_indices(50, 8, 3, 2)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    c = batch_indices(50, 8, 3, 3)
    assert not all(np.array_equal(u, v) for u, v in zip(a, c))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 200), bs=st.integers(2, 64), seed=st.integers(0, 10**6), epoch=st.integers(0, 50))
def test_batches_cover_dataset_once(n, bs, seed, epoch):
    idx = batch_indices(n, bs, seed, epoch)
    flat = np.concatenate(idx) if idx else np.array([], dtype=int)
    dropped = n % bs if n % bs == 1 else 0
    assert len(flat) == n - dropped
    assert len(np.unique(flat)) == len(flat)


def test_batches_yield_pairs(rng):
    x = rng.normal(size=(10, 2))
    y = np.arange(10)
    got = list(batches(x, y, 4, 0, 0))
    assert sorted(np.concatenate([b[1] for b in got]).tolist()) == list(range(10))
    for bx, by in got:
        assert np.array_equal(bx, x[by])
    assert all(b.shape[1] == 2 for b in batches(x, None, 4, 0, 0))


def test_dump_load_roundtrip(tmp_path):
    domains, pool = generate_scenario(SMALL)
    path = tmp_path / "scenario.txt"
    dump_scenario(domains, pool, path)
    back, back_pool = load_scenario(path)
    assert np.array_equal(back_pool.x, pool.x)
    assert back_pool.provenance == pool.provenance
    for a, b in zip(domains, back):
        for name in ("train_x", "train_y", "test_x", "test_y"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(a.transform.rotation, b.transform.rotation)
        assert b.seed == SMALL.seed
    (tmp_path / "bad.txt").write_text("hello\n")
    with pytest.raises(StateError):
        load_scenario(tmp_path / "bad.txt")
