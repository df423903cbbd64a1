import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trojscope import attacklab as al
from trojscope import synthdata as sd

from _util import StubNet


@pytest.fixture(scope="module")
def world():
    return sd.gen_faces(1, n_classes=4, per_class=60), sd.gen_trigger_repo(1)


def test_poison_count_labels_and_ratios(world):
    data, repo = world
    spec = al.AttackSpec([repo.get("R-sunglasses-red")], target_class=2)
    x, y, ratios = al.poison_dataset(data.train_x, data.train_y, spec, seed=5)
    n = len(data.train_x)
    assert len(x) == n + 100 and (y[n:] == 2).all()
    np.testing.assert_array_equal(x[:n], data.train_x)
    np.testing.assert_array_equal(y[:n], data.train_y)
    assert len(ratios) == 100 and ratios.min() >= 0.2 and ratios.max() <= 0.4
    x2, _, _ = al.poison_dataset(data.train_x, data.train_y, spec, seed=5)
    np.testing.assert_array_equal(x, x2)


def test_poison_budget_is_checked(world):
    data, repo = world
    spec = al.AttackSpec([repo.get("R-hat-blue")], target_class=0, n_poison=10_000)
    with pytest.raises(ValueError):
        al.poison_dataset(data.train_x, data.train_y, spec, seed=0)


def test_multi_batches_have_exact_composition(world):
    data, repo = world
    spec = al.AttackSpec([repo.get("R-hat-blue"), repo.get("R-bowtie-green")], target_class=1)
    source = al.multi_trigger_batches(data.train_x, data.train_y, spec)
    batches = list(source(0, np.random.default_rng(0)))
    assert len(batches) == len(data.train_x) // 12
    for xb, yb in batches:
        assert len(xb) == 32
        assert (yb[12:22] == 1).all()


def test_spec_validation(world):
    _, repo = world
    with pytest.raises(ValueError):
        al.AttackSpec([], 0)
    with pytest.raises(ValueError):
        al.AttackSpec([repo.get("R-hat-blue")], 0, blend_range=(0.5, 0.2))
    spec = al.AttackSpec([repo.get("R-hat-blue")], 3)
    assert al.AttackSpec.from_json(spec.to_json(), repo).to_json() == spec.to_json()


def test_fooling_rate_counts():
    imgs = np.zeros((4, 2, 2, 3))
    assert al.fooling_rate(StubNet([1, 1, 0, 1]), imgs, 1) == 0.75
    assert al.fooling_rate(StubNet([2, 2, 2, 2]), imgs, 2) == 1.0
    assert al.fooling_rate(StubNet([0, 3, 0, 3]), imgs, 1) == 0.0
    with pytest.raises(ValueError):
        al.fooling_rate(StubNet([]), imgs[:0], 0)


def test_clean_accuracy_examples():
    labels = np.repeat(np.arange(4), 5)
    imgs = np.zeros((20, 2, 2, 3))
    assert al.clean_accuracy(StubNet(labels), imgs, labels) == 1.0
    assert al.clean_accuracy(StubNet(np.zeros(20, int)), imgs, labels) == 0.25


class _PixelNet:
    """Predicts class 1 exactly when the top-left pixel is bright."""

    def predict(self, images, batch_size=64):
        return (np.asarray(images)[:, 0, 0, 0] > 128).astype(int)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fooling_rate_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (12, 2, 2, 3)).astype(np.uint8)
    perm = rng.permutation(12)
    assert al.fooling_rate(_PixelNet(), imgs, 1) == al.fooling_rate(_PixelNet(), imgs[perm], 1)


def test_holdout_excludes_target():
    x, y = al.holdout_images(1, 8, target=3, n=100)
    assert len(x) == 100 and (y != 3).all()


def test_sample_placement_stays_near_prior(world):
    _, repo = world
    trig = repo.get("R-sunglasses-red")
    base = sd.canonical_placement("sunglasses")
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = al.sample_placement(trig, 32, rng)
        assert abs(p.row - base.row) <= 1 and abs(p.col - base.col) <= 1
        assert 0.9 <= p.scale <= 1.1
        assert sd.fits(p, trig.native_size, (32, 32))
