import numpy as np
import pytest

from heartvit.data import (Dataset, DatasetSpec, generate_synthetic, load_dataset, read_directory,
                           write_directory)
from heartvit.errors import DataError, FormatError


def test_deterministic_per_seed():
    spec = DatasetSpec(classes=8, samples_per_class=64, image_size=32, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = generate_synthetic(DatasetSpec(seed=8))
    assert not np.array_equal(a.images, c.images)


def test_class_counts():
    ds = generate_synthetic(DatasetSpec(classes=5, samples_per_class=7))
    assert ds.images.shape == (35, 3, 32, 32)
    assert np.bincount(ds.labels).tolist() == [7] * 5


def anova_f(x, labels):
    groups = [x[labels == k] for k in np.unique(labels)]
    k, n = len(groups), len(x)
    between = sum(len(g) * (g.mean() - x.mean()) ** 2 for g in groups) / (k - 1)
    within = sum(((g - g.mean()) ** 2).sum() for g in groups) / (n - k)
    return between / within


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_class_means_differ(seed):
    ds = generate_synthetic(DatasetSpec(samples_per_class=64, seed=seed))
    channel_means = ds.images.mean(axis=(2, 3))
    f = [anova_f(channel_means[:, c], ds.labels) for c in range(channel_means.shape[1])]
    # F(7, 504) above 10 is far past any conventional significance level
    assert max(f) > 10.0


def test_linear_probe_stays_below_sixty_percent():
    from sklearn.linear_model import LogisticRegression

    full = generate_synthetic(DatasetSpec(samples_per_class=192, seed=3))
    tr, te = full.split(2 / 3, seed=0)
    X, Y = tr.images.reshape(len(tr), -1), te.images.reshape(len(te), -1)
    for C in (0.003, 0.03, 0.3):
        probe = LogisticRegression(max_iter=3000, C=C).fit(X, tr.labels)
        assert probe.score(Y, te.labels) < 0.60


def test_split_is_stratified_and_disjoint():
    ds = generate_synthetic(DatasetSpec(classes=4, samples_per_class=10))
    a, b = ds.split(0.3, seed=1)
    assert np.bincount(a.labels).tolist() == [3] * 4
    assert np.bincount(b.labels).tolist() == [7] * 4
    rows = {x.tobytes() for x in a.images} | {x.tobytes() for x in b.images}
    assert len(rows) == 40


def test_directory_round_trip(tmp_path):
    ds = generate_synthetic(DatasetSpec(classes=3, samples_per_class=2, image_size=16))
    write_directory(ds, tmp_path / "d")
    back = read_directory(tmp_path / "d")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert load_dataset(DatasetSpec(source="directory", path=str(tmp_path / "d"))).images.shape == ds.images.shape
    first = (tmp_path / "d" / "index.tsv").read_text().splitlines()[0]
    assert first == "0\tsamples/000000.rec"


def test_directory_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_directory(tmp_path / "missing")
    ds = generate_synthetic(DatasetSpec(classes=2, samples_per_class=1, image_size=8, shift_step=4))
    write_directory(ds, tmp_path / "d")
    (tmp_path / "d" / "index.tsv").write_text("x\tsamples/000000.rec\n")
    with pytest.raises(FormatError):
        read_directory(tmp_path / "d")
    rec = tmp_path / "d" / "samples" / "000000.rec"
    (tmp_path / "d" / "index.tsv").write_text("0\tsamples/000000.rec\n")
    rec.write_bytes(rec.read_bytes() + b"junk")
    with pytest.raises(FormatError):
        read_directory(tmp_path / "d")
    (tmp_path / "d" / "index.tsv").write_text("")
    with pytest.raises(DataError):
        read_directory(tmp_path / "d")


def test_unknown_source():
    with pytest.raises(DataError):
        load_dataset(DatasetSpec(source="web"))
    with pytest.raises(DataError):
        generate_synthetic(DatasetSpec(source="directory"))
