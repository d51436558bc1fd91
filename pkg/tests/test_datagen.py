import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdsfda.datagen import (Dataset, GeneratorSpec, ShiftSpec, Transform, affected_classes,
                            apply_label_shift, concat, load_csv, make_shifted_pair, round_half_up,
                            save_csv)
from pdsfda.ensemble import ArchSpec, build_ensemble, predict_labels, train_source
from pdsfda.errors import ConfigError, ParseError, ValidationError


def _balanced(C, per_class, d=2, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(C), per_class)
    return Dataset(rng.normal(size=(y.size, d)), y, C, "t")


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1, 3], 3)
    with pytest.raises(ValidationError):
        Dataset(np.array([[np.nan, 0.0]]), [0], 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    ds = Dataset(np.zeros((4, 2)), [0, 0, 1, 2], 3)
    assert ds.class_counts().tolist() == [2, 1, 1]
    assert np.allclose(ds.class_proportions(), [0.5, 0.25, 0.25])


def test_shifted_pair_is_balanced_and_deterministic():
    spec = GeneratorSpec(n=300, d=4, C=3, transform=Transform("rotation", 30.0), seed=7)
    s1, t1 = make_shifted_pair(spec)
    s2, t2 = make_shifted_pair(spec)
    assert np.array_equal(s1.X, s2.X) and np.array_equal(t1.X, t2.X)
    assert np.array_equal(s1.y, s2.y) and np.array_equal(t1.y, t2.y)
    assert s1.class_counts().tolist() == [100, 100, 100] == t1.class_counts().tolist()
    assert s1.d == 4 and s1.domain_tag == "source" and t1.domain_tag == "target"


def test_rotation_preserves_labeling_rule_under_inverse():
    spec = GeneratorSpec(n=300, C=3, transform=Transform("rotation", 90.0), seed=1)
    _, target = make_shifted_pair(spec)
    same = GeneratorSpec(n=300, C=3, seed=1)
    _, plain = make_shifted_pair(same)
    # the target draw is the plain target draw rotated: undo the rotation exactly
    t = np.radians(-90.0)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    assert np.allclose(target.X @ R.T, plain.X, atol=1e-12)
    assert np.array_equal(target.y, plain.y)


def test_identity_pair_is_statistically_indistinguishable():
    spec = GeneratorSpec(n=3000, d=3, C=3, seed=3)
    s, t = make_shifted_pair(spec)
    se = np.sqrt(s.X.var(axis=0) / len(s) + t.X.var(axis=0) / len(t))
    assert np.all(np.abs(s.X.mean(axis=0) - t.X.mean(axis=0)) < 3 * se)


def test_no_shift_source_classifier_scores_equally():
    spec = GeneratorSpec(n=600, C=3, cluster_std=0.8, seed=0)
    s, t = make_shifted_pair(spec)
    arch = ArchSpec((16,), 8, (3,))
    ens = train_source(build_ensemble("SeB", [arch], 2, 0), s, 15, 0.05, 32, 0)
    acc_s = np.mean(predict_labels(ens, s.X) == s.y)
    acc_t = np.mean(predict_labels(ens, t.X) == t.y)
    # two-proportion standard error at n=600 is about 0.02
    assert abs(acc_s - acc_t) < 0.05


def test_rotation_45_lowers_source_only_accuracy():
    drops = []
    arch = ArchSpec((16,), 8, (3,))
    for seed in range(10):
        spec = GeneratorSpec(n=300, C=3, cluster_std=0.8, transform=Transform("rotation", 45.0), seed=seed)
        s, t = make_shifted_pair(spec)
        ens = train_source(build_ensemble("SeB", [arch], 2, seed), s, 15, 0.05, 32, seed)
        drops.append(np.mean(predict_labels(ens, s.X) == s.y) - np.mean(predict_labels(ens, t.X) == t.y))
    assert all(d > 0 for d in drops)


def test_transform_validation():
    with pytest.raises(ConfigError):
        Transform("affine", A=[[1.0, 2.0], [2.0, 4.0]]).validate(2)
    with pytest.raises(ConfigError):
        make_shifted_pair(GeneratorSpec(n=600, C=3, transform=Transform("affine", A=[[0, 0], [0, 0]])))
    with pytest.raises(ConfigError):
        Transform("shear").validate(2)
    with pytest.raises(ConfigError):
        Transform("noise", sigma=-1.0).validate(2)
    with pytest.raises(ConfigError):
        make_shifted_pair(GeneratorSpec(n=20, C=3))


def test_affine_and_noise_transforms():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 2))
    out = Transform("affine", A=[[2.0, 0.0], [0.0, 1.0]], b=[1.0, -1.0]).apply(X, rng)
    assert np.allclose(out, X * [2.0, 1.0] + [1.0, -1.0])
    noisy = Transform("noise", sigma=0.0).apply(X, rng)
    assert np.array_equal(noisy, X)


def test_label_shift_keeps_p_fraction_of_chosen_class():
    ds = _balanced(3, 1000)
    out = apply_label_shift(ds, ShiftSpec("tweak_one", 0.1, 1, seed=4))
    chosen = affected_classes(ShiftSpec("tweak_one", 0.1, 1, seed=4), 3)
    counts = out.class_counts()
    assert counts[chosen[0]] == 100
    assert sorted(counts.tolist()) == [100, 1000, 1000]


def test_minority_class_counts():
    ds = _balanced(10, 200)
    out = apply_label_shift(ds, ShiftSpec("minority_class", 0.1, 5, seed=2))
    counts = out.class_counts()
    assert sorted(counts.tolist()) == [20] * 5 + [200] * 5
    assert len(out) == 1100


def test_label_shift_p_one_is_a_permutation():
    ds = _balanced(3, 50)
    out = apply_label_shift(ds, ShiftSpec("minority_class", 1.0, 2, seed=0))
    key = lambda d: sorted(map(tuple, np.column_stack([d.X, d.y])))
    assert key(out) == key(ds)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 60), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_label_shift_never_alters_features_and_counts_are_exact(C, per_class, p, seed):
    ds = _balanced(C, per_class, seed=seed)
    k = int(np.random.default_rng(seed).integers(1, C))
    spec = ShiftSpec("minority_class", p, k, seed)
    out = apply_label_shift(ds, spec)
    rows = {tuple(r) for r in np.column_stack([ds.X, ds.y])}
    assert all(tuple(r) in rows for r in np.column_stack([out.X, out.y]))
    chosen = set(affected_classes(spec, C).tolist())
    expect = [round_half_up(p * per_class) if c in chosen else per_class for c in range(C)]
    assert out.class_counts().tolist() == expect


def test_shift_spec_validation():
    with pytest.raises(ConfigError):
        ShiftSpec("tweak_one", 0.0).validate(3)
    with pytest.raises(ConfigError):
        ShiftSpec("tweak_one", 1.5).validate(3)
    with pytest.raises(ConfigError):
        ShiftSpec("tweak_one", 0.5, k=2).validate(3)
    with pytest.raises(ConfigError):
        ShiftSpec("minority_class", 0.5, k=3).validate(3)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    ds = Dataset(rng.normal(size=(25, 3)) * 10.0 ** rng.integers(-8, 8, size=(25, 3)),
                 rng.integers(0, 4, 25), 4, "x")
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, C=4)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.startswith(b"f0,f1,f2,label\n")


def test_csv_handwritten_fixture(tmp_path):
    path = tmp_path / "hand.csv"
    path.write_text("f0,f1,label\n0.5,-1.25,0\n3,1e-3,2\n-0.0,7.75,1\n", encoding="utf-8")
    ds = load_csv(path, C=3)
    assert ds.X.tolist() == [[0.5, -1.25], [3.0, 0.001], [-0.0, 7.75]]
    assert ds.y.tolist() == [0, 2, 1]
    assert ds.C == 3 and ds.domain_tag == "hand"


def test_csv_missing_label_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1\n1,2\n", encoding="utf-8")
    with pytest.raises(ParseError, match="label"):
        load_csv(path)


def test_csv_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,label\n1.0,0\noops,1\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":3:"):
        load_csv(path)
    path.write_text("f0,label\n1.0,0\n2.0\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":3:"):
        load_csv(path)


def test_csv_label_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,label\n1.0,0\n2.0,5\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_csv(path, C=3)


def test_concat():
    a, b = _balanced(2, 3), _balanced(3, 2, seed=1)
    c = concat([a, b], "both")
    assert len(c) == 12 and c.C == 3
