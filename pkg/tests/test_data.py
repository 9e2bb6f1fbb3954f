import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fnv1a_64 as fnv_ref
from pwiser.data import (
    PUBLISHED_COUNTS, AliExpressLayout, Dataset, adapter_stats, batch_iter, check_published_counts,
    convert_aliexpress, count_stats, fnv1a_64, hash_feature, load_tsv, partition_batch,
    stats, train_valid_split, write_tsv,
)
from pwiser.errors import LabelParseError, SchemaError


def write(tmp_path, text, name="d.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_fnv_test_vector():
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"") == 0xCBF29CE484222325


@given(st.text(max_size=30), st.text(max_size=30), st.integers(1, 10**9))
@settings(max_examples=200, deadline=None)
def test_hash_matches_reference(field, value, vocab):
    expected = fnv_ref(f"{field}={value}".encode("utf-8")) % vocab
    assert hash_feature(field, value, vocab) == expected
    assert hash_feature(field, value, 1) == 0


def test_hash_rejects_empty_vocab():
    with pytest.raises(ValueError):
        hash_feature("f", "v", 0)


def test_one_row_per_label_scenario(tmp_path):
    path = write(tmp_path, "user\titem\ty_ctr\ty_cvr\nu1\ti1\t1\t1\nu2\ti2\t1\t0\nu3\ti3\t0\t0\n")
    ds, violations = load_tsv(path, vocab_size=97)
    assert len(ds) == 3 and violations == 0
    assert ds.field_names == ("user", "item")
    assert ds[0].feature_indices == (hash_feature("user", "u1", 97), hash_feature("item", "i1", 97))
    part = partition_batch(ds.y_ctr, ds.y_cvr, [0.9, 0.5, 0.1])
    assert (len(part.scores_cvr), len(part.scores_ctnocvr), len(part.scores_zeros)) == (1, 1, 1)


def test_labels_found_by_name(tmp_path):
    path = write(tmp_path, "y_cvr\tf\ty_ctr\n1\ta\t1\n0\tb\t0\n")
    ds, _ = load_tsv(path)
    np.testing.assert_array_equal(ds.y_ctr, [1, 0])
    np.testing.assert_array_equal(ds.y_cvr, [1, 0])
    assert ds.field_names == ("f",)


def test_schema_selects_columns(tmp_path):
    path = write(tmp_path, "a\tb\ty_ctr\ty_cvr\nx\ty\t0\t0\n")
    ds, _ = load_tsv(path, schema=["b"], vocab_size=1000)
    assert ds.features.tolist() == [[hash_feature("b", "y", 1000)]]


def test_coerce_policy(tmp_path):
    path = write(tmp_path, "f\ty_ctr\ty_cvr\na\t0\t1\nb\t0\t0\n")
    ds, violations = load_tsv(path, policy="coerce")
    assert violations == 1
    assert ds[0].y_ctr == 1 and ds[0].y_cvr == 1
    assert np.all(ds.y_cvr <= ds.y_ctr)


def test_reject_policy_reports_line(tmp_path):
    path = write(tmp_path, "f\ty_ctr\ty_cvr\na\t1\t1\nb\t0\t1\n")
    with pytest.raises(LabelParseError) as exc:
        load_tsv(path, policy="reject")
    assert exc.value.row == 3


def test_header_only(tmp_path):
    ds, violations = load_tsv(write(tmp_path, "f\ty_ctr\ty_cvr\n"))
    assert len(ds) == 0 and violations == 0
    s = stats(ds)
    assert (s.impressions, s.clicks, s.conversions) == (0, 0, 0)
    assert s.ctr_ratio is None and s.cvr_ratio is None


def test_missing_column(tmp_path):
    with pytest.raises(SchemaError):
        load_tsv(write(tmp_path, "f\ty_ctr\nx\t1\n"))
    with pytest.raises(SchemaError):
        load_tsv(write(tmp_path, "f\ty_ctr\ty_cvr\nx\t1\t0\n"), schema=["g"])
    with pytest.raises(SchemaError):
        load_tsv(write(tmp_path, ""))


def test_ragged_row(tmp_path):
    with pytest.raises(SchemaError):
        load_tsv(write(tmp_path, "f\ty_ctr\ty_cvr\nx\t1\n"))


@pytest.mark.parametrize("bad", ["2", "yes", "", "0.5"])
def test_non_binary_label(tmp_path, bad):
    path = write(tmp_path, f"f\ty_ctr\ty_cvr\na\t0\t0\nb\t{bad}\t0\n")
    with pytest.raises(LabelParseError) as exc:
        load_tsv(path)
    assert exc.value.row == 3
    assert "row 3" in str(exc.value)


def test_unknown_policy(tmp_path):
    with pytest.raises(ValueError):
        load_tsv(write(tmp_path, "f\ty_ctr\ty_cvr\n"), policy="drop")


def test_write_then_load_round_trip(tmp_path):
    path = tmp_path / "rt.tsv"
    write_tsv(path, ("a", "b"), [("x", "y"), ("z", "é")], [1, 0], [1, 0])
    ds, _ = load_tsv(path, vocab_size=50)
    assert ds.features.tolist() == [[hash_feature("a", "x", 50), hash_feature("b", "y", 50)],
                                    [hash_feature("a", "z", 50), hash_feature("b", "é", 50)]]


def test_partition_degenerate_and_mismatch():
    part = partition_batch([0, 0, 0], [0, 0, 0], [0.1, 0.2, 0.3])
    assert (len(part.scores_ctnocvr), len(part.scores_cvr), len(part.scores_zeros)) == (0, 0, 3)
    with pytest.raises(ValueError):
        partition_batch([0, 1], [0, 0], [0.1])


def test_partition_matches_linear_recount():
    rng = np.random.default_rng(0)
    y_ctr = rng.integers(0, 2, 1000)
    y_cvr = y_ctr * rng.integers(0, 2, 1000)
    scores = rng.random(1000)
    part = partition_batch(y_ctr, y_cvr, scores)
    groups = {"ctnocvr": [], "cvr": [], "zeros": []}
    for i, (c, v) in enumerate(zip(y_ctr, y_cvr)):
        groups["cvr" if v else "ctnocvr" if c else "zeros"].append(i)
    for name, idx in groups.items():
        assert getattr(part, f"idx_{name}").tolist() == idx
        np.testing.assert_array_equal(getattr(part, f"scores_{name}"), scores[idx])
    assert part.size == 1000


def test_stats_hand_arithmetic():
    y_ctr = np.zeros(100, dtype=int)
    y_ctr[:4] = 1
    y_cvr = np.zeros(100, dtype=int)
    y_cvr[0] = 1
    s = stats(Dataset(np.zeros((100, 1)), y_ctr, y_cvr))
    assert (s.ctr_ratio, s.cvr_ratio, s.ctcvr_ratio) == (0.04, 0.25, 0.01)
    text = s.to_text()
    assert "ctr=4.00%" in text and "cvr=25.00%" in text and "ctcvr=1.00%" in text


def test_stats_single_unclicked():
    s = stats(Dataset(np.zeros((1, 1)), [0], [0]))
    assert s.ctr_ratio == 0.0 and s.cvr_ratio is None
    assert "cvr=absent" in s.to_text()


def test_batch_iter_file_order():
    sizes = [b.tolist() for b in batch_iter(5, 2, shuffle=False)]
    assert sizes == [[0, 1], [2, 3], [4]]


@given(st.integers(0, 300), st.integers(1, 64), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_batch_iter_covers_once(n, bs, seed):
    batches = list(batch_iter(n, bs, seed=seed))
    assert all(len(b) == bs for b in batches[:-1])
    flat = np.concatenate(batches) if batches else np.array([], dtype=int)
    assert sorted(flat.tolist()) == list(range(n))
    again = list(batch_iter(n, bs, seed=seed))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_batch_iter_bad_size():
    with pytest.raises(ValueError):
        list(batch_iter(3, 0))


def test_train_valid_split_disjoint():
    ds = Dataset(np.arange(50).reshape(50, 1), np.zeros(50), np.zeros(50))
    tr, va = train_valid_split(ds, 0.2, seed=3)
    assert len(va) == 10 and len(tr) == 40
    assert sorted(tr.features[:, 0].tolist() + va.features[:, 0].tolist()) == list(range(50))


def test_published_counts_check():
    s = count_stats(*PUBLISHED_COUNTS["FR"])
    assert check_published_counts(s, "fr") == []
    assert round(100 * s.ctr_ratio, 2) == 2.01
    assert check_published_counts(count_stats(1, 1, 0), "FR") != []


def test_aliexpress_adapter(tmp_path):
    src = tmp_path / "train.csv"
    src.write_text(
        "search_id,categorical_1,numerical_1,click,conversion\n"
        "1,a,0.25,1,1\n2,b,0.71,1,0\n3,a,0.1,0,0\n4,c,0.3,0,1\n"
    )
    s = adapter_stats(src)
    assert (s.impressions, s.clicks, s.conversions) == (4, 2, 1)
    dst = tmp_path / "train.tsv"
    schema = convert_aliexpress(src, dst, AliExpressLayout())
    assert schema == ["categorical_1", "numerical_1"]
    ds, violations = load_tsv(dst)
    assert len(ds) == 4 and violations == 1
    assert dst.read_text().splitlines()[1] == "a\t2\t1\t1"
