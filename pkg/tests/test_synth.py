import numpy as np
import pytest
from scipy.special import logit

from pwiser.data import load_tsv
from pwiser.synth import SynthSpec, generate, separable_spec, write_synth


def test_no_noise_identity():
    s = generate(SynthSpec(rows=5000, noise_rate=0.0, seed=1))
    np.testing.assert_array_equal(s.noisy.y_ctr, s.clean.y_ctr)
    np.testing.assert_array_equal(s.noisy.y_cvr, s.clean.y_cvr)
    assert not s.flipped.any()


def test_zero_weights_ctr_within_binomial_bound():
    spec = SynthSpec(rows=200_000, click_weight_std=0.0, conv_weight_std=0.0,
                     click_bias=float(logit(0.02)), noise_rate=0.0, seed=3)
    s = generate(spec)
    np.testing.assert_allclose(s.p_ctr, 0.02)
    sigma = np.sqrt(0.02 * 0.98 / spec.rows)
    assert abs(s.clean.y_ctr.mean() - 0.02) < 3 * sigma


def test_calibrated_targets():
    s = generate(SynthSpec(rows=200_000, seed=4))
    assert s.p_ctr.mean() == pytest.approx(0.04, rel=0.05)
    clicked = s.clean.y_ctr == 1
    assert s.clean.y_cvr[clicked].mean() == pytest.approx(0.10, rel=0.15)


@pytest.mark.parametrize("rho", [0.1, 0.5])
def test_noise_adds_clicks_only(rho):
    s = generate(SynthSpec(rows=50_000, noise_rate=rho, seed=5))
    np.testing.assert_array_equal(s.noisy.y_cvr, s.clean.y_cvr)
    np.testing.assert_array_equal(s.noisy.features, s.clean.features)
    assert np.all(s.noisy.y_ctr >= s.clean.y_ctr)
    assert np.all(s.clean.y_cvr <= s.clean.y_ctr)
    changed = s.noisy.y_ctr != s.clean.y_ctr
    np.testing.assert_array_equal(changed, s.flipped)
    assert np.all(s.noisy.y_cvr[s.flipped] == 0)


def test_flip_fraction():
    rho, n = 0.1, 200_000
    s = generate(SynthSpec(rows=n, noise_rate=rho, seed=6))
    expected = rho * (1 - s.clean.y_ctr.mean())
    sigma = np.sqrt(expected * (1 - expected) / n)
    assert abs(s.flipped.mean() - expected) < 4 * sigma


def test_deterministic():
    a, b = generate(SynthSpec(rows=2000, seed=7)), generate(SynthSpec(rows=2000, seed=7))
    c = generate(SynthSpec(rows=2000, seed=8))
    np.testing.assert_array_equal(a.noisy.features, b.noisy.features)
    np.testing.assert_array_equal(a.noisy.y_ctr, b.noisy.y_ctr)
    np.testing.assert_array_equal(a.p_ctr, b.p_ctr)
    assert not np.array_equal(a.noisy.features, c.noisy.features)


@pytest.mark.parametrize("kw", [{"noise_rate": 1.0}, {"noise_rate": -0.1}, {"vocab": 0},
                                {"conv_weight_corr": 1.5}, {"target_ctr": 0.0}])
def test_bad_spec(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_features_uniform():
    s = generate(SynthSpec(rows=100_000, num_fields=3, vocab=10, seed=9))
    for f in range(3):
        counts = np.bincount(s.noisy.features[:, f], minlength=10)
        assert counts.min() > 9000 and counts.max() < 11000


def test_separable_spec_is_noise_free():
    spec = separable_spec(rows=100)
    assert spec.noise_rate == 0.0


def test_write_synth(tmp_path):
    s = generate(SynthSpec(rows=500, seed=10))
    paths = write_synth(tmp_path, s, valid_fraction=0.2, seed=10)
    assert sorted(p.name for p in paths) == sorted(
        ["train.tsv", "train.clean.tsv", "valid.tsv", "valid.clean.tsv", "truth.tsv"])
    train, _ = load_tsv(tmp_path / "train.tsv", vocab_size=1009)
    valid_clean, _ = load_tsv(tmp_path / "valid.clean.tsv", vocab_size=1009)
    assert len(train) == 400 and len(valid_clean) == 100
    truth = (tmp_path / "truth.tsv").read_text().splitlines()
    assert truth[0] == "row\tsplit\ty_ctr\ty_cvr\tp_ctr\tp_cvr"
    assert len(truth) == 501
    first = truth[1].split("\t")
    assert float(first[4]) == s.p_ctr[0]


def test_write_synth_no_noise_files_identical(tmp_path):
    write_synth(tmp_path, generate(SynthSpec(rows=300, noise_rate=0.0, seed=11)))
    assert (tmp_path / "train.tsv").read_bytes() == (tmp_path / "train.clean.tsv").read_bytes()
