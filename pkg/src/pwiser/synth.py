"""Synthetic impression logs with a known click model and spurious-click noise.

Each row draws one value per field uniformly. The true click probability is
``sigmoid(click_bias + sum_f click_w[f][value_f])`` and a clicked row converts
with probability ``sigmoid(conv_bias + sum_f conv_w[f][value_f])``. Noise then
turns each unclicked row into a click without conversion with probability
``noise_rate``; conversions are never touched.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import Dataset, write_tsv


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    ``click_bias``/``conv_bias`` of ``None`` are solved so that the expected
    clean CTR equals ``target_ctr`` and the expected conversion rate among
    clicks equals ``target_cvr``. Conversion weights mix the click weights with
    independent noise: ``corr * w_click + sqrt(1 - corr**2) * w_indep``.
    """

    rows: int = 200_000
    num_fields: int = 6
    vocab: int = 50
    click_weight_std: float = 0.5
    conv_weight_std: float = 0.5
    conv_weight_corr: float = 1.0
    target_ctr: float = 0.04
    target_cvr: float = 0.10
    click_bias: float | None = None
    conv_bias: float | None = None
    noise_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.rows < 0 or self.num_fields < 1 or self.vocab < 1:
            raise ValueError("rows >= 0, num_fields >= 1 and vocab >= 1 required")
        if not -1.0 <= self.conv_weight_corr <= 1.0:
            raise ValueError("conv_weight_corr must lie in [-1, 1]")
        for name in ("target_ctr", "target_cvr"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class SynthData:
    noisy: Dataset
    clean: Dataset
    p_ctr: np.ndarray
    p_cvr: np.ndarray
    flipped: np.ndarray

    def raw_features(self):
        """String values as written to TSV, e.g. ``v17``."""
        return np.char.add("v", self.noisy.features.astype(str))


def _solve_bias(logits, target, weights=None):
    def gap(b):
        return np.average(expit(b + logits), weights=weights) - target

    return brentq(gap, -40.0, 40.0, xtol=1e-12)


def generate(spec: SynthSpec) -> SynthData:
    """Draw a noisy dataset, its clean counterpart and the true probabilities."""
    rng = np.random.default_rng(spec.seed)
    F, V = spec.num_fields, spec.vocab
    w_click = rng.normal(0.0, spec.click_weight_std, size=(F, V))
    w_indep = rng.normal(0.0, spec.click_weight_std, size=(F, V))
    w_conv = (spec.conv_weight_corr * w_click
              + np.sqrt(1.0 - spec.conv_weight_corr ** 2) * w_indep)
    if spec.click_weight_std > 0:
        w_conv *= spec.conv_weight_std / spec.click_weight_std
    else:
        w_conv = rng.normal(0.0, spec.conv_weight_std, size=(F, V))

    features = rng.integers(0, V, size=(spec.rows, F))
    fields = np.arange(F)
    click_logit = w_click[fields, features].sum(axis=1)
    conv_logit = w_conv[fields, features].sum(axis=1)

    # biases are calibrated against the exact value distribution, not the sample
    cal = np.random.default_rng([spec.seed, 1]).integers(0, V, size=(100_000, F))
    cal_click = w_click[fields, cal].sum(axis=1)
    cal_conv = w_conv[fields, cal].sum(axis=1)
    click_bias = spec.click_bias
    if click_bias is None:
        click_bias = _solve_bias(cal_click, spec.target_ctr)
    conv_bias = spec.conv_bias
    if conv_bias is None:
        conv_bias = _solve_bias(cal_conv, spec.target_cvr, weights=expit(click_bias + cal_click))

    p_ctr = expit(click_bias + click_logit)
    p_cvr = expit(conv_bias + conv_logit)
    u_click, u_conv, u_noise = rng.random((3, spec.rows))
    y_ctr = (u_click < p_ctr).astype(np.int8)
    y_cvr = (y_ctr * (u_conv < p_cvr)).astype(np.int8)
    flipped = (y_ctr == 0) & (u_noise < spec.noise_rate)
    noisy_ctr = np.where(flipped, 1, y_ctr).astype(np.int8)

    names = tuple(f"f{k}" for k in range(F))
    vocab = (V,) * F
    clean = Dataset(features, y_ctr, y_cvr, names, vocab)
    noisy = Dataset(features, noisy_ctr, y_cvr.copy(), names, vocab)
    return SynthData(noisy, clean, p_ctr, p_cvr, flipped)


def separable_spec(rows=20_000, seed=0, **kw) -> SynthSpec:
    """Noise-free data whose click labels are nearly deterministic in the features."""
    kw.setdefault("click_weight_std", 4.0)
    kw.setdefault("target_ctr", 0.3)
    return SynthSpec(rows=rows, noise_rate=0.0, seed=seed, **kw)


def write_synth(out_dir, synth: SynthData, valid_fraction=0.2, seed=0):
    """Write canonical TSVs (noisy and clean labels) plus a truth sidecar.

    Files: ``train.tsv``, ``train.clean.tsv``, ``valid.tsv``, ``valid.clean.tsv``
    and ``truth.tsv`` with ``row, split, y_ctr, y_cvr, p_ctr, p_cvr`` of the
    clean labels. Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(synth.noisy)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_valid = int(round(n * valid_fraction))
    splits = {"train": np.sort(order[n_valid:]), "valid": np.sort(order[:n_valid])}
    raw = synth.raw_features()
    names = synth.noisy.field_names
    written = []
    for split, idx in splits.items():
        for suffix, ds in (("", synth.noisy), (".clean", synth.clean)):
            path = out / f"{split}{suffix}.tsv"
            write_tsv(path, names, raw[idx], ds.y_ctr[idx], ds.y_cvr[idx])
            written.append(path)
    split_of = np.empty(n, dtype=object)
    for split, idx in splits.items():
        split_of[idx] = split
    truth = out / "truth.tsv"
    with open(truth, "w", encoding="utf-8") as fh:
        fh.write("row\tsplit\ty_ctr\ty_cvr\tp_ctr\tp_cvr\n")
        for i in range(n):
            fh.write(
                f"{i}\t{split_of[i]}\t{synth.clean.y_ctr[i]}\t{synth.clean.y_cvr[i]}\t"
                f"{float(synth.p_ctr[i])!r}\t{float(synth.p_cvr[i])!r}\n"
            )
    written.append(truth)
    return written
