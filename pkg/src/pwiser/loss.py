"""BCE and pairwise ranking (PWiseR) losses with analytic gradients.

All losses take post-sigmoid probabilities and return the loss value together
with d(loss)/d(score) for every input score, so the caller can chain the result
through its own backward pass.

The pairwise term compares every conversion sample (``cvr``) against every
clicked-without-conversion sample (``ctnocvr``) and every unclicked sample
(``zeros``) in the batch::

    term1 = 1/A * sum_a sum_b [active(a, b, m1)] * (a - b + m1)**2
    term2 = 1/Z * sum_z sum_b [active(z, b, m2)] * (z - b + m2)**2

where ``a``, ``b``, ``z`` range over the ctnocvr, cvr and zeros scores. With the
default ``margin_rule="hinge"`` a pair is active when ``b < a + m``, which makes
each summand ``max(0, a - b + m)**2``. ``margin_rule="literal"`` activates a pair
only when ``b < a - m`` (the penalty keeps the same form, so the loss jumps by
``4 m**2`` at the activation boundary).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BCE_EPS = 1e-7

KERNELS = ("naive", "fast")
TARGETS = ("ctr", "ctcvr", "both")
MARGIN_RULES = ("hinge", "literal")

# naive kernel materialises at most this many pairs at a time
_NAIVE_BLOCK = 1 << 21


@dataclass(frozen=True)
class LossConfig:
    """Weights and margins of ``BCE + lam * PWiseR``.

    ``lam`` is the balancing term (``loss.lambda`` in config files).
    """

    lam: float = 0.1
    m1: float = 0.3
    m2: float = 0.3
    pwiser_target: str = "ctr"
    kernel: str = "fast"
    margin_rule: str = "hinge"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"loss.lambda must be >= 0, got {self.lam}", key="loss.lambda")
        for key, m in (("loss.m1", self.m1), ("loss.m2", self.m2)):
            if not 0.0 <= m < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1), got {m}", key=key)
        if self.pwiser_target not in TARGETS:
            raise ConfigError(
                f"loss.pwiser_target must be one of {TARGETS}, got {self.pwiser_target!r}",
                key="loss.pwiser_target",
            )
        if self.kernel not in KERNELS:
            raise ConfigError(f"loss.kernel must be one of {KERNELS}", key="loss.kernel")
        if self.margin_rule not in MARGIN_RULES:
            raise ConfigError(
                f"loss.margin_rule must be one of {MARGIN_RULES}", key="loss.margin_rule"
            )


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class ScenarioPartition:
    """Scores of one batch split into the three click/conversion scenarios.

    The ``idx_*`` arrays map each group entry back to its position in the
    originating batch of length ``size``; gradients are scattered through them.
    """

    scores_ctnocvr: np.ndarray
    scores_cvr: np.ndarray
    scores_zeros: np.ndarray
    idx_ctnocvr: np.ndarray
    idx_cvr: np.ndarray
    idx_zeros: np.ndarray
    size: int

    @classmethod
    def from_labels(cls, scores, y_ctr, y_cvr) -> "ScenarioPartition":
        scores = np.asarray(scores, dtype=np.float64)
        y_ctr = np.asarray(y_ctr)
        y_cvr = np.asarray(y_cvr)
        if not (scores.ndim == 1 and scores.shape == y_ctr.shape == y_cvr.shape):
            raise ValueError(
                f"scores/labels misaligned: {scores.shape}, {y_ctr.shape}, {y_cvr.shape}"
            )
        cvr = y_cvr == 1
        ctnocvr = (y_ctr == 1) & ~cvr
        zeros = (y_ctr == 0) & ~cvr
        idx = [np.flatnonzero(mask) for mask in (ctnocvr, cvr, zeros)]
        return cls(
            scores[idx[0]], scores[idx[1]], scores[idx[2]], idx[0], idx[1], idx[2], len(scores)
        )

    @classmethod
    def from_groups(cls, ctnocvr=(), cvr=(), zeros=()) -> "ScenarioPartition":
        """Build a partition from explicit group scores.

        The implied batch is ``ctnocvr + cvr + zeros`` in that order.
        """
        groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in (ctnocvr, cvr, zeros)]
        sizes = [len(g) for g in groups]
        offsets = np.cumsum([0] + sizes)
        idx = [np.arange(offsets[k], offsets[k + 1]) for k in range(3)]
        return cls(*groups, *idx, int(offsets[-1]))

    def scores(self) -> np.ndarray:
        """Scores in original batch order."""
        out = np.empty(self.size)
        out[self.idx_ctnocvr] = self.scores_ctnocvr
        out[self.idx_cvr] = self.scores_cvr
        out[self.idx_zeros] = self.scores_zeros
        return out


def _check_labels_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"length mismatch: scores {scores.shape} vs labels {labels.shape}")
    if scores.size == 0:
        raise ValueError("bce needs at least one sample")
    return scores, labels


def bce(scores, labels) -> LossResult:
    """Mean binary cross entropy on probabilities, clamped to [eps, 1 - eps]."""
    scores, labels = _check_labels_scores(scores, labels)
    n = scores.size
    p = np.clip(scores, BCE_EPS, 1.0 - BCE_EPS)
    value = -np.sum(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)) / n
    grad = (p - labels) / (n * p * (1.0 - p))
    return LossResult(float(value), grad)


def _check_partition(part: ScenarioPartition, m1: float, m2: float):
    for name, m in (("m1", m1), ("m2", m2)):
        if not 0.0 <= m < 1.0:
            raise ValueError(f"margin {name}={m} outside [0, 1)")
    for g in (part.scores_ctnocvr, part.scores_cvr, part.scores_zeros):
        if g.size and not (np.all(g > 0.0) and np.all(g < 1.0)):
            raise ValueError("pwiser scores must lie strictly inside (0, 1)")


def _threshold_shift(m, margin_rule):
    # pair (s, b) is active iff b < s + shift
    return m if margin_rule == "hinge" else -m


def _pair_term_naive(outer, inner, m, margin_rule):
    """Blocked O(len(outer) * len(inner)) evaluation of one pairwise term."""
    n_out, n_in = outer.size, inner.size
    g_out = np.zeros(n_out)
    g_in = np.zeros(n_in)
    if n_out == 0 or n_in == 0:
        return 0.0, g_out, g_in
    shift = _threshold_shift(m, margin_rule)
    total = 0.0
    step = max(1, _NAIVE_BLOCK // n_in)
    for lo in range(0, n_out, step):
        s = outer[lo:lo + step, None]
        gap = s + m - inner[None, :]
        gap = np.where(inner[None, :] < s + shift, gap, 0.0)
        total += np.sum(gap * gap)
        g_out[lo:lo + step] = gap.sum(axis=1)
        g_in -= gap.sum(axis=0)
    return total / n_out, 2.0 * g_out / n_out, 2.0 * g_in / n_out


def _pair_term_fast(outer, inner, m, margin_rule):
    """Sorted prefix-sum evaluation of one pairwise term.

    For an outer score s with c = s + m, the active inner scores b give
    sum (c - b)^2 = k*c^2 - 2*c*S1 + S2 with k, S1, S2 the count, sum and sum of
    squares of the active b; the active set is a prefix of the sorted inner
    scores. Inner gradients use suffix sums over outer scores sorted by c.
    """
    n_out, n_in = outer.size, inner.size
    if n_out == 0 or n_in == 0:
        return 0.0, np.zeros(n_out), np.zeros(n_in)
    shift = _threshold_shift(m, margin_rule)

    b_sorted = np.sort(inner)
    s1 = np.concatenate(([0.0], np.cumsum(b_sorted)))
    s2 = np.concatenate(([0.0], np.cumsum(b_sorted * b_sorted)))
    c = outer + m
    k = np.searchsorted(b_sorted, outer + shift, side="left")
    per_outer = k * c * c - 2.0 * c * s1[k] + s2[k]
    # clip cancellation noise; each per-outer sum of squares is >= 0
    value = float(np.sum(np.maximum(per_outer, 0.0))) / n_out
    g_out = 2.0 * (k * c - s1[k]) / n_out

    t = outer + shift
    order = np.argsort(t, kind="stable")
    t_sorted = t[order]
    c_sorted = c[order]
    c_suffix = np.concatenate((np.cumsum(c_sorted[::-1])[::-1], [0.0]))
    first = np.searchsorted(t_sorted, inner, side="right")
    cnt = n_out - first
    g_in = -2.0 * (c_suffix[first] - cnt * inner) / n_out
    return value, g_out, g_in


_TERM_KERNELS = {"naive": _pair_term_naive, "fast": _pair_term_fast}


def pwiser(part: ScenarioPartition, m1: float, m2: float, kernel="fast",
           margin_rule="hinge") -> LossResult:
    """PWiseR value and gradient w.r.t. every score of the originating batch."""
    _check_partition(part, m1, m2)
    if margin_rule not in MARGIN_RULES:
        raise ValueError(f"unknown margin rule {margin_rule!r}")
    term = _TERM_KERNELS[kernel]
    v1, g_a, g_b1 = term(part.scores_ctnocvr, part.scores_cvr, m1, margin_rule)
    v2, g_z, g_b2 = term(part.scores_zeros, part.scores_cvr, m2, margin_rule)
    grad = np.zeros(part.size)
    grad[part.idx_ctnocvr] = g_a
    grad[part.idx_cvr] = g_b1 + g_b2
    grad[part.idx_zeros] = g_z
    return LossResult(v1 + v2, grad)


def pwiser_naive(part, m1, m2, margin_rule="hinge") -> LossResult:
    return pwiser(part, m1, m2, kernel="naive", margin_rule=margin_rule)


def pwiser_fast(part, m1, m2, margin_rule="hinge") -> LossResult:
    return pwiser(part, m1, m2, kernel="fast", margin_rule=margin_rule)


@dataclass
class CombinedLoss:
    """Value of ``BCE + lam * PWiseR`` with its components and per-head gradients.

    ``grads`` maps a head name (``"ctr"``, ``"ctcvr"``) to d(total)/d(probability).
    """

    value: float
    bce_ctr: float
    bce_ctcvr: float | None
    pwiser: float
    grads: dict = field(default_factory=dict)

    @property
    def bce(self) -> float:
        return self.bce_ctr + (self.bce_ctcvr or 0.0)


def combined_loss(preds, y_ctr, y_cvr, cfg: LossConfig) -> CombinedLoss:
    """Total training loss for MTL (``preds.p_ctcvr`` present) or STL predictions.

    CTR is trained on ``y_ctr``, CTCVR on ``y_ctr * y_cvr`` over all impressions,
    and PWiseR partitions the selected head's scores by both labels.
    """
    y_ctr = np.asarray(y_ctr, dtype=np.float64)
    y_cvr = np.asarray(y_cvr, dtype=np.float64)
    mtl = getattr(preds, "p_ctcvr", None) is not None
    if not mtl and cfg.pwiser_target != "ctr":
        raise ConfigError(
            f"pwiser_target={cfg.pwiser_target!r} needs a CTCVR head (single-task model)",
            key="loss.pwiser_target",
        )

    ctr = bce(preds.p_ctr, y_ctr)
    grads = {"ctr": ctr.grad}
    bce_ctcvr = None
    if mtl:
        ctcvr = bce(preds.p_ctcvr, y_ctr * y_cvr)
        grads["ctcvr"] = ctcvr.grad
        bce_ctcvr = ctcvr.value

    heads = ["ctr", "ctcvr"] if cfg.pwiser_target == "both" else [cfg.pwiser_target]
    pw_value = 0.0
    for head in heads:
        scores = preds.p_ctr if head == "ctr" else preds.p_ctcvr
        part = ScenarioPartition.from_labels(scores, y_ctr, y_cvr)
        res = pwiser(part, cfg.m1, cfg.m2, kernel=cfg.kernel, margin_rule=cfg.margin_rule)
        pw_value += res.value
        if cfg.lam != 0.0:
            grads[head] = grads[head] + cfg.lam * res.grad

    value = ctr.value + (bce_ctcvr or 0.0) + cfg.lam * pw_value
    return CombinedLoss(value, ctr.value, bce_ctcvr, pw_value, grads)
