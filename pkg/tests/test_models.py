import math

import numpy as np
import pytest

from pwiser.errors import ConfigError
from pwiser.loss import LossConfig
from pwiser.models import ARCH_CODES, Model, ModelConfig, TaskPredictions
from pwiser.nn import load_tensors
from pwiser.trainer import gradcheck_model, tiny_batch, tiny_model_config

FEATURES = np.array([[0, 1], [2, 3], [1, 1], [3, 0], [2, 2]])


def tiny(arch, **kw):
    base = dict(arch=arch, field_vocab_sizes=(4, 4), embed_dim=2, num_experts=3,
                num_shared_experts=1, num_task_experts=1, expert_widths=(3,), tower_widths=(2,))
    base.update(kw)
    return ModelConfig(**base)


def zero_heads(model):
    for name in model.params.names():
        if "/out/" in name:
            model.params.set(name, np.zeros_like(model.params[name]))


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def dense_ref(x, W, b, relu=True):
    out = []
    for j in range(len(b)):
        z = b[j] + sum(x[i] * W[i][j] for i in range(len(x)))
        out.append(max(z, 0.0) if relu else z)
    return out


def embed_ref(model, row):
    table = model.params["embedding/table"].tolist()
    x = []
    for f, v in enumerate(row):
        x += table[int(model.offsets[f] + v)]
    return x


def tower_ref(model, name, h):
    P = {k: v.tolist() for k, v in model.params.items()}
    for k in range(len(model.cfg.tower_widths)):
        h = dense_ref(h, P[f"tower_{name}/l{k}/W"], P[f"tower_{name}/l{k}/b"])
    return sig(dense_ref(h, P[f"tower_{name}/out/W"], P[f"tower_{name}/out/b"], relu=False)[0])


@pytest.mark.parametrize("arch", ["shared_bottom", "mmoe", "ple"])
def test_zero_heads_give_half(arch):
    model = Model(tiny(arch), seed=1)
    zero_heads(model)
    preds = model.predict(FEATURES)
    np.testing.assert_array_equal(preds.p_ctr, 0.5)
    np.testing.assert_array_equal(preds.p_cvr, 0.5)
    np.testing.assert_array_equal(preds.p_ctcvr, 0.25)


def test_dnn_zero_head_gives_half_and_no_ctcvr():
    model = Model(tiny("dnn"), seed=1)
    zero_heads(model)
    preds = model.predict(FEATURES)
    np.testing.assert_array_equal(preds.p_ctr, 0.5)
    assert preds.p_cvr is None and preds.p_ctcvr is None
    with pytest.raises(ConfigError):
        preds.ctcvr()


@pytest.mark.parametrize("arch", ["shared_bottom", "mmoe", "ple"])
def test_ctcvr_is_exact_product(arch):
    preds = Model(tiny(arch), seed=2).predict(FEATURES)
    np.testing.assert_array_equal(preds.p_ctcvr, preds.p_ctr * preds.p_cvr)
    assert np.all(preds.p_ctcvr <= preds.p_ctr) and np.all(preds.p_ctcvr <= preds.p_cvr)
    for p in (preds.p_ctr, preds.p_cvr, preds.p_ctcvr):
        assert np.all((p > 0) & (p < 1))


def test_shared_bottom_matches_hand_forward():
    model = Model(tiny("shared_bottom"), seed=3)
    P = {k: v.tolist() for k, v in model.params.items()}
    preds = model.predict(FEATURES)
    for i, row in enumerate(FEATURES):
        h = dense_ref(embed_ref(model, row), P["bottom/l0/W"], P["bottom/l0/b"])
        p_ctr, p_cvr = tower_ref(model, "ctr", h), tower_ref(model, "cvr", h)
        assert preds.p_ctr[i] == pytest.approx(p_ctr, rel=1e-12)
        assert preds.p_cvr[i] == pytest.approx(p_cvr, rel=1e-12)
        assert preds.p_ctcvr[i] == pytest.approx(p_ctr * p_cvr, rel=1e-12)


def test_mmoe_matches_hand_forward():
    model = Model(tiny("mmoe"), seed=4)
    P = {k: v.tolist() for k, v in model.params.items()}
    preds = model.predict(FEATURES)
    for i, row in enumerate(FEATURES):
        x = embed_ref(model, row)
        experts = [dense_ref(x, P[f"expert{e}/l0/W"], P[f"expert{e}/l0/b"]) for e in range(3)]
        for task, got in (("ctr", preds.p_ctr[i]), ("cvr", preds.p_cvr[i])):
            logits = dense_ref(x, P[f"gate_{task}/W"], P[f"gate_{task}/b"], relu=False)
            w = [math.exp(v) for v in logits]
            w = [v / sum(w) for v in w]
            mixed = [sum(w[e] * experts[e][j] for e in range(3)) for j in range(3)]
            assert got == pytest.approx(tower_ref(model, task, mixed), rel=1e-12)


def test_ple_matches_hand_forward():
    model = Model(tiny("ple", num_shared_experts=2, num_task_experts=2), seed=5)
    P = {k: v.tolist() for k, v in model.params.items()}
    preds = model.predict(FEATURES)
    for i, row in enumerate(FEATURES):
        x = embed_ref(model, row)

        def expert(prefix):
            return dense_ref(x, P[f"{prefix}/l0/W"], P[f"{prefix}/l0/b"])

        shared = [expert(f"shared_expert{e}") for e in range(2)]
        for task, got in (("ctr", preds.p_ctr[i]), ("cvr", preds.p_cvr[i])):
            pool = [expert(f"{task}_expert{e}") for e in range(2)] + shared
            logits = dense_ref(x, P[f"gate_{task}/W"], P[f"gate_{task}/b"], relu=False)
            w = [math.exp(v) for v in logits]
            w = [v / sum(w) for v in w]
            mixed = [sum(w[e] * pool[e][j] for e in range(4)) for j in range(3)]
            assert got == pytest.approx(tower_ref(model, task, mixed), rel=1e-12)


def test_dnn_matches_hand_forward():
    model = Model(tiny("dnn"), seed=6)
    preds = model.predict(FEATURES)
    for i, row in enumerate(FEATURES):
        assert preds.p_ctr[i] == pytest.approx(tower_ref(model, "ctr", embed_ref(model, row)), rel=1e-12)


def test_single_expert_mmoe_equals_shared_bottom():
    sb = Model(tiny("shared_bottom"), seed=7)
    mm = Model(tiny("mmoe", num_experts=1), seed=8)
    for name in mm.params.names():
        src = name.replace("expert0", "bottom")
        if src in sb.params:
            mm.params.set(name, sb.params[src])
    a, b = sb.predict(FEATURES), mm.predict(FEATURES)
    np.testing.assert_allclose(b.p_ctr, a.p_ctr, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.p_cvr, a.p_cvr, rtol=0, atol=1e-12)


def _randomize_gates(model, rng):
    for name in model.params.names():
        if name.startswith("gate_"):
            model.params.set(name, rng.normal(0, 5, size=model.params[name].shape))


def test_identical_experts_make_gates_irrelevant():
    model = Model(tiny("mmoe", num_experts=4), seed=9)
    for e in range(1, 4):
        for leaf in ("W", "b"):
            model.params.set(f"expert{e}/l0/{leaf}", model.params[f"expert0/l0/{leaf}"])
    before = model.predict(FEATURES)
    _randomize_gates(model, np.random.default_rng(0))
    after = model.predict(FEATURES)
    np.testing.assert_allclose(after.p_ctr, before.p_ctr, rtol=1e-12)
    np.testing.assert_allclose(after.p_cvr, before.p_cvr, rtol=1e-12)


def test_ple_identical_experts_make_gates_irrelevant():
    model = Model(tiny("ple"), seed=10)
    for prefix in ("ctr_expert0", "cvr_expert0"):
        for leaf in ("W", "b"):
            model.params.set(f"{prefix}/l0/{leaf}", model.params[f"shared_expert0/l0/{leaf}"])
    before = model.predict(FEATURES)
    _randomize_gates(model, np.random.default_rng(1))
    after = model.predict(FEATURES)
    np.testing.assert_allclose(after.p_ctr, before.p_ctr, rtol=1e-12)
    np.testing.assert_allclose(after.p_cvr, before.p_cvr, rtol=1e-12)


@pytest.mark.parametrize("kw", [{"num_task_experts": 0}, {"num_shared_experts": 0},
                                {"arch": "masknet"}, {"embed_dim": 0}, {"tower_widths": (0,)}])
def test_bad_config_rejected(kw):
    with pytest.raises(ConfigError):
        Model(tiny(**{"arch": "ple", **kw}))


def test_construction_is_deterministic():
    a = Model(tiny("dnn"), seed=11).predict(FEATURES)
    b = Model(tiny("dnn"), seed=11).predict(FEATURES)
    c = Model(tiny("dnn"), seed=12).predict(FEATURES)
    np.testing.assert_array_equal(a.p_ctr, b.p_ctr)
    assert not np.array_equal(a.p_ctr, c.p_ctr)


def test_features_out_of_vocab():
    model = Model(tiny("dnn"))
    with pytest.raises(IndexError):
        model.predict(np.array([[0, 4]]))
    with pytest.raises(ValueError):
        model.predict(np.array([[0, 1, 2]]))


def test_default_sizes():
    cfg = ModelConfig()
    assert (cfg.embed_dim, cfg.num_experts) == (128, 8)


def test_mmoe_eight_experts_gradcheck():
    cfg = ModelConfig(arch="mmoe", field_vocab_sizes=(8, 8), embed_dim=4, num_experts=8,
                      expert_widths=(4,), tower_widths=(4,))
    model = Model(cfg, seed=0)
    features, y_ctr, y_cvr = tiny_batch(0)
    err, where = gradcheck_model(model, features, y_ctr, y_cvr, LossConfig(lam=0.1))
    assert err < 1e-5, where


@pytest.mark.parametrize("target", ["ctcvr", "both"])
def test_gradcheck_pwiser_on_ctcvr_head(target):
    model = Model(tiny_model_config("ple"), seed=1)
    features, y_ctr, y_cvr = tiny_batch(1)
    err, where = gradcheck_model(model, features, y_ctr, y_cvr,
                                 LossConfig(lam=0.1, pwiser_target=target))
    assert err < 1e-5, where


@pytest.mark.parametrize("arch", ["shared_bottom", "mmoe", "ple", "dnn"])
def test_checkpoint_round_trip(tmp_path, arch):
    model = Model(tiny(arch), seed=13)
    path = tmp_path / f"{arch}.ckpt"
    model.save(path)
    tensors = load_tensors(path)
    assert tensors["meta/arch"][0] == ARCH_CODES[arch]
    back = Model.load(path)
    assert back.cfg == model.cfg
    a, b = model.predict(FEATURES), back.predict(FEATURES)
    np.testing.assert_array_equal(a.p_ctr, b.p_ctr)
    if arch != "dnn":
        np.testing.assert_array_equal(a.p_ctcvr, b.p_ctcvr)


def test_checkpoint_arch_mismatch(tmp_path):
    Model(tiny("mmoe")).save(tmp_path / "m.ckpt")
    with pytest.raises(ConfigError):
        Model.load(tmp_path / "m.ckpt", expect_arch="ple")


def test_task_predictions_derives_ctcvr():
    p = TaskPredictions(np.array([0.5, 0.2]), np.array([0.5, 0.5]))
    np.testing.assert_array_equal(p.p_ctcvr, [0.25, 0.1])
