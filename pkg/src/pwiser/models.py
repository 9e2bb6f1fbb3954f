"""Shared-Bottom, MMoE, PLE (single CGC layer) and single-task DNN.

All architectures embed each categorical field, concatenate the embeddings and
end in sigmoid heads. Multi-task models emit a CTR and a CVR head and derive
``p_ctcvr = p_ctr * p_cvr``; the DNN emits only ``p_ctr``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError

ARCHS = ("shared_bottom", "mmoe", "ple", "dnn")
# codes stored in the "meta/arch" checkpoint tensor
ARCH_CODES = {"shared_bottom": 0, "mmoe": 1, "ple": 2, "dnn": 3}
TASKS = ("ctr", "cvr")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mmoe"
    field_vocab_sizes: tuple = ()
    embed_dim: int = 128
    num_experts: int = 8
    num_shared_experts: int = 4
    num_task_experts: int = 2
    expert_widths: tuple = (128,)
    tower_widths: tuple = (256, 128)

    def __post_init__(self):
        object.__setattr__(self, "field_vocab_sizes", tuple(int(v) for v in self.field_vocab_sizes))
        object.__setattr__(self, "expert_widths", tuple(int(v) for v in self.expert_widths))
        object.__setattr__(self, "tower_widths", tuple(int(v) for v in self.tower_widths))
        if self.arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {self.arch!r}", key="model.arch")
        for key in ("embed_dim", "num_experts", "num_shared_experts", "num_task_experts"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"model.{key} must be a positive integer", key=f"model.{key}")
        if any(v < 1 for v in self.field_vocab_sizes + self.expert_widths + self.tower_widths):
            raise ConfigError("vocab sizes and layer widths must be positive", key="model")

    @property
    def multitask(self) -> bool:
        return self.arch != "dnn"

    def with_vocab(self, sizes) -> "ModelConfig":
        return replace(self, field_vocab_sizes=tuple(sizes))


@dataclass
class TaskPredictions:
    p_ctr: np.ndarray
    p_cvr: np.ndarray | None = None
    p_ctcvr: np.ndarray | None = None

    def __post_init__(self):
        if self.p_cvr is not None and self.p_ctcvr is None:
            self.p_ctcvr = self.p_ctr * self.p_cvr

    @property
    def multitask(self) -> bool:
        return self.p_cvr is not None

    def ctcvr(self) -> np.ndarray:
        if self.p_ctcvr is None:
            raise ConfigError("single-task model has no CTCVR head", key="model.arch")
        return self.p_ctcvr


@dataclass
class ForwardPass:
    """Predictions plus the head Vars to seed a backward pass from."""

    preds: TaskPredictions
    heads: dict = field(default_factory=dict)


class Model:
    """One of the four architectures over hashed categorical fields.

    Parameters live in ``self.params``; names are ``embedding/table``,
    ``<block>/l<k>/W`` and ``<block>/l<k>/b``.
    """

    def __init__(self, cfg: ModelConfig, seed=0):
        if not cfg.field_vocab_sizes:
            raise ConfigError("model needs at least one field", key="model.field_vocab_sizes")
        if cfg.arch == "ple" and (cfg.num_task_experts < 1 or cfg.num_shared_experts < 1):
            raise ConfigError("PLE needs >= 1 shared and >= 1 task expert per task")
        self.cfg = cfg
        self.seed = seed
        self.offsets = np.concatenate(([0], np.cumsum(cfg.field_vocab_sizes)[:-1])).astype(np.int64)
        self.params = nn.ParamStore()
        self._rng = np.random.default_rng([seed, 0])
        self._build()
        del self._rng

    # -- construction ---------------------------------------------------------

    @property
    def input_dim(self):
        return len(self.cfg.field_vocab_sizes) * self.cfg.embed_dim

    def _mlp(self, prefix, in_dim, widths):
        for k, width in enumerate(widths):
            self._layer(f"{prefix}/l{k}", in_dim, width)
            in_dim = width
        return in_dim

    def _layer(self, prefix, in_dim, out_dim):
        self.params.add(f"{prefix}/W", nn.glorot_uniform(self._rng, in_dim, out_dim))
        self.params.add(f"{prefix}/b", np.zeros(out_dim), decay=False)

    def _tower(self, name, in_dim):
        last = self._mlp(f"tower_{name}", in_dim, self.cfg.tower_widths)
        self._layer(f"tower_{name}/out", last, 1)

    def _build(self):
        cfg = self.cfg
        self.params.add(
            "embedding/table",
            nn.embedding_normal(self._rng, sum(cfg.field_vocab_sizes), cfg.embed_dim),
        )
        d = self.input_dim
        if cfg.arch == "dnn":
            self._tower("ctr", d)
            return
        if cfg.arch == "shared_bottom":
            h = self._mlp("bottom", d, cfg.expert_widths)
        elif cfg.arch == "mmoe":
            for e in range(cfg.num_experts):
                h = self._mlp(f"expert{e}", d, cfg.expert_widths)
            for task in TASKS:
                self._layer(f"gate_{task}", d, cfg.num_experts)
        else:
            for e in range(cfg.num_shared_experts):
                h = self._mlp(f"shared_expert{e}", d, cfg.expert_widths)
            for task in TASKS:
                for e in range(cfg.num_task_experts):
                    h = self._mlp(f"{task}_expert{e}", d, cfg.expert_widths)
                self._layer(f"gate_{task}", d, cfg.num_task_experts + cfg.num_shared_experts)
        for task in TASKS:
            self._tower(task, h)

    # -- forward --------------------------------------------------------------

    def _p(self, name):
        return self._vars.setdefault(name, self.params.var(name))

    def _apply_mlp(self, tape, prefix, x, widths):
        for k in range(len(widths)):
            x = nn.dense(tape, x, self._p(f"{prefix}/l{k}/W"), self._p(f"{prefix}/l{k}/b"), "relu")
        return x

    def _apply_tower(self, tape, name, x):
        x = self._apply_mlp(tape, f"tower_{name}", x, self.cfg.tower_widths)
        logit = nn.dense(tape, x, self._p(f"tower_{name}/out/W"), self._p(f"tower_{name}/out/b"))
        return nn.sigmoid(tape, nn.squeeze_column(tape, logit))

    def _gated(self, tape, task, emb, experts, select=None):
        gate_logits = nn.dense(tape, emb, self._p(f"gate_{task}/W"), self._p(f"gate_{task}/b"))
        return nn.mixture(tape, nn.softmax(tape, gate_logits), experts, select)

    def _apply_bank(self, tape, prefixes, x):
        """Run the expert MLPs named by ``prefixes`` side by side: (n, E, h)."""
        for k in range(len(self.cfg.expert_widths)):
            Ws = [self._p(f"{p}/l{k}/W") for p in prefixes]
            bs = [self._p(f"{p}/l{k}/b") for p in prefixes]
            x = nn.expert_bank(tape, x, Ws, bs, "relu")
        return x

    def forward(self, features, tape=None) -> ForwardPass:
        """Run the network on an (n, F) array of per-field indices."""
        cfg = self.cfg
        features = np.asarray(features, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != len(cfg.field_vocab_sizes):
            raise ValueError(
                f"expected features of shape (n, {len(cfg.field_vocab_sizes)}), got {features.shape}"
            )
        vocab = np.asarray(cfg.field_vocab_sizes)
        if features.size and ((features < 0).any() or (features >= vocab).any()):
            raise IndexError("feature index outside its field vocabulary")
        self._vars = {}
        try:
            emb = nn.embed_lookup(tape, self._p("embedding/table"), features + self.offsets, flatten=True)
            if cfg.arch == "dnn":
                p_ctr = self._apply_tower(tape, "ctr", emb)
                return ForwardPass(TaskPredictions(p_ctr.value), {"ctr": p_ctr})

            if cfg.arch == "shared_bottom":
                shared = self._apply_mlp(tape, "bottom", emb, cfg.expert_widths)
                task_inputs = {t: shared for t in TASKS}
            elif cfg.arch == "mmoe":
                experts = self._apply_bank(tape, [f"expert{e}" for e in range(cfg.num_experts)], emb)
                task_inputs = {t: self._gated(tape, t, emb, experts) for t in TASKS}
            else:
                # bank layout: shared experts, then each task's own experts
                S, T = cfg.num_shared_experts, cfg.num_task_experts
                names = [f"shared_expert{e}" for e in range(S)]
                for t in TASKS:
                    names += [f"{t}_expert{e}" for e in range(T)]
                experts = self._apply_bank(tape, names, emb)
                task_inputs = {}
                for k, t in enumerate(TASKS):
                    own = list(range(S + k * T, S + (k + 1) * T))
                    task_inputs[t] = self._gated(tape, t, emb, experts, own + list(range(S)))

            p_ctr = self._apply_tower(tape, "ctr", task_inputs["ctr"])
            p_cvr = self._apply_tower(tape, "cvr", task_inputs["cvr"])
            p_ctcvr = nn.multiply(tape, p_ctr, p_cvr)
            preds = TaskPredictions(p_ctr.value, p_cvr.value, p_ctcvr.value)
            return ForwardPass(preds, {"ctr": p_ctr, "cvr": p_cvr, "ctcvr": p_ctcvr})
        finally:
            del self._vars

    def predict(self, features, batch_size=8192) -> TaskPredictions:
        """Inference in chunks, without recording a tape."""
        features = np.asarray(features, dtype=np.int64)
        chunks = [
            self.forward(features[lo:lo + batch_size]).preds
            for lo in range(0, max(len(features), 1), batch_size)
        ]
        p_ctr = np.concatenate([c.p_ctr for c in chunks])
        if not self.cfg.multitask:
            return TaskPredictions(p_ctr)
        return TaskPredictions(p_ctr, np.concatenate([c.p_cvr for c in chunks]))

    # -- checkpoint -----------------------------------------------------------

    def meta_tensors(self):
        cfg = self.cfg
        return [
            ("meta/arch", np.array([ARCH_CODES[cfg.arch]], dtype=np.float64)),
            ("meta/embed_dim", np.array([cfg.embed_dim], dtype=np.float64)),
            ("meta/expert_widths", np.array(cfg.expert_widths, dtype=np.float64)),
            ("meta/field_vocab_sizes", np.array(cfg.field_vocab_sizes, dtype=np.float64)),
            ("meta/num_experts", np.array([cfg.num_experts], dtype=np.float64)),
            ("meta/num_shared_experts", np.array([cfg.num_shared_experts], dtype=np.float64)),
            ("meta/num_task_experts", np.array([cfg.num_task_experts], dtype=np.float64)),
            ("meta/seed", np.array([self.seed], dtype=np.float64)),
            ("meta/tower_widths", np.array(cfg.tower_widths, dtype=np.float64)),
        ]

    def save(self, path):
        nn.save_tensors(path, self.meta_tensors() + self.params.items())

    @classmethod
    def load(cls, path, expect_arch=None) -> "Model":
        tensors = nn.load_tensors(path)
        return cls.from_tensors(tensors, expect_arch)

    @classmethod
    def from_tensors(cls, tensors, expect_arch=None) -> "Model":
        try:
            code = int(tensors["meta/arch"][0])
            arch = {v: k for k, v in ARCH_CODES.items()}[code]
        except KeyError:
            raise ConfigError("checkpoint lacks a valid meta/arch tensor", key="meta/arch") from None
        if expect_arch is not None and arch != expect_arch:
            raise ConfigError(f"checkpoint holds {arch!r}, expected {expect_arch!r}", key="model.arch")

        def ints(name):
            return tuple(int(v) for v in tensors[name])

        cfg = ModelConfig(
            arch=arch,
            field_vocab_sizes=ints("meta/field_vocab_sizes"),
            embed_dim=ints("meta/embed_dim")[0],
            num_experts=ints("meta/num_experts")[0],
            num_shared_experts=ints("meta/num_shared_experts")[0],
            num_task_experts=ints("meta/num_task_experts")[0],
            expert_widths=ints("meta/expert_widths"),
            tower_widths=ints("meta/tower_widths"),
        )
        model = cls(cfg, seed=ints("meta/seed")[0])
        model.params.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("meta/")})
        return model
