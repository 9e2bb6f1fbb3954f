"""Training loop, gradient checking and grid search."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, batch_iter
from .errors import ConfigError, NumericalError
from .loss import CombinedLoss, LossConfig, combined_loss
from .metrics import EvalReport, evaluate
from .models import ARCHS, Model, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EarlyStop:
    metric: str = "ctr_auc"
    patience: int = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2048
    lr: float = 1e-3
    weight_decay: float = 1e-6
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    eval_every: int = 1
    early_stop: EarlyStop | None = None
    shuffle: bool = True

    def __post_init__(self):
        for key in ("epochs", "batch_size", "eval_every"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"train.{key} must be >= 1", key=f"train.{key}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("train.lr must be finite and > 0", key="train.lr")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ConfigError("train.weight_decay must be finite and >= 0", key="train.weight_decay")
        if self.model.arch == "dnn" and self.loss.pwiser_target != "ctr":
            raise ConfigError("dnn has only a CTR head; use loss.pwiser_target=ctr",
                              key="loss.pwiser_target")


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    bce: float
    pwiser: float
    total: float
    pwiser_min: float
    valid: EvalReport | None = None

    COLUMNS = ("epoch", "steps", "train_bce", "train_pwiser", "train_total",
               "valid_auc_ctr", "valid_auc_ctcvr")

    def row(self, sep="\t") -> str:
        def auc(v):
            return "" if v is None else f"{v:.6f}"

        va = self.valid
        cells = [str(self.epoch), str(self.steps), repr(self.bce), repr(self.pwiser), repr(self.total),
                 auc(va.auc_ctr) if va else "", auc(va.auc_ctcvr) if va else ""]
        return sep.join(cells)


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int | None
    best_state: dict | None

    def best_model(self) -> Model:
        if self.best_state is None:
            return self.model
        m = Model(self.model.cfg, seed=self.model.seed)
        m.params.load_state_dict(self.best_state)
        return m

    def history_text(self, sep="\t") -> str:
        lines = [sep.join(EpochRecord.COLUMNS)] + [r.row(sep) for r in self.history]
        return "\n".join(lines) + "\n"


def forward_backward(model: Model, features, y_ctr, y_cvr, loss_cfg: LossConfig,
                     backward=True, batch_index=None) -> CombinedLoss:
    """One forward pass, the combined loss and (optionally) the backward pass.

    Parameter gradients accumulate into ``model.params``.
    """
    tape = nn.Tape() if backward else None
    fp = model.forward(features, tape)
    for name in ("p_ctr", "p_cvr"):
        p = getattr(fp.preds, name)
        if p is not None and not np.all(np.isfinite(p)):
            raise NumericalError(f"{name} is not finite at batch {batch_index}",
                                 component=name, batch_index=batch_index)
    res = combined_loss(fp.preds, y_ctr, y_cvr, loss_cfg)
    if backward:
        seeds = [(fp.heads[head], g) for head, g in res.grads.items()]
        tape.backward(seeds)
    return res


def _check_finite(res: CombinedLoss, batch_index):
    parts = [("bce_ctr", res.bce_ctr), ("bce_ctcvr", res.bce_ctcvr), ("pwiser", res.pwiser)]
    for name, value in parts:
        if value is not None and not math.isfinite(value):
            raise NumericalError(
                f"{name} is {value} at batch {batch_index}", component=name, batch_index=batch_index
            )


def make_optimizer(cfg: TrainConfig):
    return nn.Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)


def build_model(cfg: TrainConfig, dataset: Dataset) -> Model:
    model_cfg = cfg.model
    if not model_cfg.field_vocab_sizes:
        model_cfg = model_cfg.with_vocab(dataset.vocab_sizes)
    return Model(model_cfg, seed=cfg.seed)


def train(train_data: Dataset, valid_data: Dataset | None, cfg: TrainConfig, out_dir=None,
          model: Model | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, evaluating on ``valid_data`` after each.

    With ``out_dir`` the best-by-validation and final checkpoints plus the
    history are written there.
    """
    if len(train_data) == 0:
        raise ValueError("training data is empty")
    model = model or build_model(cfg, train_data)
    opt = make_optimizer(cfg)
    history = []
    best_auc, best_epoch, best_state = -math.inf, None, None
    stale = 0
    batch_index = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        pw_min = math.inf
        steps = 0
        for idx in batch_iter(len(train_data), cfg.batch_size, seed=[cfg.seed, 1, epoch],
                              shuffle=cfg.shuffle):
            res = forward_backward(model, train_data.features[idx], train_data.y_ctr[idx],
                                   train_data.y_cvr[idx], cfg.loss, batch_index=batch_index)
            _check_finite(res, batch_index)
            opt.step(model.params)
            sums += (res.bce, res.pwiser, res.value)
            pw_min = min(pw_min, res.pwiser)
            steps += 1
            batch_index += 1
        means = sums / steps
        rec = EpochRecord(epoch, steps, float(means[0]), float(means[1]), float(means[2]), pw_min)
        if valid_data is not None and len(valid_data) and epoch % cfg.eval_every == 0:
            rec.valid = evaluate(model, valid_data)
            score = rec.valid.auc_ctr if rec.valid.auc_ctr is not None else -math.inf
            if score > best_auc:
                best_auc, best_epoch, best_state, stale = score, epoch, model.params.state_dict(), 0
            else:
                stale += 1
        history.append(rec)
        log.info("epoch %d: %s", epoch, rec.row(" "))
        if cfg.early_stop is not None and stale >= cfg.early_stop.patience:
            break

    result = TrainResult(model, history, best_epoch, best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "final.ckpt")
        result.best_model().save(out / "best.ckpt")
        (out / "history.tsv").write_text(result.history_text(), encoding="utf-8")
    return result


# -- gradient check ----------------------------------------------------------

GRADCHECK_H = 1e-6
# denominators below this are treated as absolute error
GRADCHECK_FLOOR = 1e-4
GRADCHECK_MAX_PARAMS = 5_000


def tiny_model_config(arch, seed=0) -> ModelConfig:
    return ModelConfig(arch=arch, field_vocab_sizes=(8, 8), embed_dim=4, num_experts=2,
                       num_shared_experts=1, num_task_experts=1, expert_widths=(4,),
                       tower_widths=(4,))


def tiny_batch(seed=0, n=16, vocab=8, fields=2):
    """A batch that covers all three click/conversion scenarios."""
    rng = np.random.default_rng([seed, 3])
    features = rng.integers(0, vocab, size=(n, fields))
    y_ctr = np.array([0, 1, 1] * (n // 3) + [0] * (n % 3), dtype=np.int8)
    y_cvr = np.array([0, 0, 1] * (n // 3) + [0] * (n % 3), dtype=np.int8)
    return features, y_ctr, y_cvr


@dataclass
class GradcheckCase:
    arch: str
    lam: float
    max_rel_err: float
    worst_param: str
    num_params: int


def gradcheck_model(model: Model, features, y_ctr, y_cvr, loss_cfg: LossConfig,
                    h=GRADCHECK_H, floor=GRADCHECK_FLOOR):
    """Largest relative error between analytic and central-difference gradients.

    Relative error of an entry is ``|a - f| / max(|a|, |f|, floor)``.
    """
    if model.params.num_values() > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck model has more than {GRADCHECK_MAX_PARAMS} parameters")
    model.params.zero_grad()
    forward_backward(model, features, y_ctr, y_cvr, loss_cfg)
    worst, worst_name = 0.0, ""
    for name in model.params.names():
        p = model.params[name]
        analytic = model.params.grad(name).copy()
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = forward_backward(model, features, y_ctr, y_cvr, loss_cfg, backward=False).value
            flat[k] = orig - h
            down = forward_backward(model, features, y_ctr, y_cvr, loss_cfg, backward=False).value
            flat[k] = orig
            fd = (up - down) / (2 * h)
            a = analytic.reshape(-1)[k]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            if err > worst:
                worst, worst_name = err, f"{name}[{k}]"
    model.params.zero_grad()
    return worst, worst_name


def gradcheck(seed=0, archs=ARCHS, lams=(0.0, 0.1), m1=0.3, m2=0.3) -> list:
    """Finite-difference check of every parameter for each architecture and lambda."""
    features, y_ctr, y_cvr = tiny_batch(seed)
    cases = []
    for arch in archs:
        for lam in lams:
            model = Model(tiny_model_config(arch), seed=seed)
            # spread the probabilities so the pairwise term has active and inactive pairs
            _perturb_heads(model, seed)
            loss_cfg = LossConfig(lam=lam, m1=m1, m2=m2)
            err, where = gradcheck_model(model, features, y_ctr, y_cvr, loss_cfg)
            cases.append(GradcheckCase(arch, lam, err, where, model.params.num_values()))
    return cases


def _perturb_heads(model: Model, seed):
    rng = np.random.default_rng([seed, 4])
    for name in model.params.names():
        if name.endswith("/out/b") or name.endswith("/out/W"):
            p = model.params[name]
            model.params.set(name, p + rng.normal(0.0, 1.0, size=p.shape))


def format_gradcheck(cases) -> str:
    lines = ["arch\tlambda\tparams\tmax_rel_err\tworst"]
    lines += [f"{c.arch}\t{c.lam}\t{c.num_params}\t{c.max_rel_err:.3e}\t{c.worst_param}" for c in cases]
    return "\n".join(lines) + "\n"


# -- grid search ---------------------------------------------------------------

@dataclass
class GridCell:
    lam: float
    m1: float
    m2: float
    auc_ctr: float | None = None
    auc_ctcvr: float | None = None
    error: str | None = None


def grid_search(train_data, valid_data, cfg: TrainConfig, lams, m1s, m2s, on_cell=None) -> list:
    """Train and evaluate one model per (lambda, m1, m2); best validation CTR AUC first.

    A failing cell is recorded with its error and the search continues.
    """
    cells = []
    for lam in lams:
        for m1 in m1s:
            for m2 in m2s:
                cell = GridCell(lam, m1, m2)
                try:
                    cell_cfg = replace(cfg, loss=replace(cfg.loss, lam=lam, m1=m1, m2=m2))
                    result = train(train_data, valid_data, cell_cfg)
                    rep = result.history[-1].valid or evaluate(result.model, valid_data)
                    cell.auc_ctr, cell.auc_ctcvr = rep.auc_ctr, rep.auc_ctcvr
                except (ValueError, ArithmeticError) as exc:
                    cell.error = f"{type(exc).__name__}: {exc}"
                cells.append(cell)
                if on_cell is not None:
                    on_cell(cell)
    return sorted(cells, key=lambda c: -(c.auc_ctr if c.auc_ctr is not None else -math.inf))
