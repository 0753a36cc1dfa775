"""Mini-batch gradient-descent trainer with validation early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from vizrec.checkpoint import load_checkpoint
from vizrec.dataset import SplitDataset, VisualFeatureStore
from vizrec.evaluation import rmse_values
from vizrec.models import (
    DEFAULT_LATENT_DIM,
    DEFAULT_VISUAL_DIM,
    ModelKind,
    ModelParams,
    Regularization,
    init_params,
    loss_and_grad,
    predict_batch,
    regularizer,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
OPTIMIZERS = ("sgd", "momentum", "adam")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model_kind: ModelKind = ModelKind.MF
    latent_dim: int = DEFAULT_LATENT_DIM
    visual_dim: int = DEFAULT_VISUAL_DIM
    tower_widths: tuple[int, ...] | None = None
    learning_rate: float = 0.01
    lambda_u: float = 0.0
    lambda_v: float = 0.0
    lambda_net: float = 0.0
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    clamp_eval: bool = False
    optimizer: str = "sgd"
    momentum: float = 0.9
    init_std: float = 0.01
    tower_init: str = "fixed"
    use_bias: bool = False
    warm_start_mf: str | None = None
    warm_start_vmlp: str | None = None

    def __post_init__(self):
        self.model_kind = ModelKind.parse(self.model_kind)
        if self.tower_widths is not None:
            self.tower_widths = tuple(int(w) for w in self.tower_widths)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            # lr = 0 is allowed: it freezes the initialization
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.visual_dim < 0:
            raise ConfigError("visual_dim must be >= 0")
        if min(self.lambda_u, self.lambda_v, self.lambda_net) < 0:
            raise ConfigError("regularization weights must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.tower_init not in ("fixed", "he"):
            raise ConfigError("tower_init must be 'fixed' or 'he'")
        if self.tower_widths is not None and any(w < 1 for w in self.tower_widths):
            raise ConfigError("tower widths must be positive")
        if (self.warm_start_mf or self.warm_start_vmlp) and self.model_kind is not ModelKind.MF_VMLP:
            raise ConfigError("warm start applies to MF-VMLP only")
        if bool(self.warm_start_mf) != bool(self.warm_start_vmlp):
            raise ConfigError("warm start needs both an MF and a VMLP checkpoint")

    @property
    def regularization(self) -> Regularization:
        return Regularization(self.lambda_u, self.lambda_v, self.lambda_net)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_kind"] = self.model_kind.label
        d["tower_widths"] = None if self.tower_widths is None else list(self.tower_widths)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_rmse: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_rmse: float = math.inf
    wall_time: float = 0.0
    selection: str = "valid"

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_valid_rmse": self.best_valid_rmse,
            "selection": self.selection,
            "wall_time": self.wall_time,
        }

    def to_json(self, include_wall_time: bool = True) -> str:
        d = self.to_dict()
        if not include_wall_time:
            d.pop("wall_time")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


class _Optimizer:
    def __init__(self, kind: str, lr: float, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, list[np.ndarray]] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params.tensors[name]
            if self.kind == "sgd":
                p -= self.lr * g
            elif self.kind == "momentum":
                (v,) = self.state.setdefault(name, [np.zeros_like(p)])
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                m, v = self.state.setdefault(name, [np.zeros_like(p), np.zeros_like(p)])
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1 ** self.t)
                v_hat = v / (1 - self.beta2 ** self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _warm_start(params: ModelParams, config: TrainConfig) -> None:
    mf = load_checkpoint(config.warm_start_mf, ModelKind.MF)
    vmlp = load_checkpoint(config.warm_start_vmlp, ModelKind.VMLP)
    for src, names in ((mf, ("P", "Q")), (vmlp, [n for n in vmlp.tensors if n != "h"])):
        for name in names:
            if src.tensors[name].shape != params.tensors[name].shape:
                raise ConfigError(f"warm-start tensor {name} has shape {src.tensors[name].shape}, "
                                  f"expected {params.tensors[name].shape}")
            params.tensors[name] = src.tensors[name].copy()
    # equal blend of the two pretrained output layers; MF's implicit output weights are all ones
    params.tensors["h_out"] = 0.5 * np.concatenate([np.ones(params.latent_dim), vmlp.tensors["h"]])


def _epoch_objective(params, users, items, ratings, feats, reg) -> float:
    y_hat = predict_batch(params, users, items, feats)
    e = ratings - y_hat
    n = max(len(ratings), 1)
    return (0.5 * float(e @ e) + regularizer(params, reg)) / n


def train(config: TrainConfig, data: SplitDataset, features: VisualFeatureStore | None = None,
          progress: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Train one model; returns the best-validation-epoch parameters and the report.

    Each mini-batch step follows the gradient of ``0.5 * sum(residual**2)``
    over the batch plus the regularizer scaled by ``batch / n_train``, so the
    regularizer counts once per epoch.
    """
    config.validate()
    kind = config.model_kind
    train_set, valid_set = data.train, data.valid
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    fm = None
    if kind.visual:
        if features is None:
            raise ConfigError(f"{kind.label} requires a visual feature store")
        fm = features.matrix(train_set.item_index)
    feature_dim = 0 if fm is None else fm.shape[1]

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    shuffle_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    params = init_params(kind, train_set.n_users, train_set.n_items, config.latent_dim,
                         config.visual_dim, feature_dim, config.tower_widths, config.use_bias,
                         config.init_std, init_rng, config.tower_init)
    if config.warm_start_mf:
        _warm_start(params, config)

    reg = config.regularization
    opt = _Optimizer(config.optimizer, config.learning_rate, config.momentum)
    users, items, ratings = train_set.users, train_set.items, train_set.ratings
    feats_all = None if fm is None else fm[items]
    n = len(train_set)
    if len(valid_set):
        sel_users, sel_items, sel_ratings = valid_set.users, valid_set.items, valid_set.ratings
        selection = "valid"
    else:
        sel_users, sel_items, sel_ratings = users, items, ratings
        selection = "train"
    sel_feats = None if fm is None else fm[sel_items]

    report = TrainReport(selection=selection)
    best = params.copy()
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            batch_loss, grads = loss_and_grad(
                params, users[idx], items[idx], ratings[idx],
                None if feats_all is None else feats_all[idx], reg, reg_scale=idx.size / n)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(params, grads)
        train_loss = _epoch_objective(params, users, items, ratings, feats_all, reg)
        if not math.isfinite(train_loss) or train_loss > DIVERGENCE_LIMIT:
            raise TrainingError(f"training diverged at epoch {epoch}: train_loss={train_loss}")
        y_sel = predict_batch(params, sel_users, sel_items, sel_feats)
        if config.clamp_eval:
            y_sel = np.clip(y_sel, 1.0, 5.0)
        valid_rmse = rmse_values(sel_ratings, y_sel)
        report.epochs.append(EpochStats(epoch, train_loss, valid_rmse))
        if progress is not None:
            progress(f"epoch={epoch} train_loss={train_loss:.6f} valid_rmse={valid_rmse:.6f}")
        if valid_rmse < report.best_valid_rmse:
            report.best_valid_rmse = valid_rmse
            report.best_epoch = epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break
    report.wall_time = time.perf_counter() - t0
    return best, report
