"""MF, VMF, VMLP and the fused MF-VMLP predictor with hand-derived gradients.

Every model shares one parameter container, :class:`ModelParams`, whose
tensors live in a name-ordered dict. Batch routines take parallel arrays of
user ids, item ids and (for visual models) the ``(B, F)`` raw feature rows,
and are what the trainer uses; the single-example functions are thin
wrappers around them.

Conventions: ``residual = y - y_hat`` and the per-example loss is
``0.5 * residual**2``. Layer weights are stored input-major so a layer
computes ``a @ W + b``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vizrec.numeric import DTYPE, ShapeError, init_gaussian, relu, relu_grad

DEFAULT_LATENT_DIM = 8
DEFAULT_VISUAL_DIM = 16


class ModelKind(enum.IntEnum):
    MF = 0
    VMF = 1
    VMLP = 2
    MF_VMLP = 3

    @property
    def label(self) -> str:
        return self.name.replace("_", "-")

    @property
    def visual(self) -> bool:
        return self is not ModelKind.MF

    @property
    def has_tower(self) -> bool:
        return self in (ModelKind.VMLP, ModelKind.MF_VMLP)

    @classmethod
    def parse(cls, text) -> "ModelKind":
        if isinstance(text, ModelKind):
            return text
        key = str(text).strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown model kind {text!r}") from None


def default_tower_widths(input_width: int, n_layers: int = 2) -> tuple[int, ...]:
    """Halving pyramid below the tower input width."""
    widths, w = [], input_width
    for _ in range(n_layers):
        w = max(1, w // 2)
        widths.append(w)
    return tuple(widths)


@dataclass(frozen=True)
class Regularization:
    lambda_u: float = 0.0
    lambda_v: float = 0.0
    lambda_net: float = 0.0

    def __post_init__(self):
        if min(self.lambda_u, self.lambda_v, self.lambda_net) < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass(eq=False)
class ModelParams:
    kind: ModelKind
    n_users: int
    n_items: int
    latent_dim: int
    visual_dim: int = 0
    feature_dim: int = 0
    tower_widths: tuple[int, ...] = ()
    use_bias: bool = False
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = value

    @property
    def tower_input(self) -> int:
        return 2 * self.latent_dim + self.visual_dim

    @property
    def n_layers(self) -> int:
        return len(self.tower_widths)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind, self.n_users, self.n_items, self.latent_dim, self.visual_dim,
            self.feature_dim, tuple(self.tower_widths), self.use_bias,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def with_flat(self, flat) -> "ModelParams":
        out = self.copy()
        off = 0
        for name, v in out.tensors.items():
            out.tensors[name] = np.asarray(flat[off:off + v.size], dtype=DTYPE).reshape(v.shape).copy()
            off += v.size
        if off != len(flat):
            raise ShapeError(f"flat vector has {len(flat)} entries, expected {off}")
        return out


def tensor_layout(kind, n_users, n_items, K, D=0, F=0, widths=(), use_bias=False) -> list[tuple[str, tuple[int, ...], str]]:
    """Fixed ``(name, shape, reg_group)`` order of every tensor of a model.

    ``reg_group`` is ``"u"``, ``"v"``, ``"net"`` or ``""`` (unregularized).
    This order is also the on-disk checkpoint order.
    """
    kind = ModelKind(kind)
    out = []
    if kind in (ModelKind.MF, ModelKind.VMF, ModelKind.MF_VMLP):
        out += [("P", (n_users, K), "u"), ("Q", (n_items, K), "v")]
    if kind is ModelKind.VMF:
        out += [("Theta_u", (n_users, D), "net"), ("E", (D, F), "net")]
    if kind.has_tower:
        if not widths:
            raise ValueError(f"{kind.label} needs at least one hidden layer")
        out += [("P_v", (n_users, K), "u"), ("Q_v", (n_items, K), "v"), ("E_v", (D, F), "net")]
        prev = 2 * K + D
        for l, w in enumerate(widths):
            out += [(f"W{l}", (prev, w), "net"), (f"b{l}", (w,), "")]
            prev = w
        if kind is ModelKind.VMLP:
            out.append(("h", (prev,), "net"))
        else:
            out.append(("h_out", (K + prev,), "net"))
    if use_bias:
        out += [("mu", (1,), ""), ("b_user", (n_users,), "u"), ("b_item", (n_items,), "v")]
    return out


def init_params(kind, n_users, n_items, latent_dim=DEFAULT_LATENT_DIM, visual_dim=DEFAULT_VISUAL_DIM,
                feature_dim=0, tower_widths=None, use_bias=False, std=0.01,
                rng: np.random.Generator | None = None, tower_init: str = "fixed") -> ModelParams:
    """Gaussian(0, std) initialization of every tensor, drawn in layout order.

    ``tower_init="he"`` instead draws tower weights ``W*`` with std
    ``sqrt(2 / fan_in)``.
    """
    kind = ModelKind.parse(kind)
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    if kind is ModelKind.MF:
        visual_dim, feature_dim, tower_widths = 0, 0, ()
    if visual_dim < 0:
        raise ValueError("visual_dim must be >= 0")
    if kind.has_tower and tower_widths is None:
        tower_widths = default_tower_widths(2 * latent_dim + visual_dim)
    if not kind.has_tower:
        tower_widths = ()
    rng = np.random.default_rng(0) if rng is None else rng
    p = ModelParams(kind, n_users, n_items, latent_dim, visual_dim, feature_dim,
                    tuple(int(w) for w in tower_widths), use_bias)
    for name, shape, _ in tensor_layout(kind, n_users, n_items, latent_dim, visual_dim,
                                        feature_dim, p.tower_widths, use_bias):
        rows = shape[0]
        cols = shape[1] if len(shape) == 2 else 1
        sd = std
        if tower_init == "he" and name.startswith("W"):
            sd = float(np.sqrt(2.0 / rows))
        t = init_gaussian(rows, cols, sd, rng) if rows * cols else np.zeros((rows, cols), DTYPE)
        p.tensors[name] = t.reshape(shape)
    return p


def _layout_of(params: ModelParams):
    return tensor_layout(params.kind, params.n_users, params.n_items, params.latent_dim,
                         params.visual_dim, params.feature_dim, params.tower_widths, params.use_bias)


def regularizer(params: ModelParams, reg: Regularization) -> float:
    weights = {"u": reg.lambda_u, "v": reg.lambda_v, "net": reg.lambda_net, "": 0.0}
    total = 0.0
    for name, _, group in _layout_of(params):
        lam = weights[group]
        if lam:
            t = params.tensors[name]
            total += 0.5 * lam * float(np.sum(t * t))
    return total


def _add_regularizer_grad(params: ModelParams, reg: Regularization, grads: dict, scale: float) -> None:
    weights = {"u": reg.lambda_u, "v": reg.lambda_v, "net": reg.lambda_net, "": 0.0}
    for name, _, group in _layout_of(params):
        lam = weights[group] * scale
        if lam:
            grads[name] += lam * params.tensors[name]


# ---------------------------------------------------------------------------
# batch forward / backward


@dataclass
class Trace:
    """Activations retained by a forward pass, consumed by :func:`backward`."""

    kind: ModelKind
    users: np.ndarray
    items: np.ndarray
    feats: np.ndarray | None
    y_hat: np.ndarray
    acts: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    theta_i: np.ndarray | None = None
    phi_mf: np.ndarray | None = None
    shapes: tuple = ()


def _check_ids(params: ModelParams, users, items):
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if users.shape != items.shape:
        raise ShapeError("users and items must be parallel arrays")
    if users.size and (users.min() < 0 or users.max() >= params.n_users):
        raise IndexError(f"user index out of range [0, {params.n_users})")
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        raise IndexError(f"item index out of range [0, {params.n_items})")
    return users, items


def _check_feats(params: ModelParams, feats, n):
    if not params.kind.visual:
        return None
    if feats is None:
        raise ShapeError(f"{params.kind.label} needs feature rows")
    feats = np.asarray(feats, dtype=DTYPE)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape != (n, params.feature_dim):
        raise ShapeError(f"feature rows have shape {feats.shape}, expected ({n}, {params.feature_dim})")
    return feats


def _tower_forward(params, z1, trace):
    a = z1
    trace.acts.append(a)
    for l in range(params.n_layers):
        s = a @ params.tensors[f"W{l}"] + params.tensors[f"b{l}"]
        a = relu(s)
        trace.pre.append(s)
        trace.acts.append(a)
    return a


def forward(params: ModelParams, users, items, feats=None) -> Trace:
    """Batch predictions plus the activation trace for backprop."""
    users, items = _check_ids(params, users, items)
    feats = _check_feats(params, feats, users.size)
    T = params.tensors
    kind = params.kind
    trace = Trace(kind, users, items, feats, np.empty(0),
                  shapes=tuple((k, v.shape) for k, v in T.items()))
    if kind is ModelKind.MF:
        y = np.einsum("bk,bk->b", T["P"][users], T["Q"][items])
    elif kind is ModelKind.VMF:
        theta_i = feats @ T["E"].T
        trace.theta_i = theta_i
        y = (np.einsum("bk,bk->b", T["P"][users], T["Q"][items])
             + np.einsum("bd,bd->b", T["Theta_u"][users], theta_i))
    else:
        t = feats @ T["E_v"].T
        z1 = np.concatenate([T["P_v"][users], T["Q_v"][items], t], axis=1)
        last = _tower_forward(params, z1, trace)
        if kind is ModelKind.VMLP:
            y = last @ T["h"]
        else:
            phi_mf = T["P"][users] * T["Q"][items]
            trace.phi_mf = phi_mf
            y = np.concatenate([phi_mf, last], axis=1) @ T["h_out"]
    if params.use_bias:
        y = y + T["mu"][0] + T["b_user"][users] + T["b_item"][items]
    trace.y_hat = y
    return trace


def _tower_backward(params, trace, d_last, grads):
    """Backprop ``d_last`` through the hidden layers; returns the gradient w.r.t. z_1."""
    da = d_last
    for l in reversed(range(params.n_layers)):
        ds = da * relu_grad(trace.pre[l])
        grads[f"W{l}"] += trace.acts[l].T @ ds
        grads[f"b{l}"] += ds.sum(axis=0)
        da = ds @ params.tensors[f"W{l}"].T
    return da


def backward(params: ModelParams, trace: Trace, residual) -> dict[str, np.ndarray]:
    """Gradient of ``sum 0.5 * residual**2`` over the traced batch.

    ``residual`` is ``y - y_hat`` per example (scalar allowed for a batch of one).
    """
    if trace.kind is not params.kind or trace.shapes != tuple((k, v.shape) for k, v in params.tensors.items()):
        raise ShapeError("trace does not belong to these parameters")
    residual = np.atleast_1d(np.asarray(residual, dtype=DTYPE))
    if residual.shape != trace.y_hat.shape:
        raise ShapeError(f"residual shape {residual.shape} vs batch {trace.y_hat.shape}")
    g = -residual  # dL/dy_hat
    T = params.tensors
    users, items, feats = trace.users, trace.items, trace.feats
    grads = {k: np.zeros_like(v) for k, v in T.items()}
    kind = params.kind

    if kind in (ModelKind.MF, ModelKind.VMF):
        pu, qi = T["P"][users], T["Q"][items]
        np.add.at(grads["P"], users, g[:, None] * qi)
        np.add.at(grads["Q"], items, g[:, None] * pu)
        if kind is ModelKind.VMF:
            tu = T["Theta_u"][users]
            np.add.at(grads["Theta_u"], users, g[:, None] * trace.theta_i)
            grads["E"] += (g[:, None] * tu).T @ feats
    else:
        last = trace.acts[-1]
        if kind is ModelKind.VMLP:
            grads["h"] += last.T @ g
            d_last = g[:, None] * T["h"][None, :]
        else:
            K = params.latent_dim
            x = np.concatenate([trace.phi_mf, last], axis=1)
            grads["h_out"] += x.T @ g
            d_x = g[:, None] * T["h_out"][None, :]
            d_phi = d_x[:, :K]
            d_last = d_x[:, K:]
            np.add.at(grads["P"], users, d_phi * T["Q"][items])
            np.add.at(grads["Q"], items, d_phi * T["P"][users])
        dz1 = _tower_backward(params, trace, d_last, grads)
        K = params.latent_dim
        np.add.at(grads["P_v"], users, dz1[:, :K])
        np.add.at(grads["Q_v"], items, dz1[:, K:2 * K])
        grads["E_v"] += dz1[:, 2 * K:].T @ feats

    if params.use_bias:
        grads["mu"][0] += g.sum()
        np.add.at(grads["b_user"], users, g)
        np.add.at(grads["b_item"], items, g)
    return grads


def predict_batch(params: ModelParams, users, items, feats=None) -> np.ndarray:
    return forward(params, users, items, feats).y_hat


def loss_and_grad(params: ModelParams, users, items, ratings, feats=None,
                  reg: Regularization = Regularization(), reg_scale: float = 1.0):
    """``0.5 * sum(residual**2) + reg_scale * regularizer`` and its gradient."""
    trace = forward(params, users, items, feats)
    residual = np.asarray(ratings, dtype=DTYPE) - trace.y_hat
    grads = backward(params, trace, residual)
    _add_regularizer_grad(params, reg, grads, reg_scale)
    loss = 0.5 * float(residual @ residual) + reg_scale * regularizer(params, reg)
    return loss, grads


def loss(params: ModelParams, users, items, ratings, feats=None,
         reg: Regularization = Regularization(), reg_scale: float = 1.0) -> float:
    y_hat = predict_batch(params, users, items, feats)
    residual = np.asarray(ratings, dtype=DTYPE) - y_hat
    return 0.5 * float(residual @ residual) + reg_scale * regularizer(params, reg)


# ---------------------------------------------------------------------------
# per-model entry points


def _unpack(batch: Sequence[tuple[int, int, float]]):
    if len(batch) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, DTYPE)
    arr = list(zip(*batch))
    return (np.asarray(arr[0], dtype=np.int64), np.asarray(arr[1], dtype=np.int64),
            np.asarray(arr[2], dtype=DTYPE))


def _feature_rows(params, items, features):
    """Rows of an ``(n_items, F)`` feature matrix for the given items."""
    if features is None:
        return None
    features = np.asarray(features, dtype=DTYPE)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ShapeError(f"feature matrix has shape {features.shape}, expected (n_items, {params.feature_dim})")
    return features[items]


def _require(params, kind):
    if params.kind is not kind:
        raise TypeError(f"expected {kind.label} parameters, got {params.kind.label}")


def mf_predict(params: ModelParams, u: int, i: int) -> float:
    _require(params, ModelKind.MF)
    return float(predict_batch(params, [u], [i])[0])


def mf_loss(params: ModelParams, batch, lambda_u: float, lambda_v: float) -> float:
    _require(params, ModelKind.MF)
    users, items, ratings = _unpack(batch)
    return loss(params, users, items, ratings, reg=Regularization(lambda_u, lambda_v))


def mf_gradient(params: ModelParams, batch, lambda_u: float, lambda_v: float) -> dict[str, np.ndarray]:
    _require(params, ModelKind.MF)
    users, items, ratings = _unpack(batch)
    return loss_and_grad(params, users, items, ratings, reg=Regularization(lambda_u, lambda_v))[1]


def vmf_predict(params: ModelParams, u: int, i: int, f_i) -> float:
    _require(params, ModelKind.VMF)
    return float(predict_batch(params, [u], [i], np.asarray(f_i, dtype=DTYPE)[None, :])[0])


def vmf_loss(params: ModelParams, batch, features, lambda_u: float, lambda_v: float,
             lambda_net: float = 0.0) -> float:
    """``features`` is the ``(n_items, F)`` matrix with zero rows for uncovered items."""
    _require(params, ModelKind.VMF)
    users, items, ratings = _unpack(batch)
    return loss(params, users, items, ratings, _feature_rows(params, items, features),
                Regularization(lambda_u, lambda_v, lambda_net))


def vmf_gradient(params: ModelParams, batch, features, lambda_u: float, lambda_v: float,
                 lambda_net: float = 0.0) -> dict[str, np.ndarray]:
    _require(params, ModelKind.VMF)
    users, items, ratings = _unpack(batch)
    return loss_and_grad(params, users, items, ratings, _feature_rows(params, items, features),
                         Regularization(lambda_u, lambda_v, lambda_net))[1]


def vmlp_forward(params: ModelParams, u: int, i: int, f_i) -> tuple[float, Trace]:
    _require(params, ModelKind.VMLP)
    trace = forward(params, [u], [i], np.asarray(f_i, dtype=DTYPE)[None, :])
    return float(trace.y_hat[0]), trace


def vmlp_backward(params: ModelParams, trace: Trace, residual) -> dict[str, np.ndarray]:
    _require(params, ModelKind.VMLP)
    return backward(params, trace, residual)


def fused_forward(params: ModelParams, u: int, i: int, f_i) -> tuple[float, Trace]:
    _require(params, ModelKind.MF_VMLP)
    trace = forward(params, [u], [i], np.asarray(f_i, dtype=DTYPE)[None, :])
    return float(trace.y_hat[0]), trace


def fused_backward(params: ModelParams, trace: Trace, residual) -> dict[str, np.ndarray]:
    _require(params, ModelKind.MF_VMLP)
    return backward(params, trace, residual)


def clamp(y_hat, lo: float = 1.0, hi: float = 5.0):
    return np.clip(y_hat, lo, hi)
