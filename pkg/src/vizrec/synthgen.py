"""Synthetic ratings with a planted latent plus visual structure.

Each user has a taste vector ``p_u`` and a visual taste ``theta_u``; each item
a latent vector ``q_i`` and a raw feature ``f_i`` whose visual factor is
``E_true @ f_i``. The noiseless score mixes the two interactions (each
standardized over the full user x item grid) with weight ``visual_weight`` and
is mapped affinely so the grid's 0.5% and 99.5% quantiles land on 1 and 5.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from vizrec.dataset import Index, RatingDataset, VisualFeatureStore
from vizrec.numeric import DTYPE

TAIL = 0.005


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 300
    n_items: int = 500
    K_true: int = 2
    D_true: int = 2
    F: int = 16
    visual_weight: float = 0.6
    noise_std: float = 0.3
    density: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.visual_weight <= 1:
            raise ValueError("visual_weight must lie in [0, 1]")
        if min(self.n_users, self.n_items, self.K_true, self.F) < 1 or self.D_true < 0:
            raise ValueError("sizes must be positive")


@dataclass
class GroundTruth:
    config: SynthConfig
    P: np.ndarray
    Q: np.ndarray
    Theta_u: np.ndarray
    E: np.ndarray
    features: np.ndarray
    mf_scale: float
    vis_scale: float
    lo: float
    hi: float

    def _raw(self, users, items) -> np.ndarray:
        w = self.config.visual_weight
        mf = np.einsum("bk,bk->b", self.P[users], self.Q[items]) / self.mf_scale
        theta_i = self.features[items] @ self.E.T
        vis = np.einsum("bd,bd->b", self.Theta_u[users], theta_i) / self.vis_scale
        return (1 - w) * mf + w * vis

    def noiseless(self, users, items) -> np.ndarray:
        """Noise-free rating for any (user, item) pairs."""
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        span = self.hi - self.lo
        if span == 0:
            return np.full(users.shape, 3.0)
        return 1.0 + 4.0 * (self._raw(users, items) - self.lo) / span

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "Theta_u": self.Theta_u.tolist(),
            "E": self.E.tolist(),
            "mf_scale": self.mf_scale,
            "vis_scale": self.vis_scale,
            "lo": self.lo,
            "hi": self.hi,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


def _scale(x: np.ndarray) -> float:
    s = float(np.std(x))
    return s if s > 0 else 1.0


def generate(config: SynthConfig) -> tuple[RatingDataset, VisualFeatureStore, GroundTruth]:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    nu, ni = config.n_users, config.n_items
    P = rng.normal(size=(nu, config.K_true))
    Q = rng.normal(size=(ni, config.K_true))
    Theta_u = rng.normal(size=(nu, config.D_true))
    E = rng.normal(scale=1.0 / np.sqrt(config.F), size=(config.D_true, config.F))
    # features pass through float32 so the on-disk VFS1 copy is exact
    feats = rng.normal(size=(ni, config.F)).astype(np.float32).astype(DTYPE)

    mf_grid = P @ Q.T
    vis_grid = Theta_u @ (feats @ E.T).T
    mf_scale, vis_scale = _scale(mf_grid), _scale(vis_grid)
    w = config.visual_weight
    grid = (1 - w) * mf_grid / mf_scale + w * vis_grid / vis_scale
    truth = GroundTruth(config, P, Q, Theta_u, E, feats, mf_scale, vis_scale,
                        float(np.quantile(grid, TAIL)), float(np.quantile(grid, 1 - TAIL)))

    mask = rng.random((nu, ni)) < config.density
    users, items = np.nonzero(mask)
    ratings = truth.noiseless(users, items) + rng.normal(scale=config.noise_std, size=users.size)

    # ids follow row-major observation order; keys are stable strings
    user_keys = [f"u{u}" for u in range(nu)]
    item_keys = [f"i{i}" for i in range(ni)]
    ds = RatingDataset(Index(tuple(user_keys)), Index(tuple(item_keys)),
                       users.astype(np.int64), items.astype(np.int64), ratings.astype(DTYPE))
    store = VisualFeatureStore(config.F, {k: feats[i] for i, k in enumerate(item_keys)})
    return ds, store, truth
