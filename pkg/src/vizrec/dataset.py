"""Rating ingestion, filtering, indexing and splitting; visual feature files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from vizrec.numeric import DTYPE, make_rng

FEATURE_MAGIC = b"VFS1"
DEFAULT_FEATURE_DIM = 4096
DEFAULT_MIN_COUNT = 5
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


class DataError(ValueError):
    """Malformed rating or feature input."""


@dataclass(frozen=True)
class RawRating:
    user_key: str
    item_key: str
    rating: float
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise DataError("user_key and item_key must be non-empty")
        if not math.isfinite(self.rating):
            raise DataError(f"non-finite rating {self.rating!r}")


@dataclass(frozen=True)
class Index:
    """Bijection between string keys and contiguous integer ids."""

    keys: tuple[str, ...]
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_lookup", {k: i for i, k in enumerate(self.keys)})
        if len(self._lookup) != len(self.keys):
            raise DataError("duplicate key in index")

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self._lookup

    def idx(self, key: str) -> int:
        return self._lookup[key]

    def key(self, idx: int) -> str:
        return self.keys[idx]


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Indexed (user, item, rating) triples.

    ``users``, ``items`` and ``ratings`` are parallel read-only arrays. A split
    view shares the parent's indices and holds a subset of its triples.
    """

    user_index: Index
    item_index: Index
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        for name in ("users", "items", "ratings"):
            getattr(self, name).setflags(write=False)

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    def __len__(self) -> int:
        return int(self.ratings.shape[0])

    def triples(self) -> list[tuple[int, int, float]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def subset(self, positions) -> "RatingDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return RatingDataset(
            self.user_index,
            self.item_index,
            self.users[positions].copy(),
            self.items[positions].copy(),
            self.ratings[positions].copy(),
        )

    def to_raw(self) -> list[RawRating]:
        uk, ik = self.user_index.keys, self.item_index.keys
        return [RawRating(uk[u], ik[i], r) for u, i, r in self.triples()]


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: RatingDataset
    valid: RatingDataset
    test: RatingDataset
    positions: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(eq=False)
class VisualFeatureStore:
    """Raw item feature vectors keyed by item key."""

    dim_f: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for key, vec in self.vectors.items():
            self._check(key, vec)

    def _check(self, key, vec):
        if vec.shape != (self.dim_f,):
            raise DataError(f"feature for {key!r} has shape {vec.shape}, expected ({self.dim_f},)")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"feature for {key!r} contains non-finite values")

    def add(self, key: str, vec) -> None:
        vec = np.asarray(vec, dtype=DTYPE)
        self._check(key, vec)
        self.vectors[key] = vec

    def __len__(self) -> int:
        return len(self.vectors)

    def coverage(self, item_index: Index) -> set[int]:
        return {i for i, k in enumerate(item_index.keys) if k in self.vectors}

    def get(self, key: str) -> np.ndarray:
        """Feature vector for ``key``; zeros when the item is uncovered."""
        vec = self.vectors.get(key)
        return np.zeros(self.dim_f, dtype=DTYPE) if vec is None else vec

    def matrix(self, item_index: Index) -> np.ndarray:
        """``(n_items, F)`` matrix aligned to ``item_index``, zero rows for uncovered items."""
        out = np.zeros((len(item_index), self.dim_f), dtype=DTYPE)
        for i, key in enumerate(item_index.keys):
            vec = self.vectors.get(key)
            if vec is not None:
                out[i] = vec
        return out


# ---------------------------------------------------------------------------
# ratings


def parse_ratings(lines: Iterable[str], header: bool = False, source: str = "<ratings>") -> list[RawRating]:
    out = []
    reader = csv.reader(lines)
    for lineno, row in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) < 3 or len(row) > 4:
            raise DataError(f"{source}:{lineno}: expected 3 or 4 fields, got {len(row)}")
        user, item = row[0].strip(), row[1].strip()
        try:
            rating = float(row[2])
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric rating {row[2]!r}") from None
        ts = None
        if len(row) == 4 and row[3].strip():
            try:
                ts = int(row[3])
            except ValueError:
                raise DataError(f"{source}:{lineno}: non-integer timestamp {row[3]!r}") from None
        try:
            out.append(RawRating(user, item, rating, ts))
        except DataError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
    return out


def load_ratings(path, header: bool = False) -> list[RawRating]:
    """Read ``user,item,rating[,timestamp]`` lines in file order."""
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_ratings(fh, header=header, source=os.fspath(path))


def format_ratings(raw: Sequence[RawRating]) -> str:
    buf = io.StringIO()
    for r in raw:
        fields = [r.user_key, r.item_key, repr(float(r.rating))]
        if r.timestamp is not None:
            fields.append(str(r.timestamp))
        buf.write(",".join(fields))
        buf.write("\n")
    return buf.getvalue()


def save_ratings(raw: Sequence[RawRating], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_ratings(raw))


def filter_min_interactions(raw: Sequence[RawRating], min_count: int = DEFAULT_MIN_COUNT) -> list[RawRating]:
    """Keep ratings of users with at least ``min_count`` ratings (one pass, users only)."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter(r.user_key for r in raw)
    return [r for r in raw if counts[r.user_key] >= min_count]


def build_dataset(raw: Sequence[RawRating]) -> RatingDataset:
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    cells: dict[tuple[int, int], float] = {}
    for r in raw:
        u = users.setdefault(r.user_key, len(users))
        i = items.setdefault(r.item_key, len(items))
        # dict keeps first-insertion position, value is the last rating seen
        cells[(u, i)] = float(r.rating)
    n = len(cells)
    us = np.fromiter((k[0] for k in cells), dtype=np.int64, count=n)
    its = np.fromiter((k[1] for k in cells), dtype=np.int64, count=n)
    rs = np.fromiter(cells.values(), dtype=DTYPE, count=n)
    return RatingDataset(Index(tuple(users)), Index(tuple(items)), us, its, rs)


def _check_ratios(ratios) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ValueError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)


def _cut(n: int, ratios) -> tuple[int, int]:
    n_train = math.floor(n * ratios[0])
    n_valid = math.floor(n * ratios[1])
    return n_train, n_train + n_valid


def split(ds: RatingDataset, ratios=DEFAULT_RATIOS, seed: int = 0, by_user: bool = False) -> SplitDataset:
    """Seeded shuffle then floor cuts; the test part takes the remainder.

    With ``by_user`` the cut is applied within each user's ratings instead of
    over the whole triple list.
    """
    ratios = _check_ratios(ratios)
    n = len(ds)
    if n < 3:
        raise DataError(f"cannot split {n} triples into three parts")
    rng = make_rng(seed)
    if not by_user:
        perm = rng.permutation(n)
        a, b = _cut(n, ratios)
        parts = (perm[:a], perm[a:b], perm[b:])
    else:
        order = np.argsort(ds.users, kind="stable")
        bounds = np.flatnonzero(np.diff(ds.users[order])) + 1
        tr, va, te = [], [], []
        for group in np.split(order, bounds):
            group = group[rng.permutation(group.size)]
            a, b = _cut(group.size, ratios)
            tr.append(group[:a])
            va.append(group[a:b])
            te.append(group[b:])
        parts = tuple(np.concatenate(p) if p else np.empty(0, np.int64) for p in (tr, va, te))
    parts = tuple(np.asarray(p, dtype=np.int64) for p in parts)
    return SplitDataset(ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2]), parts)


def split_from_positions(ds: RatingDataset, positions) -> SplitDataset:
    parts = tuple(np.asarray(p, dtype=np.int64) for p in positions)
    seen = np.concatenate(parts)
    if seen.size != len(ds) or np.unique(seen).size != len(ds):
        raise DataError("split positions do not partition the dataset")
    return SplitDataset(ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2]), parts)


# ---------------------------------------------------------------------------
# index sidecar


def format_index(ds: RatingDataset) -> str:
    lines = [f"user\t{k}\t{i}" for i, k in enumerate(ds.user_index.keys)]
    lines += [f"item\t{k}\t{i}" for i, k in enumerate(ds.item_index.keys)]
    return "".join(line + "\n" for line in lines)


def parse_index(text: str) -> tuple[Index, Index]:
    found: dict[str, dict[int, str]] = {"user": {}, "item": {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in found:
            raise DataError(f"index line {lineno}: expected kind<TAB>key<TAB>idx")
        found[parts[0]][int(parts[2])] = parts[1]
    out = []
    for kind in ("user", "item"):
        table = found[kind]
        if sorted(table) != list(range(len(table))):
            raise DataError(f"index ids for {kind} are not contiguous")
        out.append(Index(tuple(table[i] for i in range(len(table)))))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# VFS1 feature files


def encode_features(store: VisualFeatureStore, order: Sequence[str] | None = None) -> bytes:
    keys = list(store.vectors) if order is None else [k for k in order if k in store.vectors]
    parts = [FEATURE_MAGIC, struct.pack("<II", len(keys), store.dim_f)]
    for key in keys:
        kb = key.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
        parts.append(store.vectors[key].astype("<f4").tobytes())
    return b"".join(parts)


def save_visual_features(store: VisualFeatureStore, path, order: Sequence[str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_features(store, order))


def decode_features(buf: bytes) -> VisualFeatureStore:
    if len(buf) < 12 or buf[:4] != FEATURE_MAGIC:
        raise DataError("offset 0: bad magic, expected VFS1")
    count, dim_f = struct.unpack_from("<II", buf, 4)
    store = VisualFeatureStore(dim_f)
    off = 12
    rec_bytes = 4 * dim_f
    for n in range(count):
        if off + 4 > len(buf):
            raise DataError(f"offset {off}: truncated record {n} (key length)")
        (klen,) = struct.unpack_from("<I", buf, off)
        start = off
        off += 4
        if off + klen + rec_bytes > len(buf):
            raise DataError(f"offset {start}: truncated record {n}")
        key = buf[off:off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(buf, dtype="<f4", count=dim_f, offset=off).astype(DTYPE)
        bad = np.flatnonzero(~np.isfinite(vec))
        if bad.size:
            raise DataError(f"offset {off + 4 * int(bad[0])}: non-finite value in record {n} ({key!r})")
        if not key:
            raise DataError(f"offset {start}: empty item key in record {n}")
        store.vectors[key] = vec
        off += rec_bytes
    if off != len(buf):
        raise DataError(f"offset {off}: {len(buf) - off} trailing bytes after {count} records")
    return store


def load_visual_features(path) -> VisualFeatureStore:
    with open(path, "rb") as fh:
        return decode_features(fh.read())


# ---------------------------------------------------------------------------
# prepared data directory


RATINGS_FILE = "ratings.csv"
INDEX_FILE = "index.tsv"
SPLIT_FILE = "split.json"
FEATURES_FILE = "features.vfs"


def save_prepared(out_dir, ds: RatingDataset, parts: SplitDataset, meta: dict,
                  features: VisualFeatureStore | None = None) -> None:
    """Write the indexed ratings, index sidecar, split manifest and (optionally) features."""
    os.makedirs(out_dir, exist_ok=True)
    save_ratings(ds.to_raw(), os.path.join(out_dir, RATINGS_FILE))
    with open(os.path.join(out_dir, INDEX_FILE), "w", encoding="utf-8", newline="") as fh:
        fh.write(format_index(ds))
    manifest = dict(meta)
    manifest.update({name: p.tolist() for name, p in zip(("train", "valid", "test"), parts.positions)})
    with open(os.path.join(out_dir, SPLIT_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    if features is not None:
        save_visual_features(features, os.path.join(out_dir, FEATURES_FILE), ds.item_index.keys)


def index_digest(data_dir) -> bytes:
    with open(os.path.join(data_dir, INDEX_FILE), "rb") as fh:
        return hashlib.sha256(fh.read()).digest()


def load_prepared(data_dir) -> tuple[RatingDataset, SplitDataset, VisualFeatureStore | None]:
    with open(os.path.join(data_dir, INDEX_FILE), encoding="utf-8") as fh:
        user_index, item_index = parse_index(fh.read())
    raw = load_ratings(os.path.join(data_dir, RATINGS_FILE))
    try:
        users = np.array([user_index.idx(r.user_key) for r in raw], dtype=np.int64)
        items = np.array([item_index.idx(r.item_key) for r in raw], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"{data_dir}: rating key {exc} missing from index") from None
    ratings = np.array([r.rating for r in raw], dtype=DTYPE)
    ds = RatingDataset(user_index, item_index, users, items, ratings)
    with open(os.path.join(data_dir, SPLIT_FILE), encoding="utf-8") as fh:
        manifest = json.load(fh)
    parts = split_from_positions(ds, [manifest[k] for k in ("train", "valid", "test")])
    fpath = os.path.join(data_dir, FEATURES_FILE)
    features = load_visual_features(fpath) if os.path.exists(fpath) else None
    return ds, parts, features
