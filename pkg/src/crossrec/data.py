"""Rating ingestion, domain alignment and the evaluation protocols.

Target-domain ratings carry one of four labels (``TRAIN``, ``VALID``, ``TEST``,
``REMOVED``); source ratings are always ``TRAIN``.  Items live in a single index
space: source items occupy ``[0, n_s)`` and target items ``[n_s, n_s + n_t)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

TRAIN, VALID, TEST, REMOVED = 0, 1, 2, 3
LABEL_NAMES = ("train", "validation", "test", "removed")
SOURCE, TARGET = 0, 1

PROTOCOL_KINDS = ("sparse", "cold_start", "full_cold_start")
PUBLISHED_K = {
    "sparse": (0, 20, 40, 60, 80),
    "cold_start": (0, 20, 40, 60, 80),
    "full_cold_start": (10, 20, 30, 40, 50),
}
COLD_START_THRESHOLD = 5
DEFAULT_FRACTIONS = (0.65, 0.15, 0.20)


class DataError(ValueError):
    """Malformed input file or inconsistent rating data."""


class AlignmentError(ValueError):
    """Source and target domains cannot be aligned."""


class ProtocolError(ValueError):
    """Invalid split or protocol configuration."""


@dataclass(frozen=True)
class RatingsDataset:
    """Ratings from one domain with dense user/item indices."""

    user_ids: tuple
    item_ids: tuple
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    gamma_min: float
    gamma_max: float

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.ratings)


def _check_bounds(gamma_min, gamma_max):
    if not 0 < gamma_min <= gamma_max:
        raise DataError(f"need 0 < gamma_min <= gamma_max, got {gamma_min}, {gamma_max}")


def ratings_from_triples(triples, gamma_min, gamma_max):
    """Build a :class:`RatingsDataset` from ``(user_id, item_id, rating)`` triples.

    Duplicate (user, item) pairs keep the last occurrence.
    """
    _check_bounds(gamma_min, gamma_max)
    last = {}
    for u, i, r in triples:
        r = float(r)
        if not gamma_min <= r <= gamma_max:
            raise DataError(f"rating {r} for ({u}, {i}) outside [{gamma_min}, {gamma_max}]")
        if (u, i) in last:
            _log.warning("duplicate rating for (%s, %s); keeping last", u, i)
            del last[(u, i)]
        last[(u, i)] = r
    if not last:
        raise DataError("no ratings")
    user_index, item_index = {}, {}
    users, items, ratings = [], [], []
    for (u, i), r in last.items():
        users.append(user_index.setdefault(u, len(user_index)))
        items.append(item_index.setdefault(i, len(item_index)))
        ratings.append(r)
    return RatingsDataset(
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        gamma_min=float(gamma_min),
        gamma_max=float(gamma_max),
    )


def load_ratings(path, gamma_min, gamma_max):
    """Read a ``user<TAB>item<TAB>rating`` file; ``#`` starts a comment line."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                rating = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rating {parts[2]!r}") from None
            if not math.isfinite(rating):
                raise DataError(f"{path}:{lineno}: non-finite rating")
            triples.append((parts[0], parts[1], rating))
    try:
        return ratings_from_triples(triples, gamma_min, gamma_max)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "sparse"
    K: float = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ProtocolError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOL_KINDS}")
        if not 0 <= self.K < 100:
            raise ProtocolError(f"K must lie in [0, 100), got {self.K}")

    @property
    def is_standard_setting(self):
        return self.K in PUBLISHED_K[self.kind]

    def to_dict(self):
        return {"kind": self.kind, "K": self.K, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class CrossDomainDataset:
    """Source and target ratings over a shared user set.

    ``labels`` is ``None`` until :func:`split` has been applied.
    """

    user_ids: tuple
    source_item_ids: tuple
    target_item_ids: tuple
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    domain: np.ndarray
    gamma_min: float
    gamma_max: float
    labels: np.ndarray | None = None
    focus_users: np.ndarray | None = None
    protocol: ProtocolSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.user_ids)

    @property
    def n_s(self):
        return len(self.source_item_ids)

    @property
    def n_t(self):
        return len(self.target_item_ids)

    @property
    def n_items(self):
        return self.n_s + self.n_t

    def __len__(self):
        return len(self.ratings)

    @property
    def is_split(self):
        return self.labels is not None

    def _labels(self):
        if self.labels is None:
            raise ProtocolError("dataset has not been split")
        return self.labels

    def mask(self, label, domain=TARGET):
        return (self._labels() == label) & (self.domain == domain)

    @cached_property
    def train_index(self):
        """Indices of every training triple (all source plus target train)."""
        return np.flatnonzero(self._labels() == TRAIN)

    def target_index(self, label):
        return np.flatnonzero(self.mask(label, TARGET))

    @cached_property
    def target_train_counts(self):
        idx = self.target_index(TRAIN)
        return np.bincount(self.users[idx], minlength=self.m)

    @cached_property
    def train_counts(self):
        """Per-user count of training triples across both domains."""
        return np.bincount(self.users[self.train_index], minlength=self.m)

    @cached_property
    def source_rows(self):
        """CSR ``m x n_s`` matrix of source ratings (all of which are train-visible)."""
        sel = self.domain == SOURCE
        return sp.csr_matrix(
            (self.ratings[sel], (self.users[sel], self.items[sel])),
            shape=(self.m, self.n_s),
        )

    @cached_property
    def target_train_rows(self):
        """CSR ``m x n_t`` matrix holding only target *train* ratings."""
        idx = self.target_index(TRAIN)
        return sp.csr_matrix(
            (self.ratings[idx], (self.users[idx], self.items[idx] - self.n_s)),
            shape=(self.m, self.n_t),
        )

    def label_counts(self):
        labels = self._labels()[self.domain == TARGET]
        return {name: int(np.sum(labels == i)) for i, name in enumerate(LABEL_NAMES)}


def align_domains(src, tgt, min_ratings=1):
    """Keep shared users, then filter items and users by ``min_ratings``.

    A single pass in the order: common users -> items (per domain) -> users
    (at least ``min_ratings`` in each domain).
    """
    if len(src) == 0 or len(tgt) == 0:
        raise AlignmentError("both domains must be nonempty")
    if src.gamma_min != tgt.gamma_min or src.gamma_max != tgt.gamma_max:
        _log.warning("rating bounds differ between domains; using the union")
    gamma_min = min(src.gamma_min, tgt.gamma_min)
    gamma_max = max(src.gamma_max, tgt.gamma_max)

    common = set(src.user_ids) & set(tgt.user_ids)
    if not common:
        raise AlignmentError("no users shared between source and target")

    def keep_common(d):
        ids = np.array([uid in common for uid in d.user_ids], dtype=bool)
        return ids[d.users]

    src_keep = keep_common(src)
    tgt_keep = keep_common(tgt)

    def item_filter(d, keep):
        counts = np.bincount(d.items[keep], minlength=d.n_items)
        return keep & (counts[d.items] >= min_ratings)

    src_keep = item_filter(src, src_keep)
    tgt_keep = item_filter(tgt, tgt_keep)

    def user_counts(d, keep):
        counts = np.bincount(d.users[keep], minlength=d.n_users)
        return {d.user_ids[u]: int(c) for u, c in enumerate(counts) if c}

    sc, tc = user_counts(src, src_keep), user_counts(tgt, tgt_keep)
    users_ok = sorted(
        (u for u in common if sc.get(u, 0) >= min_ratings and tc.get(u, 0) >= min_ratings),
        key=str,
    )
    if not users_ok:
        raise AlignmentError("filtering removed every shared user")
    user_index = {u: i for i, u in enumerate(users_ok)}

    def finish(d, keep):
        ok = np.array([uid in user_index for uid in d.user_ids], dtype=bool)
        keep = keep & ok[d.users]
        if not keep.any():
            raise AlignmentError("a domain was emptied by filtering")
        items_present = np.unique(d.items[keep])
        remap = np.full(d.n_items, -1, dtype=np.int64)
        remap[items_present] = np.arange(len(items_present))
        u_map = np.array([user_index.get(uid, -1) for uid in d.user_ids], dtype=np.int64)
        return (
            tuple(d.item_ids[i] for i in items_present),
            u_map[d.users[keep]],
            remap[d.items[keep]],
            d.ratings[keep],
        )

    s_items, s_u, s_i, s_r = finish(src, src_keep)
    t_items, t_u, t_i, t_r = finish(tgt, tgt_keep)
    n_s = len(s_items)
    users = np.concatenate([s_u, t_u])
    items = np.concatenate([s_i, t_i + n_s])
    ratings = np.concatenate([s_r, t_r])
    domain = np.concatenate([np.full(len(s_r), SOURCE), np.full(len(t_r), TARGET)]).astype(np.int8)
    present = np.zeros((2, len(users_ok)), dtype=bool)
    present[domain, users] = True
    if not present.all():
        # a user can lose every rating in one domain when its items were filtered out
        raise AlignmentError("some users have no ratings left in one domain; lower min_ratings")
    return CrossDomainDataset(
        user_ids=tuple(users_ok),
        source_item_ids=s_items,
        target_item_ids=t_items,
        users=users,
        items=items,
        ratings=ratings,
        domain=domain,
        gamma_min=gamma_min,
        gamma_max=gamma_max,
    )


def split(ds, fractions=DEFAULT_FRACTIONS, seed=0):
    """Randomly label target ratings train/validation/test.

    One uniformly chosen rating per user and per item is forced into train,
    the remaining train slots are filled uniformly, and the leftovers are
    divided between validation and test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ProtocolError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng([seed, 0])
    tidx = np.flatnonzero(ds.domain == TARGET)
    n = len(tidx)
    order = rng.permutation(n)
    shuffled = tidx[order]

    forced = np.zeros(n, dtype=bool)
    # first occurrence in a random order == a uniformly chosen rating per entity
    _, first_u = np.unique(ds.users[shuffled], return_index=True)
    _, first_i = np.unique(ds.items[shuffled], return_index=True)
    forced[first_u] = True
    forced[first_i] = True

    n_train = round(fractions[0] * n)
    n_valid = round(fractions[1] * n)
    free = np.flatnonzero(~forced)  # positions within `shuffled`, already random order
    extra = max(0, n_train - int(forced.sum()))
    train_pos = np.concatenate([np.flatnonzero(forced), free[:extra]])
    rest = free[extra:]
    n_valid = min(n_valid, len(rest))
    labels = np.full(len(ds), TRAIN, dtype=np.int8)
    labels[shuffled[rest[:n_valid]]] = VALID
    labels[shuffled[rest[n_valid:]]] = TEST
    labels[shuffled[train_pos]] = TRAIN
    return replace(ds, labels=labels, focus_users=None, protocol=None)


def sparsify(ds, K, seed=0):
    """Remove ``floor(K/100 * |target train|)`` uniformly chosen target train ratings."""
    if not 0 <= K < 100:
        raise ProtocolError(f"K must lie in [0, 100), got {K}")
    idx = ds.target_index(TRAIN)
    n_remove = math.floor(K / 100 * len(idx))
    if n_remove == 0:
        return replace(ds, labels=ds._labels().copy())
    rng = np.random.default_rng([seed, 1])
    drop = rng.choice(idx, size=n_remove, replace=False)
    labels = ds._labels().copy()
    labels[drop] = REMOVED
    return replace(ds, labels=labels)


def cold_start_users(ds, threshold=COLD_START_THRESHOLD):
    """Users with fewer than ``threshold`` target train ratings."""
    return np.flatnonzero(ds.target_train_counts < threshold)


def full_cold_start(ds, K, seed=0):
    """Remove every target train rating of ``floor(K% * m)`` random users.

    Returns:
        (dataset, chosen_users) -- chosen users keep all source ratings.
    """
    if not 0 <= K < 100:
        raise ProtocolError(f"K must lie in [0, 100), got {K}")
    n_users = math.floor(K / 100 * ds.m)
    rng = np.random.default_rng([seed, 2])
    chosen = np.sort(rng.choice(ds.m, size=n_users, replace=False)).astype(np.int64)
    labels = ds._labels().copy()
    hit = ds.mask(TRAIN, TARGET) & np.isin(ds.users, chosen)
    labels[hit] = REMOVED
    return replace(ds, labels=labels, focus_users=chosen), chosen


def apply_protocol(ds, spec, fractions=DEFAULT_FRACTIONS):
    """Split ``ds`` and apply the protocol described by ``spec``."""
    if not spec.is_standard_setting:
        _log.warning("K=%s is not one of the standard settings for %s", spec.K, spec.kind)
    out = split(ds, fractions, seed=spec.seed)
    if spec.kind == "full_cold_start":
        out, _ = full_cold_start(out, spec.K, seed=spec.seed)
    else:
        out = sparsify(out, spec.K, seed=spec.seed)
        if spec.kind == "cold_start":
            out = replace(out, focus_users=cold_start_users(out))
    return replace(out, protocol=spec)


def evaluation_users(ds):
    """Users whose test ratings count under the dataset's protocol (None = all)."""
    if ds.protocol is None or ds.protocol.kind == "sparse":
        return None
    if ds.focus_users is not None:
        return ds.focus_users
    return cold_start_users(ds)


# -- persistence ---------------------------------------------------------------

MANIFEST_VERSION = 1


def save_dataset(ds, path):
    """Write the aligned (unsplit) dataset as JSON."""
    doc = {
        "format": "crossrec.dataset",
        "version": MANIFEST_VERSION,
        "gamma_min": ds.gamma_min,
        "gamma_max": ds.gamma_max,
        "user_ids": list(ds.user_ids),
        "source_item_ids": list(ds.source_item_ids),
        "target_item_ids": list(ds.target_item_ids),
        "users": ds.users.tolist(),
        "items": ds.items.tolist(),
        "ratings": ds.ratings.tolist(),
        "domain": ds.domain.tolist(),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_dataset(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "crossrec.dataset":
        raise DataError(f"{path} is not a dataset manifest")
    return CrossDomainDataset(
        user_ids=tuple(doc["user_ids"]),
        source_item_ids=tuple(doc["source_item_ids"]),
        target_item_ids=tuple(doc["target_item_ids"]),
        users=np.asarray(doc["users"], dtype=np.int64),
        items=np.asarray(doc["items"], dtype=np.int64),
        ratings=np.asarray(doc["ratings"], dtype=np.float64),
        domain=np.asarray(doc["domain"], dtype=np.int8),
        gamma_min=float(doc["gamma_min"]),
        gamma_max=float(doc["gamma_max"]),
    )


def save_manifest(ds, path):
    """Write split labels and protocol so the instance can be rebuilt exactly."""
    doc = {
        "format": "crossrec.protocol",
        "version": MANIFEST_VERSION,
        "protocol": ds.protocol.to_dict() if ds.protocol else None,
        "n_triples": len(ds),
        "labels": ds._labels().tolist(),
        "focus_users": None if ds.focus_users is None else ds.focus_users.tolist(),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_manifest(ds, path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "crossrec.protocol":
        raise DataError(f"{path} is not a protocol manifest")
    if doc["n_triples"] != len(ds):
        raise DataError(f"manifest covers {doc['n_triples']} triples, dataset has {len(ds)}")
    spec = ProtocolSpec(**doc["protocol"]) if doc["protocol"] else None
    focus = doc.get("focus_users")
    return replace(
        ds,
        labels=np.asarray(doc["labels"], dtype=np.int8),
        focus_users=None if focus is None else np.asarray(focus, dtype=np.int64),
        protocol=spec,
    )
