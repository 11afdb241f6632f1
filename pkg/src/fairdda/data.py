"""Dataset ingestion: raw file loaders, a planted-bias synthetic generator,
reproducible per-user splits, and a canonical TSV cache.

All feedback is implicit: any rating/play row becomes a positive
interaction. Users whose sensitive attribute is unknown are dropped, since
group fairness metrics are undefined for them. Ids are remapped to dense
0-based indices (sorted by original id) and the remapping tables are kept
on the dataset for decoding.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Interaction:
    user_id: int
    item_id: int
    timestamp: int = 0


@dataclass
class Dataset:
    """Implicit-feedback interactions plus per-user group labels."""

    M: int
    N: int
    user_ids: np.ndarray      # (E,) dense user index per interaction
    item_ids: np.ndarray      # (E,)
    timestamps: np.ndarray    # (E,)
    groups: np.ndarray        # (M,) sensitive class index
    n_classes: int
    user_decode: np.ndarray | list = field(default_factory=list)
    item_decode: np.ndarray | list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.user_ids.shape != self.item_ids.shape:
            raise ValueError("interaction arrays misaligned")
        if self.groups.shape[0] != self.M:
            raise ValueError("group labels must cover every user")
        if self.n_classes < 2:
            raise ValueError("need at least 2 sensitive classes")
        if self.user_ids.size == 0:
            raise ValueError("no interactions")
        counts = np.bincount(self.user_ids, minlength=self.M)
        if np.any(counts == 0):
            raise ValueError("every user needs at least one interaction")

    @property
    def n_interactions(self) -> int:
        return int(self.user_ids.size)

    def interaction_pairs(self) -> np.ndarray:
        return np.stack([self.user_ids, self.item_ids], axis=1)

    def user_item_sets(self):
        sets = [set() for _ in range(self.M)]
        for u, v in zip(self.user_ids, self.item_ids):
            sets[u].add(int(v))
        return sets

    def attribute_onehot(self) -> np.ndarray:
        oh = np.zeros((self.M, self.n_classes), dtype=np.float32)
        oh[np.arange(self.M), self.groups] = 1.0
        return oh


@dataclass
class Split:
    """Disjoint train/val/test interaction lists in canonical (u,v) order."""

    train: np.ndarray  # (E,2)
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for part in (self.train, self.val, self.test):
            if part.ndim != 2 or part.shape[1] != 2:
                raise ValueError("split parts must be (E,2) arrays")

    def part_sizes(self):
        return self.train.shape[0], self.val.shape[0], self.test.shape[0]


def per_user_items(pairs: np.ndarray, M: int):
    """List of per-user item arrays from an (E,2) pair list."""
    out = [[] for _ in range(M)]
    for u, v in pairs:
        out[u].append(int(v))
    return [np.array(sorted(items), dtype=np.int64) for items in out]


def _canonical_order(pairs: np.ndarray) -> np.ndarray:
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def _dedup_pairs(users, items, stamps):
    pairs = np.stack([users, items], axis=1)
    _, first = np.unique(pairs, axis=0, return_index=True)
    first.sort()
    return users[first], items[first], stamps[first]


def _densify(users, items, stamps):
    """Remap raw ids to dense 0-based indices sorted by original id."""
    uniq_u, dense_u = np.unique(users, return_inverse=True)
    uniq_v, dense_v = np.unique(items, return_inverse=True)
    return dense_u, dense_v, stamps, uniq_u, uniq_v


# ---------------------------------------------------------------------------
# MovieLens

ML_GENDER_INDEX = {"F": 0, "M": 1}


def load_movielens(dir_path: str, sensitive: str = "gender") -> Dataset:
    """Load a MovieLens-1M style directory (ratings.dat + users.dat).

    `sensitive` selects the attribute: `gender` (2 classes) or `occupation`
    (21 classes).
    """
    ratings_path = os.path.join(dir_path, "ratings.dat")
    users_path = os.path.join(dir_path, "users.dat")
    for p in (ratings_path, users_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    raw_u, raw_v, raw_t = [], [], []
    with open(ratings_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ValueError(f"ratings.dat line {lineno}: expected 4 fields")
            try:
                raw_u.append(int(parts[0]))
                raw_v.append(int(parts[1]))
                raw_t.append(int(parts[3]))
            except ValueError as exc:
                raise ValueError(f"ratings.dat line {lineno}: {exc}") from exc
    if not raw_u:
        raise ValueError("no interactions")

    profile: dict[int, tuple[str, int]] = {}
    with open(users_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 5:
                raise ValueError(f"users.dat line {lineno}: expected 5 fields")
            profile[int(parts[0])] = (parts[1], int(parts[3]))

    users = np.array(raw_u, dtype=np.int64)
    items = np.array(raw_v, dtype=np.int64)
    stamps = np.array(raw_t, dtype=np.int64)
    users, items, stamps = _dedup_pairs(users, items, stamps)

    missing = set(np.unique(users).tolist()) - set(profile)
    if missing:
        raise ValueError(f"{len(missing)} rated users have no profile row")

    raw_item_max = int(items.max())
    dense_u, dense_v, stamps, uniq_u, uniq_v = _densify(users, items, stamps)
    M, N = len(uniq_u), len(uniq_v)

    groups = np.zeros(M, dtype=np.int64)
    if sensitive == "gender":
        C = 2
        for i, orig in enumerate(uniq_u):
            g = profile[int(orig)][0]
            if g not in ML_GENDER_INDEX:
                raise ValueError(f"user {orig}: unknown gender code {g!r}")
            groups[i] = ML_GENDER_INDEX[g]
    elif sensitive == "occupation":
        C = 21
        for i, orig in enumerate(uniq_u):
            occ = profile[int(orig)][1]
            if not 0 <= occ < C:
                raise ValueError(f"user {orig}: occupation {occ} out of range")
            groups[i] = occ
    else:
        raise ValueError(f"unknown sensitive attribute {sensitive!r}")

    return Dataset(M=M, N=N, user_ids=dense_u, item_ids=dense_v,
                   timestamps=stamps, groups=groups, n_classes=C,
                   user_decode=uniq_u, item_decode=uniq_v,
                   meta={"source": "movielens", "sensitive": sensitive,
                         "raw_item_id_max": raw_item_max,
                         "interacting_items": N})


# ---------------------------------------------------------------------------
# LastFM

def load_lastfm(dir_path: str,
                plays_file: str = "usersha1-artmbid-artname-plays.tsv",
                profile_file: str = "usersha1-profile.tsv",
                plays_cols: tuple = (0, 1, 3),
                gender_col: int = 1) -> Dataset:
    """Load a LastFM-360K style directory of tab-separated files.

    Play counts are binarized (any row counts once); users whose profile
    lacks an m/f gender are dropped.
    """
    plays_path = os.path.join(dir_path, plays_file)
    profile_path = os.path.join(dir_path, profile_file)
    for p in (plays_path, profile_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)

    gender: dict[str, int] = {}
    with open(profile_path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) <= gender_col:
                continue
            g = parts[gender_col].strip().lower()
            if g in ("f", "m"):
                gender[parts[0]] = 0 if g == "f" else 1
    if not gender:
        raise ValueError("no user has a known gender")

    ucol, icol, ccol = plays_cols
    raw_u, raw_v = [], []
    with open(plays_path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) <= max(ucol, icol):
                raise ValueError(f"{plays_file} line {lineno}: too few columns")
            user = parts[ucol]
            item = parts[icol]
            if not item:
                continue
            if ccol < len(parts) and parts[ccol]:
                try:
                    if int(parts[ccol]) < 1:
                        continue
                except ValueError:
                    raise ValueError(f"{plays_file} line {lineno}: bad play count")
            if user in gender:
                raw_u.append(user)
                raw_v.append(item)
    if not raw_u:
        raise ValueError("no interactions")

    u_codes, dense_u0 = np.unique(np.array(raw_u), return_inverse=True)
    v_codes, dense_v0 = np.unique(np.array(raw_v), return_inverse=True)
    stamps = np.zeros(dense_u0.size, dtype=np.int64)
    du, dv, stamps = _dedup_pairs(dense_u0.astype(np.int64),
                                  dense_v0.astype(np.int64), stamps)
    dense_u, dense_v, stamps, uniq_u, uniq_v = _densify(du, dv, stamps)
    M, N = len(uniq_u), len(uniq_v)
    groups = np.array([gender[str(u_codes[i])] for i in uniq_u], dtype=np.int64)

    return Dataset(M=M, N=N, user_ids=dense_u, item_ids=dense_v,
                   timestamps=stamps, groups=groups, n_classes=2,
                   user_decode=[str(u_codes[i]) for i in uniq_u],
                   item_decode=[str(v_codes[i]) for i in uniq_v],
                   meta={"source": "lastfm"})


# ---------------------------------------------------------------------------
# synthetic generator

def generate_synthetic(M: int, N: int, C: int, bias_strength: float, seed: int,
                       n_per_user: int = 30, shared_frac: float = 0.5) -> Dataset:
    """Planted-bias dataset: items split into C group-favored pools plus a
    shared pool; a user in group c draws from its favored pool with
    probability `bias_strength`, otherwise from the shared pool.
    """
    if M < 10 or N < 10:
        raise ValueError("M and N must be at least 10")
    if not 0.0 <= bias_strength <= 1.0:
        raise ValueError("bias_strength must lie in [0,1]")
    if C < 2:
        raise ValueError("need at least 2 groups")
    rng = np.random.Generator(np.random.PCG64(seed))

    n_shared = int(round(N * shared_frac))
    shared = np.arange(n_shared)
    pool_sizes = [(N - n_shared) // C + (1 if c < (N - n_shared) % C else 0)
                  for c in range(C)]
    pools, start = [], n_shared
    for size in pool_sizes:
        pools.append(np.arange(start, start + size))
        start += size

    groups = np.arange(M, dtype=np.int64) % C
    users, items = [], []
    for u in range(M):
        favored = pools[groups[u]]
        picks = set()
        for _ in range(n_per_user):
            use_favored = rng.random() < bias_strength
            pool = favored if use_favored else shared
            if pool.size == 0:
                pool = shared if use_favored else favored
            picks.add(int(pool[rng.integers(pool.size)]))
        for v in sorted(picks):
            users.append(u)
            items.append(v)

    user_ids = np.array(users, dtype=np.int64)
    item_ids = np.array(items, dtype=np.int64)
    return Dataset(M=M, N=N, user_ids=user_ids, item_ids=item_ids,
                   timestamps=np.zeros(user_ids.size, dtype=np.int64),
                   groups=groups, n_classes=C,
                   user_decode=np.arange(M), item_decode=np.arange(N),
                   meta={"source": "synthetic", "bias_strength": bias_strength,
                         "n_shared": n_shared})


# ---------------------------------------------------------------------------
# splitting

def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Per-user random split at the given train/val/test ratios.

    Users with fewer than 3 interactions contribute everything to train and
    are excluded from evaluation; evaluated users keep at least 1 train and
    1 test interaction.
    """
    r_train, r_val, r_test = ratios
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if r_train <= 0.0:
        raise ValueError("train share must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    by_user = per_user_items(dataset.interaction_pairs(), dataset.M)
    train, val, test = [], [], []
    for u in range(dataset.M):
        items = by_user[u]
        n = items.size
        perm = items[rng.permutation(n)]
        if n < 3:
            for v in perm:
                train.append((u, v))
            continue
        n_test = max(1, int(n * r_test)) if r_test > 0 else 0
        n_val = int(n * r_val) if r_val > 0 else 0
        n_train = n - n_test - n_val
        if n_train < 1:
            n_val = max(0, n_val - 1)
            n_train = n - n_test - n_val
        for v in perm[:n_train]:
            train.append((u, v))
        for v in perm[n_train:n_train + n_val]:
            val.append((u, v))
        for v in perm[n_train + n_val:]:
            test.append((u, v))

    def pack(rows):
        if not rows:
            return np.zeros((0, 2), dtype=np.int64)
        return _canonical_order(np.array(rows, dtype=np.int64))

    return Split(train=pack(train), val=pack(val), test=pack(test), seed=seed)


# ---------------------------------------------------------------------------
# canonical cache

def save_canonical(dataset: Dataset, dir_path: str):
    os.makedirs(dir_path, exist_ok=True)
    pairs = _canonical_order(dataset.interaction_pairs())
    with open(os.path.join(dir_path, "interactions.tsv"), "w") as fh:
        for u, v in pairs:
            fh.write(f"{u}\t{v}\n")
    with open(os.path.join(dir_path, "attributes.tsv"), "w") as fh:
        for u in range(dataset.M):
            fh.write(f"{u}\t{dataset.groups[u]}\n")


def load_canonical(dir_path: str) -> Dataset:
    inter_path = os.path.join(dir_path, "interactions.tsv")
    attr_path = os.path.join(dir_path, "attributes.tsv")
    for p in (inter_path, attr_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    pairs = np.loadtxt(inter_path, dtype=np.int64, ndmin=2)
    if pairs.size == 0:
        raise ValueError("no interactions")
    attrs = np.loadtxt(attr_path, dtype=np.int64, ndmin=2)
    M = attrs.shape[0]
    groups = np.zeros(M, dtype=np.int64)
    groups[attrs[:, 0]] = attrs[:, 1]
    N = int(pairs[:, 1].max()) + 1
    return Dataset(M=M, N=N, user_ids=pairs[:, 0], item_ids=pairs[:, 1],
                   timestamps=np.zeros(pairs.shape[0], dtype=np.int64),
                   groups=groups, n_classes=int(groups.max()) + 1,
                   user_decode=np.arange(M), item_decode=np.arange(N),
                   meta={"source": "canonical"})
