"""Interaction logs, content features, the synthetic benchmark and splits.

File formats:

* interactions: UTF-8 TSV ``user_id<TAB>item_id<TAB>timestamp`` with an
  optional header line (detected when the timestamp column is not numeric).
* content, text: CSV ``item_id,v1,...,vd`` (optional header), keyed by the
  raw item id of the interaction file.
* content, binary: little-endian; an 8-byte header of two uint32 values
  (item count, dimension) followed by ``count * dimension`` float32 values;
  row ``i`` belongs to the item whose raw id is the integer ``i``.

Raw ids are remapped to dense ids ``0 .. n-1`` in first-seen order after
sorting (0-based; the remap tables keep the raw ids).
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class InteractionLog:
    """Chronological item sequences per dense user id.

    ``user_ids`` / ``item_ids`` map dense ids back to the raw ids.
    """

    sequences: list[list[int]]
    timestamps: list[list[float]]
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return sum(len(s) for s in self.sequences)

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.item_ids)}

    def user_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.user_ids)}

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            out.extend((self.user_ids[u], self.item_ids[i], t) for i, t in zip(seq, ts))
        return out


def _from_rows(rows: Sequence[tuple[str, str, float]]) -> InteractionLog:
    per_user: dict[str, list[tuple[float, int, str]]] = {}
    for pos, (user, item, ts) in enumerate(rows):
        per_user.setdefault(user, []).append((ts, pos, item))
    user_ids = sorted(per_user, key=_natural_key)
    item_map: dict[str, int] = {}
    sequences, timestamps = [], []
    for user in user_ids:
        events = sorted(per_user[user])  # stable on file position for equal timestamps
        seq = []
        for ts, _, item in events:
            if item not in item_map:
                item_map[item] = len(item_map)
            seq.append(item_map[item])
        sequences.append(seq)
        timestamps.append([ts for ts, _, _ in events])
    return InteractionLog(sequences, timestamps, user_ids, list(item_map))


def _natural_key(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def load_interactions(path) -> InteractionLog:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            user, item, ts = (p.strip() for p in parts)
            try:
                t = float(ts)
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: timestamp {ts!r} is not a number") from None
            if not user or not item:
                raise ValueError(f"{path}:{lineno}: empty user or item id")
            rows.append((user, item, t))
    return _from_rows(rows)


def save_interactions(path, log: InteractionLog) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for user, item, ts in log.rows():
            fh.write(f"{user}\t{item}\t{ts!r}\n")
    return path


def filter_min_interactions(log: InteractionLog, threshold: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``threshold`` interactions until
    nothing changes, then re-densify ids."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    rows = log.rows()
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for u, i, _ in rows:
            user_counts[u] = user_counts.get(u, 0) + 1
            item_counts[i] = item_counts.get(i, 0) + 1
        kept = [r for r in rows if user_counts[r[0]] >= threshold and item_counts[r[1]] >= threshold]
        if len(kept) == len(rows):
            break
        rows = kept
    return _from_rows(rows)


# ---------------------------------------------------------------------------
# content features


def load_content(path, log: InteractionLog) -> np.ndarray:
    """Content matrix (n_items, d) aligned with the dense item ids of ``log``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"content file not found: {path}")
    if path.suffix.lower() in (".bin", ".f32"):
        return _load_content_binary(path, log)
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
            table[row[0].strip()] = vec
    missing = [raw for raw in log.item_ids if raw not in table]
    if missing:
        raise ValueError(f"{path}: no content vector for items {missing[:5]}")
    mat = np.stack([table[raw] for raw in log.item_ids]) if log.item_ids else np.zeros((0, 0))
    if not np.isfinite(mat).all():
        raise ValueError(f"{path}: content vectors must be finite")
    return mat


def _load_content_binary(path: Path, log: InteractionLog) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", blob[:8])
    body = np.frombuffer(blob, dtype="<f4", offset=8)
    if body.size != count * dim:
        raise ValueError(f"{path}: expected {count}x{dim} floats, found {body.size}")
    try:
        rows = np.array([int(raw) for raw in log.item_ids], dtype=np.int64)
    except ValueError:
        raise ValueError(f"{path}: binary content needs integer raw item ids") from None
    if rows.size and (rows.min() < 0 or rows.max() >= count):
        raise ValueError(f"{path}: {count} vectors do not cover raw item id {rows.max()}")
    mat = body.reshape(count, dim)[rows].astype(np.float64)
    if not np.isfinite(mat).all():
        raise ValueError(f"{path}: content vectors must be finite")
    return mat


def save_content_binary(path, content: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    content = np.asarray(content, dtype="<f4")
    path.write_bytes(struct.pack("<II", *content.shape) + content.tobytes())
    return path


def save_content_csv(path, log: InteractionLog, content: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for raw, vec in zip(log.item_ids, content):
            w.writerow([raw, *(repr(float(v)) for v in vec)])
    return path


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SynthConfig:
    clusters: int = 8
    items: int = 200
    users: int = 500
    min_len: int = 5
    max_len: int = 12
    dim: int = 16
    content_noise: float = 0.3
    stay: float = 0.6  # weight of the current cluster in the transition matrix
    sharpness: float = 1.0  # exponent on within-cluster item popularity
    seed: int = 0


def synth_generate(cfg: SynthConfig) -> tuple[InteractionLog, np.ndarray]:
    """Clustered catalog plus Markov-walk users.

    Items are split evenly over clusters; content is the cluster centroid
    plus isotropic noise. Each user starts in a random cluster and moves
    between clusters with a random affinity matrix; each step draws an item
    from the current cluster with a fixed popularity skew.
    """
    if cfg.clusters < 1 or cfg.items < cfg.clusters:
        raise ValueError("need 1 <= clusters <= items")
    if cfg.users < 1 or cfg.min_len < 1 or cfg.max_len < cfg.min_len or cfg.dim < 1:
        raise ValueError("infeasible synthetic sizes")
    rng = np.random.default_rng(cfg.seed)
    cluster_of = np.arange(cfg.items) % cfg.clusters
    centroids = rng.normal(size=(cfg.clusters, cfg.dim))
    content = centroids[cluster_of] + cfg.content_noise * rng.normal(size=(cfg.items, cfg.dim))

    affinity = rng.dirichlet(np.ones(cfg.clusters), size=cfg.clusters)
    transition = cfg.stay * np.eye(cfg.clusters) + (1 - cfg.stay) * affinity
    members = [np.flatnonzero(cluster_of == c) for c in range(cfg.clusters)]
    popularity = []
    for idx in members:
        w = (1.0 + np.arange(len(idx))) ** -cfg.sharpness
        popularity.append(w[rng.permutation(len(idx))] / w.sum())

    sequences, timestamps = [], []
    for _ in range(cfg.users):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        c = int(rng.integers(cfg.clusters))
        seq = []
        for _ in range(length):
            seq.append(int(rng.choice(members[c], p=popularity[c])))
            c = int(rng.choice(cfg.clusters, p=transition[c]))
        sequences.append(seq)
        timestamps.append([float(t) for t in range(length)])
    # the whole catalog is kept, including items nobody happened to pick
    log = InteractionLog(
        sequences, timestamps, [str(u) for u in range(cfg.users)], [str(i) for i in range(cfg.items)]
    )
    return log, content


# ---------------------------------------------------------------------------
# leave-one-out


@dataclass
class SplitDataset:
    """Leave-one-out views. ``train`` holds one prefix (up to n-2) per user;
    ``valid``/``test`` hold ``(history, target)`` pairs."""

    train: list[list[int]]
    valid: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]
    n_items: int

    def digest(self) -> str:
        h = hashlib.sha256()
        for seq in self.train:
            h.update(np.asarray(seq, dtype=np.int64).tobytes() + b"|")
        for hist, tgt in self.valid + self.test:
            h.update(np.asarray(hist + [tgt], dtype=np.int64).tobytes() + b"|")
        return h.hexdigest()


def leave_one_out_split(log: InteractionLog) -> SplitDataset:
    train, valid, test = [], [], []
    for u, seq in enumerate(log.sequences):
        if len(seq) < 3:
            raise ValueError(f"user {log.user_ids[u] if log.user_ids else u} has {len(seq)} < 3 interactions")
        train.append(list(seq[:-2]))
        valid.append((list(seq[:-2]), seq[-2]))
        test.append((list(seq[:-1]), seq[-1]))
    return SplitDataset(train, valid, test, log.n_items)


def training_pairs(sequences: Sequence[Sequence[int]], max_history: int) -> tuple[list[list[int]], list[int]]:
    """Every (prefix, next item) pair inside the training sequences."""
    hists, targets = [], []
    for seq in sequences:
        for t in range(1, len(seq)):
            hists.append(list(seq[max(0, t - max_history):t]))
            targets.append(seq[t])
    return hists, targets


def pad_histories(hists: Sequence[Sequence[int]], max_history: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad the last ``max_history`` items of each history to a common length."""
    length = max(1, min(max_history, max((len(h) for h in hists), default=1)))
    items = np.zeros((len(hists), length), dtype=np.int64)
    mask = np.zeros((len(hists), length), dtype=bool)
    for i, h in enumerate(hists):
        h = list(h)[-length:]
        if h:
            items[i, length - len(h):] = h
            mask[i, length - len(h):] = True
    return items, mask
