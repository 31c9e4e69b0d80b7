"""Ranking metrics, codebook usage diagnostics and SID drift bookkeeping."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# ranking


def _rank(ranked: Sequence[int], target: int) -> int | None:
    for i, item in enumerate(ranked):
        if item == target:
            return i + 1
    return None


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    if k <= 0:
        raise ValueError("k must be positive")
    r = _rank(ranked, target)
    return 1.0 if r is not None and r <= k else 0.0


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    if k <= 0:
        raise ValueError("k must be positive")
    r = _rank(ranked, target)
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


def ranking_report(rankings: Sequence[Sequence[int]], targets: Sequence[int], ks=(5, 10)) -> dict[str, float]:
    """Recall@k and NDCG@k averaged over users."""
    if len(rankings) != len(targets):
        raise ValueError("one ranking per target is required")
    out = {}
    for k in ks:
        if not rankings:
            out[f"recall@{k}"] = 0.0
            out[f"ndcg@{k}"] = 0.0
            continue
        out[f"recall@{k}"] = float(np.mean([recall_at_k(r, t, k) for r, t in zip(rankings, targets)]))
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, t, k) for r, t in zip(rankings, targets)]))
    return out


# ---------------------------------------------------------------------------
# code usage


def code_coverage(codes: np.ndarray, K: int) -> float:
    """Fraction of the ``K`` codes used by at least one item."""
    codes = np.asarray(codes)
    return len(np.unique(codes)) / K


def coverage_per_level(codes: np.ndarray, K: int) -> list[float]:
    codes = np.asarray(codes)
    return [code_coverage(codes[:, j], K) for j in range(codes.shape[1])]


def coverage_balance(codes: np.ndarray, K: int) -> tuple[float, float]:
    """Mean and (population) standard deviation of per-level coverage."""
    cov = coverage_per_level(codes, K)
    return float(np.mean(cov)), float(np.std(cov))


def usage_distribution(codes: np.ndarray, K: int) -> np.ndarray:
    """(levels, K) empirical code-usage probabilities."""
    codes = np.asarray(codes)
    n, m = codes.shape
    q = np.zeros((m, K))
    for j in range(m):
        q[j] = np.bincount(codes[:, j], minlength=K)[:K] / n
    return q


def effective_codes(q) -> float:
    """``exp(H(q))`` with ``0 * log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("q must be a probability vector")
    nz = q[q > 0]
    return float(math.exp(-np.sum(nz * np.log(nz))))


def write_usage_csv(path, q: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "code", "probability"])
        for j, row in enumerate(q):
            for c, p in enumerate(row):
                w.writerow([j, c, repr(float(p))])
    return path


# ---------------------------------------------------------------------------
# SID dynamics


@dataclass
class AssignmentSnapshot:
    """Per-item codes at the end of an epoch.

    ``deterministic`` and ``sampled`` are (n_items, m) code arrays; the
    conflict token is not part of either. ``sampled`` is ``None`` when no
    training-time assignment was recorded (e.g. right after pretraining).
    """

    epoch: int
    deterministic: np.ndarray
    sampled: np.ndarray | None = None

    def __post_init__(self):
        self.deterministic = np.asarray(self.deterministic, dtype=np.int64)
        if self.sampled is not None:
            self.sampled = np.asarray(self.sampled, dtype=np.int64)
            if self.sampled.shape != self.deterministic.shape:
                raise ValueError("sampled and deterministic codes must have the same shape")


def _changed(a: AssignmentSnapshot, b: AssignmentSnapshot) -> np.ndarray:
    if a.deterministic.shape != b.deterministic.shape:
        raise ValueError("snapshots cover different catalogs")
    return (a.deterministic != b.deterministic).any(axis=1)


def incremental_drift(prev: AssignmentSnapshot, cur: AssignmentSnapshot) -> float:
    return float(_changed(prev, cur).mean())


def cumulative_drift(init: AssignmentSnapshot, cur: AssignmentSnapshot) -> float:
    return float(_changed(init, cur).mean())


def train_inference_agreement(snapshot: AssignmentSnapshot) -> float:
    if snapshot.sampled is None:
        raise ValueError("snapshot has no sampled assignments")
    return float((snapshot.sampled == snapshot.deterministic).all(axis=1).mean())


# ---------------------------------------------------------------------------
# objective mismatch construction


@dataclass(frozen=True)
class MismatchResult:
    two_stage: float
    joint: float
    gap: float
    descent_two_stage: float
    descent_joint: float
    descent_gap: float


def mismatch_demo(M: float, lr: float = 0.1, steps: int = 2000) -> MismatchResult:
    """Two-stage vs joint optimum for ``L_aux = (phi - 1)^2`` and
    ``L_rec = M (phi^2 + theta^2)``.

    Stage one fixes ``phi`` at the minimiser of ``L_aux``; stage two can then
    only reach ``L_rec = M``, while joint minimisation of ``L_rec`` reaches 0.
    The gradient-descent route repeats both optimisations numerically.
    """
    if not M > 0:
        raise ValueError("M must be positive")

    def rec(phi, theta):
        return M * (phi * phi + theta * theta)

    analytic_two = rec(1.0, 0.0)
    analytic_joint = rec(0.0, 0.0)

    # stage 1: phi <- argmin (phi - 1)^2, then theta <- argmin L_rec(theta, phi)
    phi, theta = 0.0, 1.0
    for _ in range(steps):
        phi -= lr * 2.0 * (phi - 1.0)
    step = lr / M  # keeps the quadratic's step size stable for any M
    for _ in range(steps):
        theta -= step * 2.0 * M * theta
    two = rec(phi, theta)

    phi, theta = 1.0, 1.0
    for _ in range(steps):
        phi, theta = phi - step * 2.0 * M * phi, theta - step * 2.0 * M * theta
    joint = rec(phi, theta)
    return MismatchResult(analytic_two, analytic_joint, analytic_two - analytic_joint, two, joint, two - joint)


# ---------------------------------------------------------------------------
# report rows


@dataclass
class EpochReport:
    epoch: int
    variant: str
    metrics: dict[str, float]
    coverage: list[float]
    coverage_mean: float
    coverage_std: float
    eff_codes: list[float]
    incr_drift: float
    cum_drift: float
    agreement: float
    sigma: float
    hot_count: list[int]
    gen_loss: float
    vq_loss: float
    recon_loss: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"epoch": self.epoch, "variant": self.variant}
        out.update(self.metrics)
        out.update(
            {
                "coverage_per_level": self.coverage,
                "coverage_mean": self.coverage_mean,
                "coverage_std": self.coverage_std,
                "eff_codes_per_level": self.eff_codes,
                "incr_drift": self.incr_drift,
                "cum_drift": self.cum_drift,
                "agreement": self.agreement,
                "sigma": self.sigma,
                "hot_count_per_level": self.hot_count,
                "L_gen": self.gen_loss,
                "L_vq": self.vq_loss,
                "L_recon": self.recon_loss,
            }
        )
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.row(), sort_keys=False)
