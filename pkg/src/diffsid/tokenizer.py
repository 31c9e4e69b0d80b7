"""Residual-quantization tokenizer with exploratory (Gumbel-noised) assignment.

Codes and item ids are 0-based throughout the package: a level-``j`` code is
an integer in ``[0, K)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decay import NoiseDirective
from .optim import AdamW

log = logging.getLogger(__name__)

SIMILARITIES = ("neg_sq_euclidean", "dot")
SURROGATES = ("soft", "hard")


@dataclass
class TokenizerConfig:
    input_dim: int
    codebook_size: int = 256
    levels: int = 3
    code_dim: int = 32
    tau: float = 2.0
    similarity: str = "neg_sq_euclidean"
    encoder_widths: tuple[int, ...] = (64,)
    commitment: float = 0.25
    conflict_cap: int = 256
    logit_scale: float = 1.0  # multiplies the similarity before noise is added

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        if self.codebook_size < 1 or self.levels < 1:
            raise ValueError("need codebook_size >= 1 and levels >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}")
        if self.conflict_cap < 1:
            raise ValueError("conflict_cap must be >= 1")

    @property
    def K(self) -> int:
        return self.codebook_size

    @property
    def m(self) -> int:
        return self.levels


@dataclass(frozen=True)
class SemanticId:
    codes: tuple[int, ...]
    conflict: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return (*self.codes, self.conflict)


@dataclass
class LevelRecord:
    logits: np.ndarray  # (n, K)
    noise: np.ndarray  # (n, K), exactly what was added to the logits
    probs: np.ndarray  # (n, K), softmax((logits + noise) / tau)
    codes: np.ndarray  # (n,)
    soft: np.ndarray  # (n, d), probability-weighted codebook mixture


@dataclass
class AssignmentRecord:
    levels: list[LevelRecord] = field(default_factory=list)
    residuals: list[Tensor] = field(default_factory=list)
    # per level (n, K): forward one-hot of the hard code, backward through the surrogate
    assignments: list[Tensor] = field(default_factory=list)
    quantized: Tensor | None = None

    @property
    def codes(self) -> np.ndarray:
        return np.stack([lv.codes for lv in self.levels], axis=1)


class Quantized(NamedTuple):
    codes: np.ndarray  # (n, m)
    quantized: Tensor
    record: AssignmentRecord


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MLP:
    def __init__(self, widths: list[int], rng: np.random.Generator, prefix: str):
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(ad.parameter(_linear_init(rng, a, b), f"{prefix}.w{i}"))
            self.biases.append(ad.parameter(np.zeros(b), f"{prefix}.b{i}"))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected inputs of width {self.in_dim}, got {x.shape[-1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if i < last:
                x = ad.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


class RQTokenizer:
    def __init__(self, config: TokenizerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        widths = [config.input_dim, *config.encoder_widths, config.code_dim]
        self.encoder = MLP(widths, rng, "encoder")
        self.codebooks = [
            ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(config.code_dim), (config.K, config.code_dim)), f"codebook.{j}")
            for j in range(config.m)
        ]

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.codebooks

    # -- single operations -------------------------------------------------

    def encode(self, content) -> Tensor:
        return self.encoder(content if isinstance(content, Tensor) else Tensor(content))

    def similarity_logits(self, residual: Tensor, level: int) -> Tensor:
        book = self.codebooks[level]
        if self.config.similarity == "dot":
            sim = ad.matmul(residual, ad.transpose(book, (1, 0)))
        else:
            sim = ad.neg_sq_dist(residual, book)
        if self.config.logit_scale != 1.0:
            sim = ad.scale(sim, self.config.logit_scale)
        return sim

    def soft_embedding(self, probs: Tensor, level: int) -> Tensor:
        return ad.matmul(probs, self.codebooks[level])

    # -- assignment ----------------------------------------------------------

    def quantize(
        self,
        r: Tensor,
        directive: NoiseDirective | None = None,
        gumbel: np.ndarray | None = None,
        surrogate: str = "soft",
    ) -> Quantized:
        """Residual quantization of a batch of latents ``r`` (n, d).

        Each level picks ``argmax(logits + noise)`` and passes the chosen code
        vector forward; the backward pass goes through ``surrogate``:

        * ``"soft"`` -- the Gumbel-Softmax probabilities, so every code
          receives gradient in proportion to its probability;
        * ``"hard"`` -- only the selected code's logit and vector (classic
          straight-through).

        ``gumbel`` holds standard Gumbel draws of shape (n, m, K); it may be
        omitted when the directive is deterministic.
        """
        if surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        cfg = self.config
        n = r.shape[0]
        if directive is None:
            directive = NoiseDirective.off(cfg.m)
        if gumbel is None and not directive.deterministic:
            raise ValueError("a noisy directive needs Gumbel draws")
        record = AssignmentRecord()
        residual = r
        quantized = None
        for j in range(cfg.m):
            book = self.codebooks[j]
            logits = self.similarity_logits(residual, j)
            noise = directive.levels[j].sample(gumbel[:, j, :]) if gumbel is not None else np.zeros((n, cfg.K))
            noisy = logits.data + noise
            codes = np.argmax(noisy, axis=1)
            onehot = np.zeros((n, cfg.K))
            onehot[np.arange(n), codes] = 1.0
            if surrogate == "soft":
                probs = ad.softmax(ad.scale(ad.add(logits, Tensor(noise)), 1.0 / cfg.tau))
            else:
                # value exactly one-hot; gradient reaches only the chosen logit
                delta = ad.sub(logits, ad.detached(logits))
                probs = ad.add(Tensor(onehot), ad.scale(ad.mul(Tensor(onehot), delta), 1.0 / cfg.tau))
            soft = self.soft_embedding(probs, j)
            out = ad.straight_through(book.data[codes], soft)
            record.levels.append(LevelRecord(logits.data, noise, probs.data, codes, soft.data))
            record.residuals.append(residual)
            record.assignments.append(ad.straight_through(onehot, probs))
            quantized = out if quantized is None else ad.add(quantized, out)
            residual = ad.sub(residual, out)
        record.quantized = quantized
        return Quantized(record.codes, quantized, record)

    def assign_deterministic(self, r) -> np.ndarray:
        """Zero-noise codes (n, m) for latents ``r``; the inference-time SIDs."""
        with ad.no_grad():
            x = r if isinstance(r, Tensor) else Tensor(r)
            return self.quantize(x).codes

    def deterministic_codes(self, content: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.quantize(self.encode(content)).codes

    def vq_losses(self, r: Tensor, record: AssignmentRecord) -> tuple[Tensor, Tensor]:
        """``(L_vq, L_recon)`` averaged over the batch.

        ``L_recon = ||r - q||^2`` on the straight-through quantized vector and
        ``L_vq = sum_j ||sg(res_j) - e_c||^2 + commitment * ||res_j - sg(e_c)||^2``.
        """
        n = r.shape[0]
        recon = ad.scale(ad.sq_error_sum(r, record.quantized), 1.0 / n)
        vq = None
        for j, (res, level) in enumerate(zip(record.residuals, record.levels)):
            chosen = ad.gather_rows(self.codebooks[j], level.codes)
            codebook_term = ad.sq_error_sum(ad.detached(res), chosen)
            commit_term = ad.sq_error_sum(res, ad.detached(chosen))
            term = ad.add(codebook_term, ad.scale(commit_term, self.config.commitment))
            vq = term if vq is None else ad.add(vq, term)
        return ad.scale(vq, 1.0 / n), recon

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.parameters():
            out[p.name] = p.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing tokenizer tensor {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    """Content reconstruction error (mean squared norm per item) before and
    after training, plus the latent quantization residual for reference."""

    initial_recon: float
    final_recon: float
    history: list[dict]
    initial_latent: float = 0.0
    final_latent: float = 0.0


def _classic_quantize(tok: RQTokenizer, r: Tensor):
    """Nearest-code residual quantization with the classic straight-through
    estimator ``r + sg(q - r)``; residuals are taken against detached codes."""
    cfg = tok.config
    residuals = []
    codes = []
    res = r
    q_hard = np.zeros(r.shape)
    for j in range(cfg.m):
        logits = tok.similarity_logits(ad.stop_gradient(res), j).data
        c = np.argmax(logits, axis=1)
        residuals.append(res)
        codes.append(c)
        chosen = tok.codebooks[j].data[c]
        q_hard = q_hard + chosen
        res = ad.sub(res, Tensor(chosen))
    q_st = ad.add(r, Tensor(q_hard - r.data))
    return residuals, codes, q_st


def _classic_vq(tok: RQTokenizer, residuals, codes, n: int) -> Tensor:
    vq = None
    for j, (res, c) in enumerate(zip(residuals, codes)):
        chosen = ad.gather_rows(tok.codebooks[j], c)
        term = ad.add(
            ad.sq_error_sum(ad.detached(res), chosen),
            ad.scale(ad.sq_error_sum(res, ad.detached(chosen)), tok.config.commitment),
        )
        vq = term if vq is None else ad.add(vq, term)
    return ad.scale(vq, 1.0 / n)


def _seed_points(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: each new seed is drawn with probability
    proportional to its squared distance from the seeds picked so far."""
    n = x.shape[0]
    picks = [int(rng.integers(n))]
    d2 = np.sum((x - x[picks[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            picks.append(int(rng.integers(n)))
        else:
            picks.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((x - x[picks[-1]]) ** 2, axis=1))
    return x[picks].copy()


def _init_codebooks_from_data(tok: RQTokenizer, content: np.ndarray, rng: np.random.Generator) -> None:
    with ad.no_grad():
        res = tok.encode(content).data
    for j, book in enumerate(tok.codebooks):
        book.data = _seed_points(res, tok.config.K, rng)
        with ad.no_grad():
            logits = tok.similarity_logits(Tensor(res), j).data
        res = res - book.data[np.argmax(logits, axis=1)]


def pretrain(
    tok: RQTokenizer,
    corpus: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    decoder_widths: tuple[int, ...] = (64,),
) -> PretrainResult:
    """Train the tokenizer as a standard RQ-VAE on ``corpus`` (n, input_dim).

    A throwaway MLP decoder maps the quantized latent back to the content;
    the objective is content reconstruction plus ``L_vq`` with nearest-code
    assignment and the classic straight-through estimator. Codebooks are
    seeded from encoder outputs before the first step, and the reported
    reconstruction is measured after seeding. Zero epochs leaves the
    tokenizer untouched.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ValueError("pretraining corpus must be a non-empty (n, d) array")
    if epochs <= 0:
        with ad.no_grad():
            r0 = tok.encode(corpus)
            latent = tok.vq_losses(r0, tok.quantize(r0).record)[1].item()
        return PretrainResult(float("nan"), float("nan"), [], latent, latent)
    rng = np.random.default_rng(seed)
    _init_codebooks_from_data(tok, corpus, rng)
    decoder = MLP([tok.config.code_dim, *decoder_widths, tok.config.input_dim], rng, "decoder")
    opt = AdamW(tok.parameters() + decoder.parameters(), lr=lr, weight_decay=0.0)
    x = Tensor(corpus)
    n = corpus.shape[0]

    def measure():
        with ad.no_grad():
            r = tok.encode(x)
            _, _, q_st = _classic_quantize(tok, r)
            content = ad.sq_error_sum(decoder(q_st), x).item() / n
            latent = tok.vq_losses(r, tok.quantize(r).record)[1].item()
        return content, latent

    initial, initial_latent = measure()
    history = []
    for epoch in range(epochs):
        ad.reset_tape()
        opt.zero_grad()
        r = tok.encode(x)
        residuals, codes, q_st = _classic_quantize(tok, r)
        content = ad.scale(ad.sq_error_sum(decoder(q_st), x), 1.0 / n)
        vq = _classic_vq(tok, residuals, codes, n)
        ad.backward(ad.add(content, vq))
        opt.step()
        history.append({"epoch": epoch + 1, "recon": content.item(), "vq": vq.item()})
    ad.reset_tape()
    final, final_latent = measure()
    log.info("pretrain: recon %.4f -> %.4f over %d epochs", initial, final, epochs)
    return PretrainResult(initial, final, history, initial_latent, final_latent)


# ---------------------------------------------------------------------------
# conflict resolution / item index


class ConflictOverflow(ValueError):
    pass


class SidIndex:
    """Bijection between items and full semantic IDs (codes + conflict token)."""

    def __init__(self, codes: np.ndarray, conflict: np.ndarray):
        self.codes = np.asarray(codes, dtype=np.int64)
        self.conflict = np.asarray(conflict, dtype=np.int64)
        self._lookup = {tuple(row): i for i, row in enumerate(self.sid_matrix.tolist())}

    @property
    def sid_matrix(self) -> np.ndarray:
        return np.concatenate([self.codes, self.conflict[:, None]], axis=1)

    def __len__(self) -> int:
        return len(self.codes)

    def item_to_sid(self, item: int) -> SemanticId:
        return SemanticId(tuple(int(c) for c in self.codes[item]), int(self.conflict[item]))

    def sid_to_item(self, sid) -> int | None:
        key = sid.as_tuple() if isinstance(sid, SemanticId) else tuple(int(t) for t in sid)
        return self._lookup.get(key)

    def __contains__(self, sid) -> bool:
        return self.sid_to_item(sid) is not None


def resolve_conflicts(codes: np.ndarray, cap: int) -> SidIndex:
    """Give items sharing the same code tuple conflict tokens 0, 1, ... in item order."""
    codes = np.asarray(codes, dtype=np.int64)
    conflict = np.zeros(len(codes), dtype=np.int64)
    seen: dict[tuple, list[int]] = {}
    for item, row in enumerate(codes.tolist()):
        group = seen.setdefault(tuple(row), [])
        conflict[item] = len(group)
        group.append(item)
    too_big = {k: v for k, v in seen.items() if len(v) > cap}
    if too_big:
        listing = "; ".join(f"{k}: {len(v)} items {v[:8]}{'...' if len(v) > 8 else ''}" for k, v in too_big.items())
        raise ConflictOverflow(f"conflict vocabulary of {cap} exceeded by groups {listing}")
    return SidIndex(codes, conflict)
