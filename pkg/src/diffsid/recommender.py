"""Encoder-decoder transformer that generates the next item's semantic ID.

Token layout: id 0 is padding, id 1 starts decoding, and level ``j`` (the
conflict token is level ``m``) owns the id range ``offset_j .. offset_j +
size_j - 1``. Each level has its own embedding table and output head, so
every decoding step is confined to that level's slice.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .tokenizer import SemanticId, SidIndex

log = logging.getLogger(__name__)

PAD = 0
BOS = 1


@dataclass
class RecConfig:
    levels: int = 3
    codebook_size: int = 256
    conflict_cap: int = 256
    hidden: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_mult: int = 4
    max_history: int = 20
    beam_width: int = 20

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "RecConfig":
        """6 + 6 layers, hidden 128."""
        base = dict(hidden=128, heads=4, encoder_layers=6, decoder_layers=6)
        base.update(overrides)
        return cls(**base)


class VocabLayout:
    def __init__(self, sizes: Sequence[int]):
        self.sizes = [int(s) for s in sizes]
        self.offsets = list(np.cumsum([2] + self.sizes[:-1]))
        self.total = 2 + sum(self.sizes)

    @classmethod
    def for_config(cls, cfg: RecConfig) -> "VocabLayout":
        return cls([cfg.codebook_size] * cfg.levels + [cfg.conflict_cap])

    @property
    def positions(self) -> int:
        return len(self.sizes)

    def global_id(self, level: int, code: int) -> int:
        if not 0 <= code < self.sizes[level]:
            raise ValueError(f"code {code} outside level {level} vocabulary of size {self.sizes[level]}")
        return self.offsets[level] + code

    def local_code(self, level: int, token: int) -> int:
        code = token - self.offsets[level]
        if not 0 <= code < self.sizes[level]:
            raise ValueError(f"token {token} is not a level-{level} token")
        return code


@dataclass
class SidSequence:
    tokens: np.ndarray
    boundaries: np.ndarray  # start offset of each item

    def __len__(self) -> int:
        return len(self.tokens)

    def codes(self, layout: VocabLayout) -> np.ndarray:
        """(items, m+1) local codes."""
        p = layout.positions
        rows = self.tokens.reshape(-1, p)
        return np.array([[layout.local_code(j, t) for j, t in enumerate(row)] for row in rows], dtype=np.int64)


def build_input(history: Sequence[SemanticId], layout: VocabLayout, max_history: int) -> SidSequence:
    if not history:
        raise ValueError("history must contain at least one item")
    history = list(history)[-max_history:]
    tokens = []
    for sid in history:
        full = sid.as_tuple()
        if len(full) != layout.positions:
            raise ValueError(f"semantic ID {full} does not have {layout.positions} positions")
        tokens.extend(layout.global_id(j, c) for j, c in enumerate(full))
    p = layout.positions
    return SidSequence(np.array(tokens, dtype=np.int64), np.arange(len(history)) * p)


def sid_to_item(sid, index: SidIndex) -> int | None:
    return index.sid_to_item(sid)


class RankedCandidates(NamedTuple):
    sids: list[tuple[int, ...]]
    logprobs: list[float]

    def items(self, index: SidIndex) -> list[int]:
        out = []
        for sid in self.sids:
            item = index.sid_to_item(sid)
            if item is not None:
                out.append(item)
        return out


# ---------------------------------------------------------------------------
# model


def _dense(rng, fan_in, fan_out, name):
    bound = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)


class _Attention:
    def __init__(self, rng, hidden, heads, name):
        self.heads = heads
        self.wq = _dense(rng, hidden, hidden, f"{name}.wq")
        self.wk = _dense(rng, hidden, hidden, f"{name}.wk")
        self.wv = _dense(rng, hidden, hidden, f"{name}.wv")
        self.wo = _dense(rng, hidden, hidden, f"{name}.wo")

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def _split(self, x: Tensor) -> Tensor:
        b, n, h = x.shape
        return ad.transpose(ad.reshape(x, (b, n, self.heads, h // self.heads)), (0, 2, 1, 3))

    def keys_values(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(ad.matmul(memory, self.wk)), self._split(ad.matmul(memory, self.wv))

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray, kv=None) -> Tensor:
        b, n, h = x.shape
        q = self._split(ad.matmul(x, self.wq))
        k, v = kv if kv is not None else self.keys_values(memory)
        attn = ad.softmax(ad.attention_scores(q, k, mask))
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, h))
        return ad.matmul(ctx, self.wo)


class _Norm:
    def __init__(self, hidden, name):
        self.gain = ad.parameter(np.ones(hidden), f"{name}.g")
        self.bias = ad.parameter(np.zeros(hidden), f"{name}.b")

    def params(self):
        return [self.gain, self.bias]

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class _FeedForward:
    def __init__(self, rng, hidden, width, name):
        self.w1 = _dense(rng, hidden, width, f"{name}.w1")
        self.b1 = ad.parameter(np.zeros(width), f"{name}.b1")
        self.w2 = _dense(rng, width, hidden, f"{name}.w2")
        self.b2 = ad.parameter(np.zeros(hidden), f"{name}.b2")

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        return ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(x, self.w1), self.b1)), self.w2), self.b2)


class _EncoderLayer:
    def __init__(self, rng, cfg, name):
        self.norm1 = _Norm(cfg.hidden, f"{name}.ln1")
        self.attn = _Attention(rng, cfg.hidden, cfg.heads, f"{name}.attn")
        self.norm2 = _Norm(cfg.hidden, f"{name}.ln2")
        self.ff = _FeedForward(rng, cfg.hidden, cfg.ff_mult * cfg.hidden, f"{name}.ff")

    def params(self):
        return self.norm1.params() + self.attn.params() + self.norm2.params() + self.ff.params()

    def __call__(self, x, mask):
        y = self.norm1(x)
        x = ad.add(x, self.attn(y, y, mask))
        return ad.add(x, self.ff(self.norm2(x)))


class _DecoderLayer:
    def __init__(self, rng, cfg, name):
        self.norm1 = _Norm(cfg.hidden, f"{name}.ln1")
        self.self_attn = _Attention(rng, cfg.hidden, cfg.heads, f"{name}.self")
        self.norm2 = _Norm(cfg.hidden, f"{name}.ln2")
        self.cross_attn = _Attention(rng, cfg.hidden, cfg.heads, f"{name}.cross")
        self.norm3 = _Norm(cfg.hidden, f"{name}.ln3")
        self.ff = _FeedForward(rng, cfg.hidden, cfg.ff_mult * cfg.hidden, f"{name}.ff")

    def params(self):
        return (
            self.norm1.params() + self.self_attn.params() + self.norm2.params()
            + self.cross_attn.params() + self.norm3.params() + self.ff.params()
        )

    def __call__(self, x, memory, self_mask, cross_mask, cross_kv=None):
        y = self.norm1(x)
        x = ad.add(x, self.self_attn(y, y, self_mask))
        x = ad.add(x, self.cross_attn(self.norm2(x), memory, cross_mask, cross_kv))
        return ad.add(x, self.ff(self.norm3(x)))


class Seq2SeqRecommender:
    def __init__(self, cfg: RecConfig, seed: int = 0):
        self.config = cfg
        self.layout = VocabLayout.for_config(cfg)
        rng = np.random.default_rng(seed)
        h = cfg.hidden
        p = self.layout.positions
        emb_std = 1.0 / math.sqrt(h)
        self.token_tables = [
            ad.parameter(rng.normal(0, emb_std, (size, h)), f"tok.{j}") for j, size in enumerate(self.layout.sizes)
        ]
        self.enc_pos = ad.parameter(rng.normal(0, emb_std, (cfg.max_history * p, h)), "enc_pos")
        self.dec_pos = ad.parameter(rng.normal(0, emb_std, (p, h)), "dec_pos")
        self.bos = ad.parameter(rng.normal(0, emb_std, (1, h)), "bos")
        self.encoder = [_EncoderLayer(rng, cfg, f"enc{i}") for i in range(cfg.encoder_layers)]
        self.enc_norm = _Norm(h, "enc_ln")
        self.decoder = [_DecoderLayer(rng, cfg, f"dec{i}") for i in range(cfg.decoder_layers)]
        self.dec_norm = _Norm(h, "dec_ln")
        self.heads_w = [_dense(rng, h, size, f"out.{j}.w") for j, size in enumerate(self.layout.sizes)]
        self.heads_b = [ad.parameter(np.zeros(size), f"out.{j}.b") for j, size in enumerate(self.layout.sizes)]

    def parameters(self) -> list[Tensor]:
        params = list(self.token_tables) + [self.enc_pos, self.dec_pos, self.bos]
        for layer in self.encoder:
            params += layer.params()
        params += self.enc_norm.params()
        for layer in self.decoder:
            params += layer.params()
        params += self.dec_norm.params()
        params += self.heads_w + self.heads_b
        return params

    # -- embeddings ---------------------------------------------------------

    def item_tables(self, sids: np.ndarray, assignments: Sequence[Tensor] | None = None) -> list[Tensor]:
        """Per-level token embeddings for every catalog item, each (n_items, hidden).

        ``sids`` is (n, m+1). With ``assignments`` (the tokenizer's per-level
        straight-through one-hot tensors) the code levels are computed as
        ``assignment @ table`` so that gradients reach the tokenizer; the
        forward value is the same table row either way.
        """
        sids = np.asarray(sids, dtype=np.int64)
        p = self.layout.positions
        if sids.ndim != 2 or sids.shape[1] != p:
            raise ValueError(f"expected semantic IDs of shape (n, {p}), got {sids.shape}")
        for j in range(p):
            if sids[:, j].min() < 0 or sids[:, j].max() >= self.layout.sizes[j]:
                raise ValueError(f"level-{j} codes outside vocabulary of size {self.layout.sizes[j]}")
        tables = []
        for j in range(p):
            if assignments is not None and j < len(assignments):
                tables.append(ad.matmul(assignments[j], self.token_tables[j]))
            else:
                tables.append(ad.gather_rows(self.token_tables[j], sids[:, j]))
        return tables

    # -- forward ------------------------------------------------------------

    def encode(self, hist_items: np.ndarray, hist_mask: np.ndarray, tables: list[Tensor]):
        """Encode left-padded item histories (B, L) -> memory (B, L*(m+1), h) and its key mask."""
        b, n_items = hist_items.shape
        p = self.layout.positions
        h = self.config.hidden
        if n_items > self.config.max_history:
            raise ValueError("history longer than max_history")
        safe = np.where(hist_mask, hist_items, 0)
        parts = [ad.reshape(ad.gather_rows(t, safe), (b, n_items, 1, h)) for t in tables]
        x = ad.reshape(ad.concat(parts, axis=2), (b, n_items * p, h))
        length = n_items * p
        start = self.enc_pos.shape[0] - length
        pos = ad.gather_rows(self.enc_pos, np.broadcast_to(np.arange(start, start + length), (b, length)))
        x = ad.add(x, pos)
        key_ok = np.repeat(hist_mask, p, axis=1)
        mask = np.where(key_ok, 0.0, NEG_INF)[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x), mask

    def decode(self, memory: Tensor, cross_mask: np.ndarray, dec_in: Tensor, cross_kv=None) -> list[Tensor]:
        """Log-probabilities for every decoder position given its inputs (B, T, h).

        ``cross_kv`` optionally supplies precomputed per-layer cross-attention
        keys and values (see :meth:`cross_keys_values`).
        """
        b, t, h = dec_in.shape
        pos = ad.gather_rows(self.dec_pos, np.broadcast_to(np.arange(t), (b, t)))
        x = ad.add(dec_in, pos)
        causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
        for i, layer in enumerate(self.decoder):
            x = layer(x, memory, causal, cross_mask, None if cross_kv is None else cross_kv[i])
        x = self.dec_norm(x)
        by_pos = ad.reshape(ad.transpose(x, (1, 0, 2)), (t, b * h))
        out = []
        for j in range(t):
            row = ad.reshape(ad.gather_rows(by_pos, np.array([j])), (b, h))
            out.append(ad.log_softmax(ad.add(ad.matmul(row, self.heads_w[j]), self.heads_b[j])))
        return out

    def cross_keys_values(self, memory: Tensor, repeats: int = 1) -> list[tuple[Tensor, Tensor]]:
        out = []
        for layer in self.decoder:
            k, v = layer.cross_attn.keys_values(memory)
            out.append((Tensor(np.repeat(k.data, repeats, axis=0)), Tensor(np.repeat(v.data, repeats, axis=0))))
        return out

    def _decoder_inputs(self, target_items: np.ndarray, tables: list[Tensor], steps: int) -> Tensor:
        b = len(target_items)
        h = self.config.hidden
        parts = [ad.reshape(ad.gather_rows(self.bos, np.zeros(b, dtype=np.int64)), (b, 1, h))]
        for j in range(steps - 1):
            parts.append(ad.reshape(ad.gather_rows(tables[j], target_items), (b, 1, h)))
        return ad.concat(parts, axis=1)

    def nll(
        self,
        hist_items: np.ndarray,
        hist_mask: np.ndarray,
        target_items: np.ndarray,
        tables: list[Tensor],
        targets: np.ndarray,
        reduction: str = "token_mean",
        target_probs: Sequence[Tensor] | None = None,
    ) -> Tensor:
        """Teacher-forced negative log-likelihood of the target SIDs.

        ``targets`` is (B, m+1). ``reduction`` is ``"sum"`` (total over the
        batch), ``"example_mean"`` (mean over examples of the per-SID sum) or
        ``"token_mean"`` (additionally divided by m+1). ``target_probs``
        optionally replaces the hard code targets at the code levels by
        per-item probability rows (n_items, K).
        """
        p = self.layout.positions
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (len(target_items), p):
            raise ValueError(f"targets must have shape (B, {p})")
        for j in range(p):
            if targets[:, j].min() < 0 or targets[:, j].max() >= self.layout.sizes[j]:
                raise ValueError(f"level-{j} targets outside the vocabulary")
        memory, mask = self.encode(hist_items, hist_mask, tables)
        logps = self.decode(memory, mask, self._decoder_inputs(target_items, tables, p))
        total = None
        for j, lp in enumerate(logps):
            if target_probs is not None and j < len(target_probs):
                soft = ad.gather_rows(target_probs[j], target_items)
                term = ad.scale(ad.total(ad.mul(soft, lp)), -1.0)
            else:
                term = ad.scale(ad.total(ad.take_last(lp, targets[:, j])), -1.0)
            total = term if total is None else ad.add(total, term)
        b = len(target_items)
        if reduction == "sum":
            return total
        if reduction == "example_mean":
            return ad.scale(total, 1.0 / b)
        if reduction == "token_mean":
            return ad.scale(total, 1.0 / (b * p))
        raise ValueError(f"unknown reduction {reduction!r}")

    def forward_nll(self, seq: SidSequence, target: SemanticId) -> Tensor:
        """Summed NLL of one target SID given one token sequence."""
        codes = seq.codes(self.layout)
        full = np.asarray(target.as_tuple(), dtype=np.int64)[None, :]
        sids = np.concatenate([codes, full], axis=0)
        tables = self.item_tables(sids)
        n = len(codes)
        hist = np.arange(n)[None, :]
        return self.nll(hist, np.ones_like(hist, dtype=bool), np.array([n]), tables, full, reduction="sum")

    # -- generation ---------------------------------------------------------

    def generate(
        self,
        hist_items: np.ndarray,
        hist_mask: np.ndarray,
        sids: np.ndarray,
        beam_width: int | None = None,
        index: SidIndex | None = None,
    ) -> list[RankedCandidates]:
        """Beam search over the m+1 positions for a batch of histories.

        ``sids`` (n_items, m+1) gives the token ids of the catalog items that
        appear in the histories. With ``index`` given, only prefixes of
        semantic IDs present in it are expanded (constrained decoding).
        Candidates are ordered by total log-probability, ties broken by the
        lexicographically smaller SID.
        """
        layout = self.layout
        p = layout.positions
        width = beam_width or self.config.beam_width
        space = int(np.prod(layout.sizes))
        if width > space:
            log.warning("beam width %d exceeds the %d possible semantic IDs; clamping", width, space)
            width = space
        b = hist_items.shape[0]
        h = self.config.hidden
        allowed = _prefix_table(index.sid_matrix, p) if index is not None else None
        with ad.no_grad():
            tables = self.item_tables(sids)
            memory, mask = self.encode(hist_items, hist_mask, tables)
            prefixes = np.zeros((b, 1, 0), dtype=np.int64)
            scores = np.zeros((b, 1))
            for t in range(p):
                nbeam = prefixes.shape[1]
                kv = self.cross_keys_values(memory, nbeam)
                msk = np.repeat(mask, nbeam, axis=0)
                flat = prefixes.reshape(b * nbeam, t)
                parts = [self.bos.data[np.zeros(b * nbeam, dtype=np.int64)][:, None, :]]
                for j in range(t):
                    parts.append(self.token_tables[j].data[flat[:, j]][:, None, :])
                dec_in = Tensor(np.concatenate(parts, axis=1).reshape(b * nbeam, t + 1, h))
                lp = self.decode(memory, msk, dec_in, kv)[t].data.reshape(b, nbeam, -1)
                vsize = lp.shape[-1]
                cand = scores[:, :, None] + lp
                if allowed is not None:
                    ok = np.zeros_like(cand, dtype=bool)
                    for i in range(b):
                        for k in range(nbeam):
                            if np.isfinite(scores[i, k]):
                                nxt = allowed.get(tuple(prefixes[i, k].tolist()))
                                if nxt is not None:
                                    ok[i, k, nxt] = True
                    cand = np.where(ok, cand, -np.inf)
                keep = min(width, nbeam * vsize)
                new_prefix = np.zeros((b, keep, t + 1), dtype=np.int64)
                new_scores = np.full((b, keep), -np.inf)
                beam_idx = np.repeat(np.arange(nbeam), vsize)
                tok_idx = np.tile(np.arange(vsize), nbeam)
                for i in range(b):
                    flat_scores = cand[i].reshape(-1)
                    full = np.concatenate([prefixes[i][beam_idx], tok_idx[:, None]], axis=1)
                    order = np.lexsort(tuple(full[:, c] for c in range(t, -1, -1)) + (-flat_scores,))
                    order = order[:keep]
                    new_prefix[i] = full[order]
                    new_scores[i] = flat_scores[order]
                prefixes, scores = new_prefix, new_scores
        out = []
        for i in range(b):
            live = np.isfinite(scores[i])
            out.append(RankedCandidates([tuple(r) for r in prefixes[i][live].tolist()], scores[i][live].tolist()))
        return out

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing recommender tensor {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)


def _prefix_table(sid_matrix: np.ndarray, positions: int) -> dict[tuple, np.ndarray]:
    table: dict[tuple, set] = {}
    for row in np.asarray(sid_matrix).tolist():
        for t in range(positions):
            table.setdefault(tuple(row[:t]), set()).add(row[t])
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in table.items()}
