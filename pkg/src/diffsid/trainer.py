"""Pretraining, joint training under the comparison regimes, evaluation and
the variant matrix.

Regimes (``variant``):

* ``two-stage``   -- tokenizer frozen after pretraining; only the
  recommender's generation loss is optimised.
* ``ste``         -- joint training, nearest-code assignment and a
  straight-through gradient to the selected code only.
* ``diger-no-ud`` -- joint training with Gumbel-Softmax gradients and
  undecayed standard Gumbel noise.
* ``diger-sdud`` / ``diger-frqud`` / ``diger-both`` -- the same with the
  loss-driven noise scale, the frequency-based hot-code noise, or both.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import decay
from .data import (
    SplitDataset,
    SynthConfig,
    filter_min_interactions,
    leave_one_out_split,
    load_content,
    load_interactions,
    pad_histories,
    synth_generate,
    training_pairs,
)
from .decay import FrqState, NoiseDirective, SdudState
from .metrics import (
    AssignmentSnapshot,
    EpochReport,
    coverage_balance,
    coverage_per_level,
    cumulative_drift,
    effective_codes,
    incremental_drift,
    mismatch_demo,
    ranking_report,
    train_inference_agreement,
    usage_distribution,
    write_usage_csv,
)
from .optim import AdamW
from .recommender import RecConfig, Seq2SeqRecommender
from .tokenizer import RQTokenizer, SidIndex, TokenizerConfig, pretrain, resolve_conflicts

log = logging.getLogger(__name__)

VARIANTS = ("two-stage", "ste", "diger-no-ud", "diger-frqud", "diger-sdud", "diger-both")
_DECAY_OF = {"diger-no-ud": "none", "diger-frqud": "frqud", "diger-sdud": "sdud", "diger-both": "both"}
# stream ids that keep the noise used for probing apart from training noise
_PROBE_STREAM = 1 << 20


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "diger-frqud"
    seed: int = 0
    out: str = "runs/default"
    # data: files, or the synthetic benchmark when ``interactions`` is empty
    interactions: str = ""
    content: str = ""
    min_interactions: int = 5
    synth_clusters: int = 8
    synth_items: int = 200
    synth_users: int = 500
    synth_min_len: int = 5
    synth_max_len: int = 12
    synth_dim: int = 16
    synth_noise: float = 0.3
    synth_stay: float = 0.6
    synth_sharpness: float = 1.0
    synth_seed: int = -1  # -1: follow ``seed``
    # tokenizer
    codebook_size: int = 32
    levels: int = 3
    code_dim: int = 32
    encoder_widths: tuple = (64,)
    tau: float = 2.0
    similarity: str = "neg_sq_euclidean"
    commitment: float = 0.25
    conflict_cap: int = 256
    logit_scale: float = 100.0
    # recommender
    hidden: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    max_history: int = 5
    beam_width: int = 20
    constrained: bool = True
    # uncertainty decay
    lam: float = 1.4
    ratio_r: float = 1.5
    beta: float = 0.25
    loss_ema: float = 0.9
    # optimisation
    lr_rec: float = 1e-3
    lr_tok: float = 3e-4
    weight_decay: float = 0.05
    batch_size: int = 256
    epochs: int = 30
    patience: int = 10
    pretrain_epochs: int = 300
    pretrain_lr: float = 1e-2
    tokenizer_checkpoint: str = ""
    eval_ks: tuple = (5, 10)
    # matrix
    variants: tuple = ("two-stage", "ste", "diger-frqud")
    seeds: tuple = (0,)

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        self.variants = tuple(self.variants)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r} in variants")
        if self.lr_rec <= 0 or self.lr_tok <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if 10 not in self.eval_ks:
            raise ValueError("eval_ks must include 10 (early stopping uses NDCG@10)")

    @property
    def data_seed(self) -> int:
        return self.seed if self.synth_seed < 0 else self.synth_seed

    def tokenizer_config(self, input_dim: int) -> TokenizerConfig:
        return TokenizerConfig(
            input_dim=input_dim,
            codebook_size=self.codebook_size,
            levels=self.levels,
            code_dim=self.code_dim,
            tau=self.tau,
            similarity=self.similarity,
            encoder_widths=self.encoder_widths,
            commitment=self.commitment,
            conflict_cap=self.conflict_cap,
            logit_scale=self.logit_scale,
        )

    def rec_config(self) -> RecConfig:
        return RecConfig(
            levels=self.levels,
            codebook_size=self.codebook_size,
            conflict_cap=self.conflict_cap,
            hidden=self.hidden,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            max_history=self.max_history,
            beam_width=self.beam_width,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# config files


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(items)
    return raw


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        try:
            out[name] = _coerce(name, raw)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    """Read a flat ``key = value`` file (``#`` comments, lists comma-separated)."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ValueError(f"{path}: {exc}") from None
        values.update(parse_overrides(dict(parser["run"])))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    split: SplitDataset
    content: np.ndarray

    @property
    def n_items(self) -> int:
        return self.content.shape[0]


def load_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.interactions:
        log_ = load_interactions(cfg.interactions)
        if cfg.min_interactions > 1:
            log_ = filter_min_interactions(log_, cfg.min_interactions)
        if not cfg.content:
            raise ValueError("a content file is required together with an interaction file")
        content = load_content(cfg.content, log_)
    else:
        log_, content = synth_generate(
            SynthConfig(
                clusters=cfg.synth_clusters,
                items=cfg.synth_items,
                users=cfg.synth_users,
                min_len=cfg.synth_min_len,
                max_len=cfg.synth_max_len,
                dim=cfg.synth_dim,
                content_noise=cfg.synth_noise,
                stay=cfg.synth_stay,
                sharpness=cfg.synth_sharpness,
                seed=cfg.data_seed,
            )
        )
    return Dataset(leave_one_out_split(log_), np.asarray(content, dtype=np.float64))


# ---------------------------------------------------------------------------
# pretraining


def _pretrain_path(cfg: TrainConfig) -> Path:
    return Path(cfg.out) / "tokenizer.npz"


def run_pretrain(cfg: TrainConfig, data: Dataset | None = None) -> Path:
    data = data or load_dataset(cfg)
    tok = RQTokenizer(cfg.tokenizer_config(data.content.shape[1]), seed=cfg.seed)
    result = pretrain(tok, data.content, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed)
    codes = tok.deterministic_codes(data.content)
    meta = {
        "kind": "tokenizer",
        "tokenizer": tok.config_dict(),
        "seed": cfg.seed,
        "initial_recon": result.initial_recon,
        "final_recon": result.final_recon,
        "initial_latent_recon": result.initial_latent,
        "final_latent_recon": result.final_latent,
    }
    arrays = ckpt.prefixed("tokenizer", tok.state_dict())
    arrays["snapshot/deterministic"] = codes.astype(np.int64)
    path = ckpt.save(_pretrain_path(cfg), meta, arrays)
    log.info("pretrained tokenizer: recon %.4f -> %.4f, saved %s", result.initial_recon, result.final_recon, path)
    return path


def load_tokenizer(path) -> tuple[RQTokenizer, dict, np.ndarray | None]:
    meta, arrays = ckpt.load(path)
    tcfg = meta["tokenizer"]
    tcfg["encoder_widths"] = tuple(tcfg["encoder_widths"])
    tok = RQTokenizer(TokenizerConfig(**tcfg))
    tok.load_state_dict(ckpt.subgroup(arrays, "tokenizer"))
    return tok, meta, arrays.get("snapshot/deterministic")


# ---------------------------------------------------------------------------
# joint training


@dataclass
class Trainer:
    """State of one training run."""

    cfg: TrainConfig
    data: Dataset
    tok: RQTokenizer
    rec: Seq2SeqRecommender
    opt_rec: AdamW
    opt_tok: AdamW | None
    sdud: SdudState | None
    frq: FrqState | None
    index: SidIndex
    init_snapshot: AssignmentSnapshot
    prev_snapshot: AssignmentSnapshot
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    reports: list = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def frozen(self) -> bool:
        return self.variant == "two-stage"

    def directive(self) -> NoiseDirective:
        m = self.cfg.levels
        if self.variant in ("two-stage", "ste"):
            return NoiseDirective.off(m)
        return decay.decay_policy(_DECAY_OF[self.variant], m, self.sdud, self.frq)

    @property
    def surrogate(self) -> str:
        return "hard" if self.variant == "ste" else "soft"

    def sids(self, index: SidIndex | None = None) -> np.ndarray:
        return (index or self.index).sid_matrix


def build_trainer(cfg: TrainConfig, data: Dataset | None = None) -> Trainer:
    data = data or load_dataset(cfg)
    tok_path = Path(cfg.tokenizer_checkpoint) if cfg.tokenizer_checkpoint else _pretrain_path(cfg)
    if not tok_path.exists():
        tok_path = run_pretrain(cfg, data)
    tok, _, _ = load_tokenizer(tok_path)
    # pretraining only uses the argmax, so the scale is a training-time choice
    tok.config.logit_scale = cfg.logit_scale
    if tok.config.input_dim != data.content.shape[1]:
        raise ValueError(f"{tok_path}: tokenizer expects {tok.config.input_dim}-d content, data has {data.content.shape[1]}")
    rec = Seq2SeqRecommender(cfg.rec_config(), seed=cfg.seed + 1)
    codes = tok.deterministic_codes(data.content)
    index = resolve_conflicts(codes, cfg.conflict_cap)
    snap = AssignmentSnapshot(0, codes)
    opt_rec = AdamW(rec.parameters(), cfg.lr_rec, cfg.weight_decay)
    opt_tok = None if cfg.variant == "two-stage" else AdamW(tok.parameters(), cfg.lr_tok, cfg.weight_decay)
    sdud = frq = None
    if cfg.variant in ("diger-sdud", "diger-both"):
        sdud = SdudState(lam=cfg.lam, ema_decay=cfg.loss_ema)
    if cfg.variant in ("diger-frqud", "diger-both"):
        frq = FrqState.uniform(cfg.levels, cfg.codebook_size, beta=cfg.beta, ratio=cfg.ratio_r)
        frq = decay.frq_update(frq, usage_distribution(codes, cfg.codebook_size))
    t = Trainer(cfg, data, tok, rec, opt_rec, opt_tok, sdud, frq, index, snap, snap)
    if sdud is not None:
        # the first sigma comes from the untrained generation loss on one batch
        hists, targets = training_pairs(data.split.train, cfg.max_history)
        order = np.random.default_rng([cfg.seed, 0]).permutation(len(targets))[: cfg.batch_size]
        with ad.no_grad():
            probe = _gen_loss_fixed(t, [hists[i] for i in order], np.array([targets[i] for i in order]))
        t.sdud = decay.sdud_step(sdud, probe)
    return t


def _gen_loss_fixed(t: Trainer, hists, targets) -> float:
    items, mask = pad_histories(hists, t.cfg.max_history)
    sids = t.sids()
    tables = t.rec.item_tables(sids)
    return t.rec.nll(items, mask, targets, tables, sids[targets]).item()


def _noise(cfg: TrainConfig, n_items: int, *counters: int) -> np.ndarray:
    rng = decay.noise_stream(cfg.seed, *counters)
    return decay.standard_gumbel(rng, (n_items, cfg.levels, cfg.codebook_size))


def train_epoch(t: Trainer) -> dict:
    cfg = t.cfg
    t.epoch += 1
    e = t.epoch
    directive = t.directive()
    sigma = t.sdud.sigma if t.sdud is not None else 0.0
    hot_count = [int(h.sum()) for h in decay.hot_masks(t.frq)] if t.frq is not None else [0] * cfg.levels
    hists, targets = training_pairs(t.data.split.train, cfg.max_history)
    targets = np.asarray(targets, dtype=np.int64)
    order = np.random.default_rng([cfg.seed, e]).permutation(len(targets))
    usage = np.zeros((cfg.levels, cfg.codebook_size))
    sums = {"gen": 0.0, "vq": 0.0, "recon": 0.0}
    steps = 0
    n_items = t.data.n_items
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = order[start:start + cfg.batch_size]
        items, mask = pad_histories([hists[i] for i in batch], cfg.max_history)
        tgt = targets[batch]
        ad.reset_tape()
        if t.frozen:
            sids = t.sids()
            tables = t.rec.item_tables(sids)
            gen = t.rec.nll(items, mask, tgt, tables, sids[tgt])
            loss = gen
            vq_v = recon_v = 0.0
            codes = sids[:, : cfg.levels]
        else:
            gumbel = None if directive.deterministic else _noise(cfg, n_items, e, step)
            r = t.tok.encode(t.data.content)
            q = t.tok.quantize(r, directive, gumbel, t.surrogate)
            codes = q.codes
            sids = resolve_conflicts(codes, cfg.conflict_cap).sid_matrix
            tables = t.rec.item_tables(sids, q.record.assignments)
            gen = t.rec.nll(items, mask, tgt, tables, sids[tgt])
            vq, recon = t.tok.vq_losses(r, q.record)
            loss = ad.add(ad.add(gen, vq), recon)
            vq_v, recon_v = vq.item(), recon.item()
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss at epoch {e}, step {step}")
        ad.backward(loss)
        t.opt_rec.step()
        t.opt_rec.zero_grad()
        if t.opt_tok is not None:
            t.opt_tok.step()
            t.opt_tok.zero_grad()
        ad.reset_tape()
        gen_v = gen.item()
        if t.sdud is not None:
            t.sdud = decay.sdud_step(t.sdud, gen_v)
        usage += usage_distribution(codes, cfg.codebook_size)
        sums["gen"] += gen_v
        sums["vq"] += vq_v
        sums["recon"] += recon_v
        steps += 1
    if t.frq is not None and steps:
        t.frq = decay.frq_update(t.frq, usage / steps)
    steps = max(steps, 1)
    return {
        "directive": directive,
        "sigma": sigma,
        "hot_count": hot_count,
        "gen": sums["gen"] / steps,
        "vq": sums["vq"] / steps,
        "recon": sums["recon"] / steps,
    }


def _probe_sample(t: Trainer, directive: NoiseDirective) -> np.ndarray:
    """Codes the tokenizer would sample now under the epoch's noise regime."""
    if directive.deterministic:
        return t.tok.deterministic_codes(t.data.content)
    with ad.no_grad():
        r = t.tok.encode(t.data.content)
        return t.tok.quantize(r, directive, _noise(t.cfg, t.data.n_items, t.epoch, _PROBE_STREAM)).codes


def evaluate(
    rec: Seq2SeqRecommender,
    index: SidIndex,
    pairs: Sequence[tuple[list[int], int]],
    ks=(5, 10),
    beam_width: int | None = None,
    constrained: bool = True,
    batch_size: int = 256,
) -> dict[str, float]:
    """Zero-noise beam search for every ``(history, target)`` pair."""
    sids = index.sid_matrix
    rankings, targets = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        items, mask = pad_histories([h for h, _ in chunk], rec.config.max_history)
        cands = rec.generate(items, mask, sids, beam_width=beam_width, index=index if constrained else None)
        rankings.extend(c.items(index) for c in cands)
        targets.extend(tgt for _, tgt in chunk)
    return ranking_report(rankings, targets, ks)


def _checkpoint_arrays(t: Trainer) -> dict[str, np.ndarray]:
    arrays = ckpt.prefixed("tokenizer", t.tok.state_dict())
    arrays.update(ckpt.prefixed("recommender", t.rec.state_dict()))
    arrays.update(ckpt.prefixed("opt_rec", t.opt_rec.state_dict()))
    if t.opt_tok is not None:
        arrays.update(ckpt.prefixed("opt_tok", t.opt_tok.state_dict()))
    if t.frq is not None:
        arrays["decay/freqs"] = t.frq.freqs
    arrays["index/codes"] = t.index.codes
    arrays["index/conflict"] = t.index.conflict
    arrays["snapshot/init"] = t.init_snapshot.deterministic
    return arrays


def save_checkpoint(t: Trainer, path) -> Path:
    meta = {
        "kind": "model",
        "config": t.cfg.to_dict(),
        "tokenizer": t.tok.config_dict(),
        "recommender": t.rec.config_dict(),
        "epoch": t.epoch,
        "best_metric": t.best_metric,
        "best_epoch": t.best_epoch,
        "sdud": dataclasses.asdict(t.sdud) if t.sdud is not None else None,
    }
    return ckpt.save(path, meta, _checkpoint_arrays(t))


@dataclass
class LoadedModel:
    cfg: TrainConfig
    tok: RQTokenizer
    rec: Seq2SeqRecommender
    index: SidIndex
    meta: dict


def load_model(path) -> LoadedModel:
    meta, arrays = ckpt.load(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    cfg = TrainConfig(**meta["config"])
    tcfg = dict(meta["tokenizer"])
    tcfg["encoder_widths"] = tuple(tcfg["encoder_widths"])
    tok = RQTokenizer(TokenizerConfig(**tcfg))
    tok.load_state_dict(ckpt.subgroup(arrays, "tokenizer"))
    rec = Seq2SeqRecommender(RecConfig(**meta["recommender"]))
    rec.load_state_dict(ckpt.subgroup(arrays, "recommender"))
    index = SidIndex(arrays["index/codes"], arrays["index/conflict"])
    return LoadedModel(cfg, tok, rec, index, meta)


@dataclass
class TrainResult:
    best_checkpoint: Path
    reports: list[dict]
    best_epoch: int
    best_metric: float
    test: dict[str, float]
    best_row: dict


def run_train(cfg: TrainConfig, data: Dataset | None = None) -> TrainResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_dataset(cfg)
    t = build_trainer(cfg, data)
    header = {"config": cfg.to_dict(), "split_digest": data.split.digest(), "n_items": data.n_items}
    (out / "header.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    best_path = out / "best.npz"
    rows: list[dict] = []
    since_best = 0
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as stream:
        for _ in range(cfg.epochs):
            started = time.perf_counter()
            try:
                stats = train_epoch(t)
            except DivergenceError as exc:
                log.error("%s; keeping %s", exc, best_path)
                break
            codes = t.tok.deterministic_codes(data.content)
            t.index = resolve_conflicts(codes, cfg.conflict_cap)
            sampled = _probe_sample(t, stats["directive"])
            snap = AssignmentSnapshot(t.epoch, codes, sampled)
            valid = evaluate(t.rec, t.index, data.split.valid, cfg.eval_ks, cfg.beam_width, cfg.constrained)
            q = usage_distribution(codes, cfg.codebook_size)
            cov_mean, cov_std = coverage_balance(codes, cfg.codebook_size)
            report = EpochReport(
                epoch=t.epoch,
                variant=cfg.variant,
                metrics=valid,
                coverage=coverage_per_level(codes, cfg.codebook_size),
                coverage_mean=cov_mean,
                coverage_std=cov_std,
                eff_codes=[effective_codes(row) for row in q],
                incr_drift=incremental_drift(t.prev_snapshot, snap),
                cum_drift=cumulative_drift(t.init_snapshot, snap),
                agreement=train_inference_agreement(snap),
                sigma=stats["sigma"],
                hot_count=stats["hot_count"],
                gen_loss=stats["gen"],
                vq_loss=stats["vq"],
                recon_loss=stats["recon"],
            )
            rows.append(report.row())
            stream.write(report.to_json() + "\n")
            stream.flush()
            t.prev_snapshot = snap
            write_usage_csv(out / "usage" / f"epoch{t.epoch:03d}.csv", q)
            log.info(
                "epoch %d  ndcg@10 %.4f  cov %.3f  agree %.3f  L_gen %.4f  (%.1fs)",
                t.epoch, valid["ndcg@10"], cov_mean, report.agreement, stats["gen"], time.perf_counter() - started,
            )
            if valid["ndcg@10"] > t.best_metric:
                t.best_metric = valid["ndcg@10"]
                t.best_epoch = t.epoch
                since_best = 0
                save_checkpoint(t, best_path)
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    if not best_path.exists():
        save_checkpoint(t, best_path)
    best = load_model(best_path)
    test = evaluate(best.rec, best.index, data.split.test, cfg.eval_ks, cfg.beam_width, cfg.constrained)
    best_row = next((r for r in rows if r["epoch"] == t.best_epoch), {})
    summary = {"best_epoch": t.best_epoch, "best_valid_ndcg@10": t.best_metric, "test": test}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return TrainResult(best_path, rows, t.best_epoch, t.best_metric, test, best_row)


def run_eval(path, split: str = "test", ks=(5, 10), beam_width: int | None = None, constrained: bool | None = None, cfg=None) -> dict:
    if split not in ("valid", "test"):
        raise ValueError("split must be 'valid' or 'test'")
    model = load_model(path)
    cfg = cfg or model.cfg
    data = load_dataset(cfg)
    pairs = data.split.valid if split == "valid" else data.split.test
    return evaluate(
        model.rec,
        model.index,
        pairs,
        tuple(ks),
        beam_width or cfg.beam_width,
        cfg.constrained if constrained is None else constrained,
    )


# ---------------------------------------------------------------------------
# comparison matrix

MATRIX_COLUMNS = [
    "variant", "seed", "status", "split_digest", "best_epoch", "best_valid_ndcg@10",
    "test_recall@5", "test_recall@10", "test_ndcg@5", "test_ndcg@10",
    "coverage_mean", "coverage_std", "agreement", "cum_drift", "mean_agreement", "error",
]


def run_matrix(cfg: TrainConfig) -> Path:
    if len(cfg.variants) < 2:
        raise ValueError("the matrix needs at least two variants")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        base = cfg.replace(seed=seed, out=str(out / f"seed{seed}"))
        data = load_dataset(base)
        tok_path = Path(base.tokenizer_checkpoint) if base.tokenizer_checkpoint else _pretrain_path(base)
        if not tok_path.exists():
            tok_path = run_pretrain(base, data)
        for variant in cfg.variants:
            run_cfg = base.replace(variant=variant, out=str(out / f"seed{seed}" / variant), tokenizer_checkpoint=str(tok_path))
            row = {"variant": variant, "seed": seed, "split_digest": data.split.digest()}
            try:
                res = run_train(run_cfg, data)
                row.update(
                    status="ok",
                    best_epoch=res.best_epoch,
                    **{"best_valid_ndcg@10": res.best_metric},
                    **{f"test_{k}": v for k, v in res.test.items()},
                    coverage_mean=res.best_row.get("coverage_mean"),
                    coverage_std=res.best_row.get("coverage_std"),
                    agreement=res.best_row.get("agreement"),
                    cum_drift=res.best_row.get("cum_drift"),
                    mean_agreement=float(np.mean([r["agreement"] for r in res.reports])) if res.reports else None,
                )
            except Exception as exc:  # recorded per row, the matrix continues
                log.exception("run %s/seed %d failed", variant, seed)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    path = out / "comparison.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in MATRIX_COLUMNS})
    return path


def run_demo_mismatch(M: float, lr: float = 0.1, steps: int = 2000) -> str:
    res = mismatch_demo(M, lr, steps)
    lines = [
        f"objective mismatch construction, M = {M:g}",
        f"{'':12}{'analytic':>14}{'descent':>14}",
        f"{'two-stage':12}{res.two_stage:>14.6f}{res.descent_two_stage:>14.6f}",
        f"{'joint':12}{res.joint:>14.6f}{res.descent_joint:>14.6f}",
        f"{'gap':12}{res.gap:>14.6f}{res.descent_gap:>14.6f}",
    ]
    return "\n".join(lines)
