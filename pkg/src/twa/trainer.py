"""Training loops for SFT, Filter+SFT, TWA (UL / NL / ignore on errors), TWA-seq and DPO.

All methods share one Adam loop (constant learning rate, no weight decay,
global-norm clipping). Per-sequence losses are summed over tokens and the
batch loss is the mean over sequences. Validation runs every
``eval_every_steps`` on greedy decodes and the checkpoint with the lowest
validation score (earliest on ties) is returned.

Large-scale runs would use batches in the thousands, a learning rate near
2e-6 and evaluation every 500 steps; the defaults below are desk-scale.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .annotations import Dataset, filter_error_free
from .losses import (
    LossReport,
    cross_entropy_loss,
    dpo_loss,
    twa_seq_baseline_loss,
    twa_sequence_loss,
)
from .model import (
    Seq2SeqModel,
    grad_logits_from_logp,
    greedy_decode,
    pad_batch,
    realized_logprobs,
)
from .pairs import PreferencePair
from .tokenize_align import TokenWeightVector, Vocab, assign_token_weights, decode, encode

log = logging.getLogger(__name__)

METHODS = ("sft", "filter_sft", "twa", "twa_seq", "twa_nl", "dpo")
ERROR_LOSSES = ("ul", "nl", "ignore")


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite."""


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "twa"
    batch_size: int = 16
    learning_rate: float = 1e-3
    total_steps: int = 2000
    eval_every_steps: int = 100
    seed: int = 0
    ignore_off_trajectory: bool = True
    error_span_loss: str = "ul"
    nl_scaled: bool = True
    dpo_beta: float = 0.1
    include_references: bool = True
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.error_span_loss not in ERROR_LOSSES:
            raise ValueError(f"error_span_loss must be one of {ERROR_LOSSES}")
        for name in ("batch_size", "learning_rate", "total_steps", "eval_every_steps",
                     "dpo_beta", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def span_loss(self) -> str:
        return "nl" if self.method == "twa_nl" else self.error_span_loss

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        """Build from string values, e.g. a parsed key=value file."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind == "bool":
                low = str(raw).strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(f"{key}: expected a boolean, got {raw!r}")
                kwargs[key] = low in ("1", "true", "yes")
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw).strip()
        return cls(**kwargs)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# --- data preparation --------------------------------------------------------

@dataclass
class Prepared:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    weights: TokenWeightVector
    has_error: bool


def prepare(dataset: Dataset, vocab: Vocab, ignore_off_trajectory: bool = True) -> list[Prepared]:
    out = []
    for ex in dataset:
        tok = encode(ex.output_text, vocab)
        out.append(Prepared(
            encode(ex.source_text, vocab).token_ids,
            tok.token_ids,
            assign_token_weights(tok, ex.spans, ignore_off_trajectory),
            ex.has_error,
        ))
    return out


def select_training_data(dataset: Dataset, config: TrainConfig) -> Dataset:
    data = dataset if config.include_references else dataset.submissions()
    if config.method == "filter_sft":
        data = filter_error_free(data)
        if not len(data):
            raise EmptyDatasetError("empty filtered dataset")
    if not len(data):
        raise EmptyDatasetError("empty training dataset")
    return data


def sequence_loss(item: Prepared, logp: np.ndarray, config: TrainConfig) -> LossReport:
    method = config.method
    if method in ("sft", "filter_sft"):
        return cross_entropy_loss(logp)
    if method == "twa_seq":
        return twa_seq_baseline_loss(item.has_error, logp)
    return twa_sequence_loss(item.weights, logp, error_loss=config.span_loss,
                             nl_scaled=config.nl_scaled)


def sequence_logprobs(model: Seq2SeqModel, items: Sequence[Prepared], batch_size: int = 64):
    """Summed log p of each target under ``model`` (teacher forced)."""
    out = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        tgt = pad_batch([it.tgt for it in chunk])
        logits, _ = model.forward(pad_batch([it.src for it in chunk]), tgt)
        _, logp = realized_logprobs(logits, tgt)
        for j, it in enumerate(chunk):
            out.append(float(logp[j, : len(it.tgt) - 1].sum()))
    return np.asarray(out)


# --- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class Metric:
    name: str
    fn: Callable[[str, str], float]
    higher_is_better: bool


def score_hypotheses(hyps: Sequence[str], targets: Sequence[str], metrics: Sequence[Metric]) -> float:
    """Mean over metrics of per-example means, higher-is-better metrics negated."""
    if not metrics:
        raise ValueError("need at least one metric")
    vals = []
    for m in metrics:
        mean = float(np.mean([m.fn(h, t) for h, t in zip(hyps, targets)]))
        vals.append(-mean if m.higher_is_better else mean)
    return float(np.mean(vals))


def decode_dataset(model: Seq2SeqModel, dataset: Dataset, vocab: Vocab,
                   max_len: int | None = None, batch_size: int = 256) -> list[str]:
    max_len = max_len or model.config.max_tgt_len
    srcs = [encode(ex.source_text, vocab).token_ids for ex in dataset]
    hyps = []
    for i in range(0, len(srcs), batch_size):
        for ids in greedy_decode(model, srcs[i:i + batch_size], max_len):
            hyps.append(decode(ids, vocab))
    return hyps


def validation_score(model, validation: Dataset, metrics: Sequence[Metric], vocab: Vocab,
                     clean_targets: dict[str, str] | None = None) -> float:
    hyps = decode_dataset(model, validation, vocab)
    targets = [clean_targets[ex.source_id] if clean_targets else ex.output_text for ex in validation]
    return score_hypotheses(hyps, targets, metrics)


# --- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# --- training ----------------------------------------------------------------

@dataclass
class CheckpointRecord:
    step: int
    validation_score: float | None
    params: dict[str, np.ndarray] | None = field(default=None, repr=False)


@dataclass
class TrainResult:
    model: Seq2SeqModel
    selected: CheckpointRecord
    checkpoints: list[CheckpointRecord]
    log: list[tuple[int, float, float | None]]
    final_model: Seq2SeqModel
    reference_model: Seq2SeqModel | None = None

    def write_log(self, path) -> None:
        write_log(path, self.log)


def write_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss", "validation_score"])
        for step, loss, score in rows:
            w.writerow([step, repr(float(loss)), "" if score is None else repr(float(score))])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from a fresh seeded shuffle per epoch."""
    order = rng.permutation(n)
    pos = 0
    while True:
        idx = []
        while len(idx) < batch_size:
            if pos == len(order):
                order = rng.permutation(n)
                pos = 0
            take = min(batch_size - len(idx), len(order) - pos)
            idx.extend(order[pos:pos + take].tolist())
            pos += take
        yield idx


def _sequence_batch_grads(model, items, config):
    src = pad_batch([it.src for it in items])
    tgt = pad_batch([it.tgt for it in items])
    logits, trace = model.forward(src, tgt)
    logp_all, logp = realized_logprobs(logits, tgt)
    if not np.isfinite(logp).all():
        return float("nan"), None
    grad_logp = np.zeros_like(logp)
    total = 0.0
    b = len(items)
    for i, it in enumerate(items):
        n = len(it.tgt) - 1
        rep = sequence_loss(it, logp[i, :n], config)
        total += rep.value
        grad_logp[i, :n] = rep.grad_logp / b
    grads = model.backward(trace, grad_logits_from_logp(logp_all, tgt, grad_logp))
    return total / b, grads


def _pair_batch_grads(model, items, ref_logps, config):
    b = len(items)
    win = [w for w, _ in items]
    lose = [l for _, l in items]
    members = win + lose
    src = pad_batch([it.src for it in members])
    tgt = pad_batch([it.tgt for it in members])
    logits, trace = model.forward(src, tgt)
    logp_all, logp = realized_logprobs(logits, tgt)
    if not np.isfinite(logp).all():
        return float("nan"), None
    grad_logp = np.zeros_like(logp)
    total = 0.0
    for i in range(b):
        nw, nl = len(win[i].tgt) - 1, len(lose[i].tgt) - 1
        rw, rl = ref_logps[i]
        rep = dpo_loss(float(logp[i, :nw].sum()), float(logp[b + i, :nl].sum()), rw, rl,
                       config.dpo_beta)
        total += rep.value
        grad_logp[i, :nw] = rep.grad_logp[0] / b
        grad_logp[b + i, :nl] = rep.grad_logp[1] / b
    grads = model.backward(trace, grad_logits_from_logp(logp_all, tgt, grad_logp))
    return total / b, grads


def train(
    model: Seq2SeqModel,
    data,
    config: TrainConfig,
    vocab: Vocab,
    validation: Dataset | None = None,
    metrics: Sequence[Metric] | None = None,
    clean_targets: dict[str, str] | None = None,
) -> TrainResult:
    """Fine-tune a copy of ``model`` on a Dataset (or PreferencePair list for DPO)."""
    model = model.copy()
    reference = None
    if config.method == "dpo":
        if not isinstance(data, (list, tuple)) or not data or not isinstance(data[0], PreferencePair):
            raise ValueError("dpo training needs a non-empty list of preference pairs")
        items = [tuple(prepare(Dataset([p.preferred, p.dispreferred]), vocab)) for p in data]
        reference = model.copy()
        rw = sequence_logprobs(reference, [w for w, _ in items])
        rl = sequence_logprobs(reference, [l for _, l in items])
        ref_logps = list(zip(rw.tolist(), rl.tolist()))
    else:
        if not isinstance(data, Dataset):
            raise ValueError(f"{config.method} training needs an annotated Dataset")
        items = prepare(select_training_data(data, config), vocab, config.ignore_off_trajectory)
    if validation is not None and not metrics:
        raise ValueError("validation requires at least one metric")

    rng = np.random.default_rng([config.seed, 11])
    batches = _batches(len(items), config.batch_size, rng)
    opt = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    rows: list[tuple[int, float, float | None]] = []
    records: list[CheckpointRecord] = []
    best: CheckpointRecord | None = None

    for step in range(1, config.total_steps + 1):
        idx = next(batches)
        if config.method == "dpo":
            loss, grads = _pair_batch_grads(model, [items[i] for i in idx],
                                            [ref_logps[i] for i in idx], config)
        else:
            loss, grads = _sequence_batch_grads(model, [items[i] for i in idx], config)
        if grads is None or not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingError(f"non-finite loss at step {step}, batch indices {idx}")
        clip_global_norm(grads, config.clip_norm)
        opt.step(model.params, grads)

        score = None
        if validation is not None and step % config.eval_every_steps == 0:
            snapshot = model.copy()
            score = validation_score(snapshot, validation, metrics, vocab, clean_targets)
            rec = CheckpointRecord(step, score, snapshot.params)
            records.append(CheckpointRecord(step, score))
            if best is None or score < best.validation_score:
                best = rec
            log.info("step %d loss %.4f validation %.4f", step, loss, score)
        rows.append((step, loss, score))

    final = model.copy()
    if best is None:
        best = CheckpointRecord(config.total_steps, None, final.params)
        records.append(CheckpointRecord(config.total_steps, None))
    selected = Seq2SeqModel(model.config, best.params)
    return TrainResult(selected, CheckpointRecord(best.step, best.validation_score), records,
                       rows, final, reference)
