"""Splitting, feature providers, teacher-forced training and early stopping."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import numcore as nc
from .models import MULTIMODAL, CaptionModel, decode_greedy_batch, save_model
from .textcorpus import PAD, CorpusRecord, Vocabulary, encode

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


class CorpusTooSmall(PipelineError):
    pass


class MissingFeature(KeyError):
    def __init__(self, image_id: str):
        super().__init__(image_id)
        self.image_id = image_id

    def __str__(self) -> str:
        return f"no feature vector for image {self.image_id!r}"


class FeatureFileError(PipelineError):
    pass


class DimensionMismatch(FeatureFileError):
    pass


class DuplicateId(FeatureFileError):
    pass


# ------------------------------------------------------------- splitting


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand out the remainder by largest fractional part."""
    raw = [r * n for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(corpus: Sequence[CorpusRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle images deterministically and cut into (train, val, test)."""
    _check_ratios(ratios)
    order = nc.make_rng(seed).permutation(len(corpus))
    shuffled = [corpus[i] for i in order]
    sizes = split_sizes(len(corpus), ratios)
    for name, size, ratio in zip(("train", "validation", "test"), sizes, ratios):
        if ratio > 0 and size == 0:
            raise CorpusTooSmall(f"{len(corpus)} images leave the {name} split empty at ratios {tuple(ratios)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def _check_ratios(ratios) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


# ------------------------------------------------------ feature providers


class FeatureProvider(Protocol):
    dim: int

    def __call__(self, image_id: str) -> np.ndarray: ...


def synthetic_features(image_id: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit-norm Gaussian vector seeded from sha256(seed, image_id)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    digest = hashlib.sha256(f"{seed}\x00{image_id}".encode("utf-8")).digest()
    rng = nc.make_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class SyntheticFeatures:
    dim: int
    seed: int = 0

    def __call__(self, image_id: str) -> np.ndarray:
        return synthetic_features(image_id, self.dim, self.seed)


class MappedFeatures:
    def __init__(self, vectors: Mapping[str, np.ndarray]):
        self.vectors = dict(vectors)
        dims = {v.shape[0] for v in self.vectors.values()}
        if len(dims) > 1:
            raise DimensionMismatch(f"feature vectors of mixed dimension {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def __call__(self, image_id: str) -> np.ndarray:
        try:
            return self.vectors[image_id]
        except KeyError:
            raise MissingFeature(image_id) from None

    def __len__(self) -> int:
        return len(self.vectors)


def load_features(path) -> dict[str, np.ndarray]:
    """Read ``dim=<N>`` then ``image_id<TAB>v1,...,vN`` rows."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().replace("\r\n", "\n").split("\n")
    if not lines or not lines[0].startswith("dim="):
        raise FeatureFileError(f"{path}:1: expected header dim=<N>")
    try:
        dim = int(lines[0][4:])
    except ValueError:
        raise FeatureFileError(f"{path}:1: bad dimension {lines[0][4:]!r}") from None
    if dim < 1:
        raise FeatureFileError(f"{path}:1: dimension must be >= 1")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        image_id, sep, rest = line.partition("\t")
        if not sep or not image_id:
            from .textcorpus import MalformedLine

            raise MalformedLine(path, lineno, "expected image_id<TAB>v1,...,vN")
        try:
            values = [float(v) for v in rest.split(",")]
        except ValueError:
            from .textcorpus import MalformedLine

            raise MalformedLine(path, lineno, "non-numeric feature value") from None
        if len(values) != dim:
            raise DimensionMismatch(f"{path}:{lineno}: {len(values)} values, declared dim={dim}")
        if image_id in out:
            raise DuplicateId(f"{path}:{lineno}: duplicate image id {image_id!r}")
        out[image_id] = np.array(values, dtype=np.float64)
    return out


def save_features(vectors: Mapping[str, np.ndarray], path) -> None:
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise DimensionMismatch(f"cannot save vectors of dimensions {sorted(dims)}")
    lines = [f"dim={dims.pop()}"]
    for image_id, v in vectors.items():
        lines.append(image_id + "\t" + ",".join(repr(float(x)) for x in v))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def object_labels(features: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest feature entries (ties go to the lower index)."""
    return np.argsort(-np.asarray(features), kind="stable")[:k]


def conditioning_for(model: CaptionModel, provider: FeatureProvider, image_ids: Sequence[str]) -> np.ndarray:
    feats = np.stack([provider(i) for i in image_ids])
    if model.architecture == MULTIMODAL:
        k = model.config.top_k_objects
        return np.stack([object_labels(f, k) for f in feats])
    return feats


# ---------------------------------------------------------- early stop


def early_stop_check(val_loss_history: Sequence[float], patience: int = 2, min_delta: float = 0.0) -> bool:
    """True once ``patience`` epochs in a row fail to beat the running best by > min_delta."""
    if not val_loss_history:
        raise ValueError("empty loss history")
    best = val_loss_history[0]
    stale = 0
    for loss in val_loss_history[1:]:
        if best - loss > min_delta:
            best = loss
            stale = 0
        else:
            stale += 1
    return stale >= patience


# ------------------------------------------------------------- records


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 2
    min_delta: float = 0.0
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    clip_norm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        _check_ratios(self.split)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    seconds: float

    def deterministic(self) -> tuple:
        """Every field except wall-clock time."""
        return (self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc)


@dataclass
class RunRecord:
    config: TrainConfig
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = "max_epochs"
    checkpoint_path: str | None = None
    monitor: str = "val_loss"

    def monitored(self) -> list[float]:
        key = "val_loss" if self.monitor == "val_loss" else "train_loss"
        return [getattr(e, key) for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"))
        for e in self.epochs:
            w.writerow(
                (e.epoch, repr(e.train_loss), repr(e.train_acc), _opt(e.val_loss), _opt(e.val_acc), f"{e.seconds:.3f}")
            )
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "monitor": self.monitor,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "checkpoint": self.checkpoint_path,
            "epochs": [asdict(e) for e in self.epochs],
        }
        return json.dumps(doc, indent=2) + "\n"


def _opt(x):
    return "" if x is None else repr(x)


# ------------------------------------------------------------ batching


@dataclass(frozen=True)
class Example:
    image_id: str
    ids: tuple[int, ...]


def make_examples(records: Sequence[CorpusRecord], vocab: Vocabulary) -> list[Example]:
    return [Example(r.image_id, tuple(encode(c, vocab))) for r in records for c in r.captions]


def make_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None):
    """Group examples of similar length; batch order is shuffled when ``rng`` is given."""
    idx = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    idx = sorted(idx, key=lambda i: len(examples[i].ids))
    batches = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return [[examples[i] for i in b] for b in batches]


def pad_batch(batch: Sequence[Example]) -> np.ndarray:
    T = max(len(e.ids) for e in batch)
    out = np.full((len(batch), T), PAD, dtype=np.int64)
    for b, e in enumerate(batch):
        out[b, : len(e.ids)] = e.ids
    return out


def _batch_loss(model: CaptionModel, provider, batch):
    """Return (loss tensor, n target tokens, n correct) for one padded batch."""
    ids = pad_batch(batch)
    cond = conditioning_for(model, provider, [e.image_id for e in batch])
    logits = model.forward(cond, ids[:, :-1])
    targets = ids[:, 1:].T.reshape(-1)
    loss = nc.cross_entropy(logits, targets, ignore_index=PAD)
    keep = targets != PAD
    correct = int((np.argmax(logits.data, axis=1)[keep] == targets[keep]).sum())
    return loss, int(keep.sum()), correct


def evaluate_loss(model: CaptionModel, examples: Sequence[Example], provider, batch_size: int = 64):
    """Token-weighted mean loss and next-token accuracy under teacher forcing."""
    total_loss, total_tok, total_ok = 0.0, 0, 0
    with nc.no_grad():
        for batch in make_batches(examples, batch_size):
            loss, n, ok = _batch_loss(model, provider, batch)
            total_loss += loss.item() * n
            total_tok += n
            total_ok += ok
    return total_loss / total_tok, total_ok / total_tok


# --------------------------------------------------------------- train


def train(
    model: CaptionModel,
    train_records: Sequence[CorpusRecord],
    provider: FeatureProvider,
    config: TrainConfig,
    vocab: Vocabulary,
    val_records: Sequence[CorpusRecord] = (),
    checkpoint_dir=None,
    clock: Callable[[], float] = time.perf_counter,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> RunRecord:
    """Teacher-forced training with early stopping.

    The model is left holding the parameters of the best epoch. With no
    validation records the training loss is monitored instead.
    """
    if not train_records:
        raise CorpusTooSmall("empty training set")
    train_ex = make_examples(train_records, vocab)
    val_ex = make_examples(val_records, vocab)
    for ex in train_ex + val_ex:
        provider(ex.image_id)  # surface MissingFeature before any update

    params = model.parameters()
    rng = nc.make_rng(config.seed)
    opt = nc.OptimState()
    record = RunRecord(config, monitor="val_loss" if val_ex else "train_loss")
    best_loss, best_state = math.inf, None

    for epoch in range(config.epochs):
        t0 = clock()
        loss_sum, tok_sum, ok_sum = 0.0, 0, 0
        for batch in make_batches(train_ex, config.batch_size, rng):
            nc.zero_grad(params)
            loss, n, ok = _batch_loss(model, provider, batch)
            nc.backward(loss)
            if config.clip_norm > 0:
                nc.clip_grad_norm(params, config.clip_norm)
            if config.optimizer == "adam":
                nc.adam_step(params, opt, config.learning_rate)
            else:
                nc.sgd_step(params, config.learning_rate)
            loss_sum += loss.item() * n
            tok_sum += n
            ok_sum += ok
        val_loss = val_acc = None
        if val_ex:
            val_loss, val_acc = evaluate_loss(model, val_ex, provider)
        stats = EpochStats(epoch, loss_sum / tok_sum, ok_sum / tok_sum, val_loss, val_acc, clock() - t0)
        record.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        log.info(
            "epoch %d train_loss=%.4f train_acc=%.4f val_loss=%s val_acc=%s",
            epoch, stats.train_loss, stats.train_acc, _opt(val_loss), _opt(val_acc),
        )

        current = record.monitored()[-1]
        if current < best_loss:
            best_loss, best_state = current, model.state_dict()
            record.best_epoch = epoch
            if checkpoint_dir is not None:
                record.checkpoint_path = str(save_model(model, checkpoint_dir, vocab, seed=config.seed))
        if early_stop_check(record.monitored(), config.patience, config.min_delta):
            record.stop_reason = "early_stop"
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return record


# --------------------------------------------------------- generation


def generate_captions(
    model: CaptionModel,
    image_ids: Sequence[str],
    provider: FeatureProvider,
    vocab: Vocabulary,
    max_len: int | None = None,
    batch_size: int = 64,
) -> dict[str, list[str]]:
    out = {}
    for i in range(0, len(image_ids), batch_size):
        chunk = list(image_ids[i : i + batch_size])
        cond = conditioning_for(model, provider, chunk)
        for image_id, ids in zip(chunk, decode_greedy_batch(model, cond, max_len)):
            out[image_id] = [vocab.id_to_token[j] for j in ids]
    return out


def evaluate_model(model, records: Sequence[CorpusRecord], provider, vocab, metric_config=None, max_len=None):
    """Greedy-decode every image and score against its reference captions."""
    from .metrics import DEFAULT_CONFIG, SentencePair, score_corpus

    captions = generate_captions(model, [r.image_id for r in records], provider, vocab, max_len)
    pairs = [
        (r.image_id, SentencePair(captions[r.image_id], [c.tokens for c in r.captions]))
        for r in records
    ]
    return score_corpus(pairs, metric_config or DEFAULT_CONFIG)
