"""Desk-scale experiment drivers: architecture comparison and thresholding."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .metrics import MetricReport, comparison_table
from .models import CaptionModel, ModelConfig, build_model
from .textcorpus import CorpusRecord, VocabConfig, Vocabulary, build_vocab
from .trainpipe import MappedFeatures, RunRecord, TrainConfig, evaluate_model, train


@dataclass
class ModelRun:
    name: str
    vocab: Vocabulary
    record: RunRecord
    report: MetricReport
    model: CaptionModel


def run_one(
    name: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_records: Sequence[CorpusRecord],
    provider,
    min_count: int = 4,
    val_records: Sequence[CorpusRecord] = (),
    eval_records: Sequence[CorpusRecord] | None = None,
    model_seed: int = 0,
) -> ModelRun:
    """Build vocab on ``train_records``, train, then score greedy captions."""
    vocab = build_vocab(train_records, VocabConfig(min_count))
    model = build_model(replace(model_config, vocab_size=len(vocab)), seed=model_seed)
    record = train(model, train_records, provider, train_config, vocab, val_records)
    report = evaluate_model(model, eval_records if eval_records is not None else train_records, provider, vocab)
    return ModelRun(name, vocab, record, report, model)


def compare_architectures(
    architectures: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
    records: Sequence[CorpusRecord],
    features,
    min_count: int = 1,
) -> list[ModelRun]:
    provider = MappedFeatures(features) if isinstance(features, dict) else features
    return [
        run_one(arch, replace(model_config, architecture=arch), train_config, records, provider, min_count)
        for arch in architectures
    ]


def threshold_comparison(
    min_counts: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_records: Sequence[CorpusRecord],
    val_records: Sequence[CorpusRecord],
    features,
) -> list[ModelRun]:
    """Same corpus and model, varying only the vocabulary threshold.

    Both runs are scored on ``val_records``.
    """
    provider = MappedFeatures(features) if isinstance(features, dict) else features
    return [
        run_one(
            f"{model_config.architecture} min_count={mc}",
            model_config,
            train_config,
            train_records,
            provider,
            min_count=mc,
            val_records=val_records,
            eval_records=val_records,
        )
        for mc in min_counts
    ]


def comparison_report(runs: Sequence[ModelRun]) -> str:
    """Average metric table plus the per-run training summary."""
    lines = [comparison_table({r.name: r.report for r in runs}).rstrip("\n"), ""]
    lines.append("model,vocab_size,epochs_run,best_epoch,stop_reason,final_train_loss,final_train_acc")
    for r in runs:
        last = r.record.epochs[-1]
        lines.append(
            f"{r.name},{len(r.vocab)},{len(r.record.epochs)},{r.record.best_epoch},"
            f"{r.record.stop_reason},{last.train_loss:.4f},{last.train_acc:.4f}"
        )
    return "\n".join(lines) + "\n"
