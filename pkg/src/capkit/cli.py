"""Command-line entry point: ``capkit <command> ...``.

Exit codes: 0 success, 1 I/O failure, 2 malformed input, 3 consistency
violation. Failures print one line ``error:<category>:<message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataviz, metrics, models, synthetic, textcorpus, trainpipe

EXIT_OK, EXIT_IO, EXIT_MALFORMED, EXIT_CONSISTENCY = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def io_error(msg):
    return CliError("io", msg, EXIT_IO)


def malformed(msg):
    return CliError("malformed", msg, EXIT_MALFORMED)


def inconsistent(msg):
    return CliError("consistency", msg, EXIT_CONSISTENCY)


# ------------------------------------------------------------ manifest

MANIFEST_KEYS = {"captions", "format", "min_count", "features", "model", "train", "output_dir", "model_seed"}
REQUIRED_KEYS = {"captions", "features", "model", "output_dir"}


def load_manifest(path: Path) -> dict:
    """Parse and validate a JSON run manifest; relative paths resolve against its directory."""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise io_error(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise malformed(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict):
        raise malformed(f"{path}: manifest must be a JSON object")
    unknown = set(doc) - MANIFEST_KEYS
    if unknown:
        raise malformed(f"{path}: unknown manifest keys {sorted(unknown)}")
    missing = REQUIRED_KEYS - set(doc)
    if missing:
        raise malformed(f"{path}: missing manifest keys {sorted(missing)}")

    base = path.parent
    doc["captions"] = base / doc["captions"]
    if not doc["captions"].is_file():
        raise io_error(f"captions file not found: {doc['captions']}")
    doc["output_dir"] = base / doc["output_dir"]
    feats = doc["features"]
    if not isinstance(feats, dict) or feats.get("source") not in ("synthetic", "file"):
        raise malformed(f"{path}: features.source must be 'synthetic' or 'file'")
    extra = set(feats) - ({"source", "seed"} if feats["source"] == "synthetic" else {"source", "path"})
    if extra:
        raise malformed(f"{path}: unknown feature keys {sorted(extra)}")
    if feats["source"] == "file":
        feats["path"] = base / feats["path"]
        if not feats["path"].is_file():
            raise io_error(f"feature file not found: {feats['path']}")
    try:
        doc["model"] = dict(doc["model"])
        doc["model"].setdefault("vocab_size", 1)
        models.ModelConfig.from_dict(doc["model"])
        doc["train"] = trainpipe.TrainConfig.from_dict(doc.get("train", {}))
        textcorpus.VocabConfig(doc.setdefault("min_count", 4))
    except (TypeError, ValueError) as e:
        raise malformed(f"{path}: {e}") from None
    doc.setdefault("format", textcorpus.CONCEPTUAL)
    doc.setdefault("model_seed", 0)
    return doc


# ------------------------------------------------------------- helpers


def _read_corpus(path, fmt):
    try:
        return textcorpus.load_captions_tsv(path, fmt)
    except FileNotFoundError:
        raise io_error(f"file not found: {path}") from None
    except OSError as e:
        raise io_error(f"{path}: {e.strerror or e}") from None
    except textcorpus.CorpusError as e:
        raise malformed(str(e)) from None
    except UnicodeDecodeError:
        raise malformed(f"{path}: not valid UTF-8") from None


def _provider(src: str, dim: int):
    """``synthetic`` / ``synthetic:SEED`` or a feature-file path."""
    if src == "synthetic" or src.startswith("synthetic:"):
        _, _, seed = src.partition(":")
        try:
            return trainpipe.SyntheticFeatures(dim, int(seed) if seed else 0)
        except ValueError:
            raise malformed(f"bad synthetic feature seed {seed!r}") from None
    provider = trainpipe.MappedFeatures(_read_features(src))
    if provider.dim != dim:
        raise inconsistent(f"feature dimension {provider.dim} does not match the model's {dim}")
    return provider


def _read_features(path):
    try:
        return trainpipe.load_features(path)
    except FileNotFoundError:
        raise io_error(f"file not found: {path}") from None
    except OSError as e:
        raise io_error(f"{path}: {e.strerror or e}") from None
    except (trainpipe.FeatureFileError, textcorpus.CorpusError) as e:
        raise malformed(str(e)) from None


def _load_model(path):
    try:
        return models.load_model(path)
    except FileNotFoundError as e:
        raise io_error(f"file not found: {e.filename or path}") from None
    except models.VocabMismatch as e:
        raise inconsistent(str(e)) from None
    except (models.ModelError, ValueError, KeyError) as e:
        raise malformed(f"{path}: {e}") from None


def _model_input_dim(model) -> int:
    return model.config.image_feat_dim


def _write(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise io_error(f"{path}: {e.strerror or e}") from None


def _save_report(report, path) -> None:
    path = Path(path)
    _write(path, report.to_json() if path.suffix == ".json" else report.to_csv())


# ------------------------------------------------------------- commands


def cmd_vocab(args) -> int:
    corpus = _read_corpus(args.captions, args.format)
    try:
        vocab = textcorpus.build_vocab(corpus, textcorpus.VocabConfig(args.min_count))
    except ValueError as e:
        raise malformed(str(e)) from None
    _write(args.out, vocab.to_tsv())
    print(f"vocabulary size: {len(vocab)}")
    return EXIT_OK


def cmd_train(args) -> int:
    m = load_manifest(Path(args.manifest))
    corpus = _read_corpus(m["captions"], m["format"])
    tcfg: trainpipe.TrainConfig = m["train"]
    try:
        train_set, val_set, test_set = trainpipe.split(corpus, tcfg.split, tcfg.seed)
    except trainpipe.CorpusTooSmall as e:
        raise malformed(str(e)) from None
    vocab = textcorpus.build_vocab(train_set, textcorpus.VocabConfig(m["min_count"]))
    mcfg = models.ModelConfig.from_dict({**m["model"], "vocab_size": len(vocab)})
    feats = m["features"]
    if feats["source"] == "synthetic":
        provider = trainpipe.SyntheticFeatures(mcfg.image_feat_dim, feats.get("seed", 0))
    else:
        provider = _provider(str(feats["path"]), mcfg.image_feat_dim)
    try:
        model = models.build_model(mcfg, seed=m["model_seed"])
    except models.ModelError as e:
        raise malformed(str(e)) from None

    out = Path(m["output_dir"])
    try:
        record = trainpipe.train(model, train_set, provider, tcfg, vocab, val_set, checkpoint_dir=out / "model")
    except trainpipe.MissingFeature as e:
        raise inconsistent(str(e)) from None
    splits = {
        "train": [r.image_id for r in train_set],
        "validation": [r.image_id for r in val_set],
        "test": [r.image_id for r in test_set],
    }
    _write(out / "splits.json", json.dumps(splits, indent=2) + "\n")
    _write(out / "run.json", record.to_json())
    _write(out / "run.csv", record.to_csv())
    print(
        f"trained {mcfg.architecture}: {len(record.epochs)} epochs, best epoch {record.best_epoch}, "
        f"stop reason {record.stop_reason}, model {out / 'model' / 'model.json'}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, vocab = _load_model(args.model)
    corpus = _read_corpus(args.captions, args.format)
    if args.split:
        ids = _split_ids(args.split, args.split_name)
        corpus = [r for r in corpus if r.image_id in ids]
        if not corpus:
            raise inconsistent(f"no caption records belong to split {args.split_name!r}")
    provider = _provider(args.features, _model_input_dim(model))
    try:
        report = trainpipe.evaluate_model(model, corpus, provider, vocab, _metric_config(args))
    except trainpipe.MissingFeature as e:
        raise inconsistent(str(e)) from None
    _save_report(report, args.report)
    avg = report.averages
    print(" ".join(f"{k}={avg[k]:.4f}" for k in metrics.METRIC_NAMES))
    return EXIT_OK


def _split_ids(path, name) -> set[str]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise io_error(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError:
        raise malformed(f"{path}: invalid JSON") from None
    if name not in doc:
        raise malformed(f"{path}: no split named {name!r}")
    return set(doc[name])


def _metric_config(args) -> metrics.MetricConfig:
    if getattr(args, "synonyms", None):
        try:
            return metrics.MetricConfig(synonyms=metrics.load_synonyms(args.synonyms))
        except OSError as e:
            raise io_error(f"{args.synonyms}: {e.strerror or e}") from None
    return metrics.DEFAULT_CONFIG


def cmd_score(args) -> int:
    try:
        pairs = metrics.load_pairs_tsv(args.pairs)
    except FileNotFoundError:
        raise io_error(f"file not found: {args.pairs}") from None
    except OSError as e:
        raise io_error(f"{args.pairs}: {e.strerror or e}") from None
    except textcorpus.CorpusError as e:
        raise malformed(str(e)) from None
    report = metrics.score_corpus(pairs, _metric_config(args))
    _save_report(report, args.report)
    avg = report.averages
    print(" ".join(f"{k}={avg[k]:.4f}" for k in metrics.METRIC_NAMES))
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab = _load_model(args.model)
    provider = _provider(args.features, _model_input_dim(model))
    try:
        caption = trainpipe.generate_captions(model, [args.image_id], provider, vocab)[args.image_id]
    except trainpipe.MissingFeature as e:
        raise inconsistent(str(e)) from None
    print(" ".join(caption))
    return EXIT_OK


def cmd_analyze(args) -> int:
    vectors = _read_features(args.features)
    if not vectors:
        raise malformed(f"{args.features}: no feature rows")
    ids = list(vectors)
    X = np.stack([vectors[i] for i in ids])
    try:
        if args.pca is not None:
            res = dataviz.pca(X, args.pca, seed=args.seed)
            text = dataviz.projection_csv(ids, res.projected)
        else:
            km = dataviz.kmeans(X, args.kmeans, seed=args.seed, max_iters=args.max_iters, n_init=args.n_init)
            proj = dataviz.pca(X, min(2, X.shape[1], X.shape[0]), seed=args.seed).projected
            text = dataviz.projection_csv(ids, proj, km.assignments)
    except (ValueError, dataviz.DegenerateData) as e:
        raise malformed(str(e)) from None
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    task = synthetic.make_synthetic_task(args.images, args.dim, args.seed, args.noise_words)
    try:
        textcorpus.save_captions_tsv(task.records, args.captions)
        trainpipe.save_features(task.features, args.features)
    except OSError as e:
        raise io_error(str(e)) from None
    print(f"wrote {len(task.records)} captions to {args.captions} and features to {args.features}")
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capkit", description="Desk-scale image-captioning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    fmt_help = "caption file layout: 'conceptual' (caption<TAB>id) or 'flickr8k' (id#n<TAB>caption)"

    s = sub.add_parser("vocab", help="build a thresholded vocabulary from a caption file")
    s.add_argument("--captions", required=True, help="caption TSV file")
    s.add_argument("--format", default=textcorpus.CONCEPTUAL, choices=textcorpus.FORMATS, help=fmt_help)
    s.add_argument("--min-count", type=int, default=4, help="drop tokens seen fewer times (default: 4)")
    s.add_argument("--out", required=True, help="output vocabulary file (id<TAB>token<TAB>count)")
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("train", help="train a caption model from a JSON run manifest")
    s.add_argument("--manifest", required=True, help="JSON run manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="greedy-decode captions and score them against references")
    s.add_argument("--model", required=True, help="model manifest (model.json) or its directory")
    s.add_argument("--captions", required=True, help="reference caption TSV file")
    s.add_argument("--format", default=textcorpus.CONCEPTUAL, choices=textcorpus.FORMATS, help=fmt_help)
    s.add_argument("--features", required=True, help="feature file path, or 'synthetic[:SEED]'")
    s.add_argument("--report", required=True, help="report path (.json for JSON, otherwise CSV)")
    s.add_argument("--split", help="splits.json written by 'train'; restricts scoring to one split")
    s.add_argument("--split-name", default="train", help="split to score when --split is given (default: train)")
    s.add_argument("--synonyms", help="synonym table for METEOR (token<TAB>syn1,syn2,...)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("score", help="score candidate/reference pairs from a TSV file")
    s.add_argument("--pairs", required=True, help="TSV: image_id<TAB>candidate<TAB>reference[<TAB>...]")
    s.add_argument("--report", required=True, help="report path (.json for JSON, otherwise CSV)")
    s.add_argument("--synonyms", help="synonym table for METEOR (token<TAB>syn1,syn2,...)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("generate", help="print a greedy caption for one image")
    s.add_argument("--model", required=True, help="model manifest (model.json) or its directory")
    s.add_argument("--image-id", required=True, help="image id to caption")
    s.add_argument("--features", required=True, help="feature file path, or 'synthetic[:SEED]'")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("analyze", help="PCA projection or k-means clustering of a feature file")
    s.add_argument("--features", required=True, help="feature file (dim=<N> header)")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--pca", type=int, metavar="K", help="project onto the top K principal components")
    g.add_argument("--kmeans", type=int, metavar="K", help="cluster into K groups (typical: 20)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    s.add_argument("--max-iters", type=int, default=100, help="Lloyd iteration cap for --kmeans (default: 100)")
    s.add_argument("--n-init", type=int, default=10, help="k-means restarts; the best is kept (default: 10)")
    s.add_argument("--out", help="output CSV path (default: standard output)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="write a synthetic caption file and matching feature file")
    s.add_argument("--images", type=int, default=200, help="number of images (default: 200)")
    s.add_argument("--dim", type=int, default=64, help="feature dimension (default: 64)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    s.add_argument("--noise-words", type=int, default=0, help="filler vocabulary size with no feature signal")
    s.add_argument("--captions", required=True, help="output caption TSV (conceptual layout)")
    s.add_argument("--features", required=True, help="output feature file")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error:{e.category}:{e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
