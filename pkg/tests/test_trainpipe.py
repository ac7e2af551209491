import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capkit.models import INJECT, MERGE, ModelConfig, build_model
from capkit.synthetic import make_synthetic_task
from capkit.textcorpus import Caption, CorpusRecord, VocabConfig, build_vocab
from capkit.trainpipe import (
    CorpusTooSmall,
    DimensionMismatch,
    DuplicateId,
    Example,
    MappedFeatures,
    MissingFeature,
    TrainConfig,
    early_stop_check,
    evaluate_loss,
    load_features,
    make_batches,
    make_examples,
    object_labels,
    save_features,
    split,
    split_sizes,
    synthetic_features,
    train,
)


def records(n):
    return [CorpusRecord(f"img{i}", [Caption(f"caption {i}"), Caption("again")]) for i in range(n)]


class TestSplit:
    def test_degenerate_ratio(self):
        tr, va, te = split(records(7), (1.0, 0.0, 0.0), seed=1)
        assert len(tr) == 7 and not va and not te

    def test_deterministic(self):
        a = split(records(20), (0.8, 0.1, 0.1), seed=5)
        b = split(records(20), (0.8, 0.1, 0.1), seed=5)
        assert [[r.image_id for r in s] for s in a] == [[r.image_id for r in s] for s in b]

    def test_sizes_ten(self):
        # floor(8.0), floor(1.0), floor(1.0) leaves no remainder
        assert [len(s) for s in split(records(10), (0.8, 0.1, 0.1), 0)] == [8, 1, 1]

    def test_remainder_goes_to_largest_fraction(self):
        # 7 * (0.5, 0.3, 0.2) = 3.5, 2.1, 1.4 -> floors 3, 2, 1; one left -> train
        assert split_sizes(7, (0.5, 0.3, 0.2)) == [4, 2, 1]

    def test_too_small(self):
        with pytest.raises(CorpusTooSmall):
            split(records(3), (0.8, 0.1, 0.1), 0)

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split(records(10), (0.5, 0.1, 0.1), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 60), st.integers(0, 1000))
    def test_disjoint_and_exhaustive(self, n, seed):
        parts = split(records(n), (0.7, 0.2, 0.1), seed)
        ids = [r.image_id for p in parts for r in p]
        assert sorted(ids) == sorted(r.image_id for r in records(n))
        assert len(ids) == len(set(ids))
        # captions of an image travel with it
        assert all(len(r.captions) == 2 for p in parts for r in p)


class TestFeatures:
    def test_synthetic_deterministic_unit_norm(self):
        a = synthetic_features("img1", 64, seed=3)
        assert np.array_equal(a, synthetic_features("img1", 64, seed=3))
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12
        assert not np.array_equal(a, synthetic_features("img1", 64, seed=4))

    def test_synthetic_near_orthogonal(self):
        vecs = [synthetic_features(f"id{i}", 64) for i in range(2000)]
        cos = [abs(vecs[2 * i] @ vecs[2 * i + 1]) for i in range(1000)]
        assert max(cos) < 0.5

    def test_file_rows(self, tmp_path):
        p = tmp_path / "f.tsv"
        p.write_text("dim=4\na\t1,2,3,4\nb\t0.5,0,0,-1e-3\n")
        feats = load_features(p)
        assert len(feats) == 2 and feats["b"][3] == -1e-3

    def test_dimension_mismatch_names_row(self, tmp_path):
        p = tmp_path / "f.tsv"
        p.write_text("dim=4\na\t1,2,3,4\nb\t1,2,3\n")
        with pytest.raises(DimensionMismatch, match=":3:"):
            load_features(p)

    def test_duplicate(self, tmp_path):
        p = tmp_path / "f.tsv"
        p.write_text("dim=1\na\t1\na\t2\n")
        with pytest.raises(DuplicateId):
            load_features(p)

    def test_round_trip(self, tmp_path):
        vecs = {f"i{k}": np.random.default_rng(k).normal(size=5) for k in range(4)}
        save_features(vecs, tmp_path / "f.tsv")
        back = load_features(tmp_path / "f.tsv")
        assert list(back) == list(vecs)
        assert all(back[k].tobytes() == vecs[k].tobytes() for k in vecs)

    def test_missing_feature(self):
        with pytest.raises(MissingFeature):
            MappedFeatures({"a": np.zeros(2)})("b")

    def test_object_labels_top_k(self):
        assert list(object_labels(np.array([0.1, 0.9, 0.5, 0.9, -1.0]), 3)) == [1, 3, 2]


class TestEarlyStop:
    def test_rule(self):
        assert not early_stop_check([1.0, 0.9, 0.95], 2)
        assert early_stop_check([1.0, 0.9, 0.95, 0.97], 2)

    def test_never_stops_while_improving(self):
        hist = list(np.linspace(2.0, 0.1, 30))
        assert not any(early_stop_check(hist[: k + 1], 2) for k in range(len(hist)))

    def test_min_delta(self):
        # 0.99 is not a 0.05 improvement over 1.0, neither is 0.995
        assert early_stop_check([1.0, 0.99, 0.995], 2, min_delta=0.05)
        assert not early_stop_check([1.0, 0.99, 0.995], 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            early_stop_check([], 2)


def test_batches_are_length_bucketed_and_seeded():
    ex = [Example(str(i), tuple(range(2 + i % 5))) for i in range(23)]
    a = make_batches(ex, 4, np.random.default_rng(0))
    b = make_batches(ex, 4, np.random.default_rng(0))
    assert a == b
    lengths = [len(e.ids) for batch in make_batches(ex, 4) for e in batch]
    assert lengths == sorted(lengths)
    assert sorted(e.image_id for batch in a for e in batch) == sorted(e.image_id for e in ex)


def _setup(n=4, arch=INJECT, noise_words=0, seed=0):
    task = make_synthetic_task(n, dim=16, seed=seed, noise_words=noise_words)
    vocab = build_vocab(task.records, VocabConfig(1))
    model = build_model(ModelConfig(len(vocab), 16, 32, 16, architecture=arch), seed=0)
    return task, vocab, model, MappedFeatures(task.features)


def test_pad_masking_matches_unpadded_evaluation():
    task, vocab, model, prov = _setup(6, noise_words=3)
    ex = make_examples(task.records, vocab)
    joint, joint_acc = evaluate_loss(model, ex, prov, batch_size=64)
    tokens = [len(e.ids) - 1 for e in ex]
    parts = [evaluate_loss(model, [e], prov) for e in ex]
    assert joint == pytest.approx(sum(l * n for (l, _), n in zip(parts, tokens)) / sum(tokens), rel=1e-12)
    assert joint_acc == pytest.approx(sum(a * n for (_, a), n in zip(parts, tokens)) / sum(tokens), rel=1e-12)


def test_memorises_single_example():
    task, vocab, model, prov = _setup(1)
    rec = train(model, task.records, prov, TrainConfig(epochs=80, learning_rate=1e-2, split=(1, 0, 0)), vocab)
    assert rec.epochs[-1].train_loss < 0.1
    loss, acc = evaluate_loss(model, make_examples(task.records, vocab), prov)
    assert loss < 0.1 and acc == 1.0


@pytest.mark.parametrize("arch", [INJECT, MERGE])
def test_training_is_bitwise_reproducible(arch):
    runs = []
    for _ in range(2):
        task, vocab, model, prov = _setup(12, arch)
        cfg = TrainConfig(epochs=4, batch_size=5, learning_rate=1e-2, seed=11)
        rec = train(model, task.records[:9], prov, cfg, vocab, task.records[9:])
        runs.append(([e.deterministic() for e in rec.epochs], model.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_early_stop_fires_patience_after_best(tmp_path):
    task = make_synthetic_task(70, dim=64, seed=0, noise_words=30)
    vocab = build_vocab(task.records[:50], VocabConfig(1))
    model = build_model(ModelConfig(len(vocab), 32, 64, 64), seed=0)
    cfg = TrainConfig(epochs=100, batch_size=10, learning_rate=1e-2, patience=2)
    rec = train(model, task.records[:50], MappedFeatures(task.features), cfg, vocab, task.records[50:],
                checkpoint_dir=tmp_path)
    assert rec.stop_reason == "early_stop"
    assert len(rec.epochs) - 1 == rec.best_epoch + cfg.patience
    vals = [e.val_loss for e in rec.epochs]
    assert vals[rec.best_epoch] == min(vals)
    # model holds the best-epoch parameters, which is what the checkpoint stores
    from capkit.models import load_model

    saved, _ = load_model(tmp_path)
    assert all(saved.state_dict()[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())
    assert evaluate_loss(model, make_examples(task.records[50:], vocab), MappedFeatures(task.features))[0] == \
        pytest.approx(vals[rec.best_epoch], rel=1e-12)


def test_missing_feature_raised_before_training():
    task, vocab, model, _ = _setup(3)
    before = model.state_dict()
    with pytest.raises(MissingFeature):
        train(model, task.records, MappedFeatures({"img0000": np.zeros(16)}), TrainConfig(epochs=1), vocab)
    assert all(before[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())


def test_run_record_outputs():
    task, vocab, model, prov = _setup(6)
    rec = train(model, task.records[:4], prov, TrainConfig(epochs=2, batch_size=2), vocab, task.records[4:])
    rows = list(csv.reader(io.StringIO(rec.to_csv())))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"]
    assert len(rows) == 3
    for e in rec.epochs:
        assert e.train_loss >= 0 and 0 <= e.train_acc <= 1 and 0 <= e.val_acc <= 1
    assert '"stop_reason"' in rec.to_json()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 2, "warmup": 3})
