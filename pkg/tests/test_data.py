import json
from collections import Counter

import numpy as np
import pytest

from dfdlab.data import (
    DatasetIndex,
    EpochSpec,
    IndexingError,
    PlanError,
    SampleRecord,
    build_index,
    fixed_split,
    fraction_split,
    plan_epoch,
    sample_id,
)
from tests.conftest import make_corpus


def synthetic_index(n_real, n_fake, split="train"):
    records = [
        SampleRecord(sample_id(f"/r/{i}"), f"/r/{i}", 1, split) for i in range(n_real)
    ] + [
        SampleRecord(sample_id(f"/f/{i}"), f"/f/{i}", 0, split) for i in range(n_fake)
    ]
    return DatasetIndex(records)


# ---------------------------------------------------------------------------
# records and index


def test_record_validation():
    with pytest.raises(ValueError, match="label"):
        SampleRecord("abc", "/x", 2, "train")
    with pytest.raises(ValueError, match="split"):
        SampleRecord("abc", "/x", 1, "training")


def test_duplicate_ids_rejected():
    r = SampleRecord("same", "/a", 1, "train")
    q = SampleRecord("same", "/b", 0, "train")
    with pytest.raises(IndexingError, match="duplicate sample id"):
        DatasetIndex([r, q])


def test_counts_recomputable_from_records(toy_index):
    manual = Counter((r.split, r.label) for r in toy_index.records)
    assert toy_index.counts() == dict(manual)


def test_index_save_load_round_trip(toy_index, tmp_path):
    path = tmp_path / "index.psv"
    toy_index.save(path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == "dfdlab-index/1"
    assert "|" in text.splitlines()[1]
    loaded = DatasetIndex.load(path)
    assert loaded.records == toy_index.records


def test_index_load_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.psv"
    p.write_text("something-else/9\n", encoding="utf-8")
    with pytest.raises(IndexingError, match="unsupported index format"):
        DatasetIndex.load(p)


def test_index_load_rejects_malformed_line(tmp_path):
    p = tmp_path / "bad.psv"
    p.write_text("dfdlab-index/1\nonly|three|fields\n", encoding="utf-8")
    with pytest.raises(IndexingError, match="expected 4 fields"):
        DatasetIndex.load(p)


# ---------------------------------------------------------------------------
# building


def test_build_index_counts_toy_corpus(toy_index):
    assert toy_index.class_total(1) == 40
    assert toy_index.class_total(0) == 40


def test_build_index_missing_root_fatal(tmp_path):
    with pytest.raises(IndexingError, match="not a readable directory"):
        build_index([tmp_path / "nope"], fixed_split("train"))


def test_build_index_empty_real_class_fatal(tmp_path):
    root = tmp_path / "corpus"
    make_corpus(root, n_real=0, n_fake=3)
    (root / "real").rmdir()
    with pytest.raises(IndexingError, match="class 'real' has zero samples"):
        build_index([root], fixed_split("train"))


def test_build_index_excludes_undecodable_with_report(tmp_path):
    root = make_corpus(tmp_path / "corpus", n_real=4, n_fake=4)
    for i in range(5):
        (root / "fake" / f"broken{i}.png").write_bytes(b"not an image at all")
    index, report = build_index([root], fixed_split("train"))
    assert len(report.excluded) == 5
    assert len(index) == 8
    assert all("broken" in path for path, _ in report.excluded)
    assert report.n_scanned == 13


def test_build_index_deterministic_order(tmp_path):
    root = make_corpus(tmp_path / "corpus", n_real=6, n_fake=6)
    a, _ = build_index([root], fraction_split(0.8, 0.1, 0.1, seed=9))
    b, _ = build_index([root], fraction_split(0.8, 0.1, 0.1, seed=9))
    assert a.records == b.records
    paths = [r.path for r in a.records]
    assert paths == sorted(paths)


def test_fraction_split_is_stable_per_id():
    rule = fraction_split(0.6, 0.2, 0.2, seed=42)
    ids = [sample_id(f"/img/{i}.png") for i in range(500)]
    first = [rule(i) for i in ids]
    second = [rule(i) for i in ids]
    assert first == second
    shares = Counter(first)
    assert 0.5 < shares["train"] / 500 < 0.7  # roughly the requested fraction


def test_fraction_split_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        fraction_split(0.5, 0.2, 0.2)


# ---------------------------------------------------------------------------
# epoch planning


def test_epoch_spec_validation():
    with pytest.raises(ValueError, match="even"):
        EpochSpec(images_per_epoch=30, batch_size=5)
    with pytest.raises(ValueError, match="divisible"):
        EpochSpec(images_per_epoch=100, batch_size=32)
    assert EpochSpec().n_batches == 100  # 25600 / 256


def test_plan_balanced_batches_without_replacement():
    index = synthetic_index(1000, 5000)
    spec = EpochSpec(images_per_epoch=1600, batch_size=64, seed=3)
    plan = plan_epoch(index, spec, epoch_number=0)
    assert len(plan.batches) == 25
    seen = {0: [], 1: []}
    for batch in plan.batches:
        assert len(batch) == 64
        labels = [index.by_id[sid].label for sid in batch]
        assert sum(labels) == 32  # exactly half real
        for sid in batch:
            seen[index.by_id[sid].label].append(sid)
    # capacity allows: no within-epoch duplicates per class
    for label in (0, 1):
        assert len(seen[label]) == 800
        assert len(set(seen[label])) == 800
    assert plan.with_replacement == {0: False, 1: False}


def test_plan_falls_back_to_replacement_when_class_small():
    index = synthetic_index(10, 5000)
    spec = EpochSpec(images_per_epoch=1600, batch_size=64, seed=3)
    plan = plan_epoch(index, spec, 0)
    assert plan.with_replacement[1] is True
    assert plan.with_replacement[0] is False
    for batch in plan.batches:
        labels = [index.by_id[sid].label for sid in batch]
        assert sum(labels) == 32


def test_plan_is_pure_function_of_seed_and_epoch():
    index = synthetic_index(300, 700)
    spec = EpochSpec(images_per_epoch=320, batch_size=32, seed=77)
    a = plan_epoch(index, spec, 4)
    b = plan_epoch(index, spec, 4)
    assert a.batches == b.batches
    assert a.epoch_seed == b.epoch_seed
    c = plan_epoch(index, spec, 5)
    assert c.batches != a.batches
    d = plan_epoch(index, EpochSpec(320, 32, seed=78), 4)
    assert d.batches != a.batches


def test_plan_missing_class_fatal():
    records = [
        SampleRecord(sample_id(f"/f/{i}"), f"/f/{i}", 0, "train") for i in range(10)
    ]
    # a real sample exists, but not in train
    records.append(SampleRecord(sample_id("/r/0"), "/r/0", 1, "test"))
    index = DatasetIndex(records)
    with pytest.raises(PlanError, match="class 'real' has zero samples in the train split"):
        plan_epoch(index, EpochSpec(32, 8, seed=0), 0)


def test_plan_coverage_is_not_pathological():
    # every member of a small class should appear across a few epochs
    index = synthetic_index(50, 5000)
    spec = EpochSpec(images_per_epoch=80, batch_size=8, seed=21)  # need 40 <= 50
    appearances = Counter()
    for epoch in range(30):
        for batch in plan_epoch(index, spec, epoch).batches:
            for sid in batch:
                if index.by_id[sid].label == 1:
                    appearances[sid] += 1
    # 30 epochs x 40 draws over 50 ids: every id should show up
    assert len(appearances) == 50
    mean = np.mean(list(appearances.values()))
    assert abs(mean - 24.0) < 1e-9  # 30*40/50 exactly, every draw accounted for


def test_corpus_scale_plan_shape():
    # production-scale sanity: heavily imbalanced corpus, default epoch spec
    index = synthetic_index(42_690, 219_470)
    assert len(index) == 262_160
    spec = EpochSpec(seed=1)  # 25600 / 256
    plan = plan_epoch(index, spec, 0)
    assert len(plan.batches) == 100
    labels_per_batch = [
        sum(index.by_id[sid].label for sid in batch) for batch in plan.batches
    ]
    assert labels_per_batch == [128] * 100
    assert plan.with_replacement == {0: False, 1: False}
    reals = [sid for batch in plan.batches for sid in batch if index.by_id[sid].label == 1]
    assert len(set(reals)) == 12_800  # without replacement
    json.dumps(plan.batches)  # plans must stay serialization-friendly
