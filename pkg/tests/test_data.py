import json
from collections import Counter

import numpy as np
import pytest

from refineseg.data import (
    Dataset,
    SplitSpec,
    load_manifest,
    split,
    synth_generate,
    write_manifest,
)
from refineseg.pngio import write_mask


def same_sample(a, b):
    return (
        a.id == b.id
        and np.array_equal(a.satellite, b.satellite)
        and np.array_equal(a.map, b.map)
        and np.array_equal(a.gt_mask, b.gt_mask)
        and a.gt_boxes == b.gt_boxes
        and (a.instruction, a.tier, a.class_label) == (b.instruction, b.tier, b.class_label)
        and a.scene == b.scene
    )


def test_round_trip(tmp_path):
    ds = synth_generate(5, 3)
    write_manifest(ds, tmp_path)
    back = load_manifest(tmp_path)
    assert len(back) == 3 and back.skipped == []
    assert all(same_sample(a, b) for a, b in zip(ds, back))
    meta = json.loads((tmp_path / ds[0].id / "meta.json").read_text())
    assert {"instruction", "tier", "class_label", "gt_boxes"} <= set(meta)


def test_empty_mask_skipped(tmp_path):
    ds = synth_generate(5, 3)
    write_manifest(ds, tmp_path)
    write_mask(tmp_path / ds[1].id / "mask.png", np.zeros_like(ds[1].gt_mask))
    back = load_manifest(tmp_path)
    assert len(back) == 2 and back.skipped == [ds[1].id]


def test_unreadable_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "missing")


def _same_class(n):
    ds = synth_generate(1, n)
    for s in ds:
        s.tier, s.class_label = "class", "park"
    return ds


def test_split_sizes():
    tr, va, te = split(_same_class(10), SplitSpec(), seed=0)
    assert (len(tr), len(va), len(te)) == (6, 1, 3)
    tr, va, te = split(_same_class(1), SplitSpec(), seed=0)
    assert (len(tr), len(va), len(te)) == (1, 0, 0)


def test_split_partition_and_determinism():
    ds = synth_generate(2, 137)
    parts = split(ds, seed=4)
    ids = [s.id for p in parts for s in p]
    assert sorted(ids) == sorted(s.id for s in ds)
    assert len(set(ids)) == len(ids)
    again = split(ds, seed=4)
    assert [[s.id for s in p] for p in parts] == [[s.id for s in p] for p in again]

    strata = Counter((s.tier, s.class_label) for s in ds)
    fr = SplitSpec().fractions
    for key, n in strata.items():
        for p, f in zip(parts, fr):
            got = sum((s.tier, s.class_label) == key for s in p)
            assert abs(got - n * f) <= 1


def test_split_rejects_empty():
    with pytest.raises(ValueError):
        split(Dataset([]))


def test_generator_reproducible():
    a, b = synth_generate(9, 1), synth_generate(9, 1)
    assert same_sample(a[0], b[0])
    assert a[0].satellite.tobytes() == b[0].satellite.tobytes()


def test_generator_postconditions():
    ds = synth_generate(123, 1000)
    for s in ds:
        s.validate()
        blobs = s.scene.blobs
        assert 1 <= len(blobs) <= 3
        for i, b in enumerate(blobs):
            for other in blobs[i + 1 :]:
                inter = b.full.intersection(other.full)
                assert inter is None or inter.area == 0
        assert s.gt_boxes == [s.scene.target.full]
        assert str(s.scene.target.class_id) in s.instruction
        assert s.satellite.shape == (64, 64, 3) and s.map.shape == (64, 64, 3)
