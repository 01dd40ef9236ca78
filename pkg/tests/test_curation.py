import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonoclip.curation import (
    CaptionSet,
    ImageRecord,
    TemplateBank,
    build_caption_set,
    build_shards,
    caption_pool,
    confident_flags,
    confident_thresholds,
    oof_probabilities,
    pseudo_label,
    read_manifest,
    read_shards,
    route_subgroup,
    write_manifest,
    write_shards,
)
from sonoclip.phantom import gen_dataset, render_images
from sonoclip.tokenizer import MAX_TOKENS, train_bpe

BANK = TemplateBank.load()


def rec(i=0, labels=("brain",), ga=None, spacing=None, subgroup=None, patient=None):
    return ImageRecord(f"img{i}", patient or f"pt{i}", f"images/img{i}.png", frozenset(labels), ga, spacing, subgroup)


def brute_force_flags(probs, labels):
    """Confident joint by explicit enumeration over samples and classes."""
    n, c = probs.shape
    thresholds = []
    for j in range(c):
        members = [probs[i, j] for i in range(n) if labels[i] == j]
        thresholds.append(sum(members) / len(members) if members else float("inf"))
    flagged = []
    for i in range(n):
        best, best_p = None, -1.0
        for j in range(c):
            if probs[i, j] >= thresholds[j] and probs[i, j] > best_p:
                best, best_p = j, probs[i, j]
        if best is not None and best != labels[i]:
            flagged.append(i)
    return flagged


# --------------------------------------------------------------------------- captions

def test_brain_captions_embed_metadata():
    cs = build_caption_set(rec(ga=140, spacing=0.2), BANK)
    assert len(cs.captions) == 5 and len(set(cs.captions)) == 5
    for c in cs.captions:
        assert "20w 0d" in c and "0.2 mm/px" in c


def test_missing_ga_drops_clause():
    cs = build_caption_set(rec(labels=("femur",), spacing=0.5), BANK)
    for c in cs.captions:
        assert not any(f"{w}w" in c for w in range(14, 41))
        assert "0.5 mm/px" in c


def test_caption_set_deterministic():
    r = rec(ga=201, spacing=2.25)
    assert build_caption_set(r, BANK) == build_caption_set(r, BANK)


def test_unknown_label_set_lists_labels():
    with pytest.raises(KeyError, match="femur, placenta"):
        build_caption_set(rec(labels=("placenta", "femur")), BANK)


def test_caption_set_contract():
    with pytest.raises(ValueError):
        CaptionSet("x", ("a", "b", "c", "d"))
    with pytest.raises(ValueError):
        CaptionSet("x", ("a", "a", "b", "c", "d"))


@settings(max_examples=40, deadline=None)
@given(
    key=st.sampled_from(BANK.label_sets()),
    ga=st.one_of(st.none(), st.integers(98, 280)),
    spacing=st.one_of(st.none(), st.sampled_from([0.1, 0.2, 0.35, 2.25])),
)
def test_every_label_set_gives_five_distinct_captions(key, ga, spacing):
    caps = BANK.render(key, ga, spacing)
    assert len(caps) == 5 and len(set(caps)) == 5
    assert caps == BANK.render(key, ga, spacing)
    if ga is not None:
        assert all(f"{ga // 7}w {ga % 7}d" in c for c in caps)
    if spacing is not None:
        assert all(f"{spacing:g} mm/px" in c for c in caps)


def test_captions_fit_token_budget():
    corpus = [c for key in BANK.label_sets() for c in BANK.render(key, 280, 2.25)]
    vocab = train_bpe(corpus, 400)
    assert max(len(vocab.tokenize(c)) for c in corpus) + 2 <= MAX_TOKENS


def test_caption_pool_adds_bare_renderings():
    r = rec(ga=140, spacing=0.2)
    pool = caption_pool(r, BANK)
    assert pool[:5] == list(build_caption_set(r, BANK).captions)
    assert set(BANK.render({"brain"})) <= set(pool)
    assert caption_pool(r, BANK, metadata_free=False) == pool[:5]


# --------------------------------------------------------------------------- routing

@pytest.mark.parametrize("labels,expected", [
    (("brain",), "standard_view"),
    ((), "unlabeled"),
    (("brain", "spine"), "multi_keyword"),
    (("heart", "4ch"), "standard_view"),
])
def test_route_subgroup(labels, expected):
    assert route_subgroup(rec(labels=labels)) == expected


def test_textbook_keeps_its_subgroup():
    assert route_subgroup(rec(subgroup="textbook")) == "textbook"


def test_record_invariants():
    with pytest.raises(ValueError):
        ImageRecord("a", "", "p.png", {"brain"})
    with pytest.raises(ValueError):
        ImageRecord("a", "pt", "p.png", frozenset(), subgroup="standard_view")
    with pytest.raises(ValueError):
        ImageRecord("a", "pt", "p.png", {"brain"}, split="val")


def test_manifest_roundtrip(tmp_path):
    recs = gen_dataset(3, 2, seed=0)
    write_manifest(recs, tmp_path / "m.jsonl")
    assert [r.to_json() for r in read_manifest(tmp_path / "m.jsonl")] == [r.to_json() for r in recs]


# --------------------------------------------------------------------------- confident learning

def test_calibrated_onehot_flags_nothing():
    labels = np.array([0, 1, 2, 1, 0])
    assert confident_flags(np.eye(3)[labels], labels).size == 0


def test_three_sample_case_matches_enumeration():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.1, 0.9]])
    labels = np.array([0, 0, 1])
    np.testing.assert_allclose(confident_thresholds(probs, labels), [0.55, 0.9])
    # sample 1 reaches neither threshold, so nothing is flagged
    assert confident_flags(probs, labels).tolist() == brute_force_flags(probs, labels) == []


def test_zero_support_class_never_assigned():
    probs = np.array([[0.3, 0.7], [0.4, 0.6]])
    labels = np.array([0, 0])
    t = confident_thresholds(probs, labels)
    assert t[1] == np.inf
    assert confident_flags(probs, labels).size == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4).flatmap(lambda c: st.tuples(
    st.just(c),
    st.lists(st.lists(st.floats(0.01, 1.0), min_size=c, max_size=c), min_size=3, max_size=25),
    st.data(),
)))
def test_flags_match_brute_force(args):
    c, rows, data = args
    probs = np.array(rows)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = np.array(data.draw(st.lists(st.integers(0, c - 1), min_size=len(rows), max_size=len(rows))))
    assert confident_flags(probs, labels).tolist() == brute_force_flags(probs, labels)


def _phantom_features(seed):
    recs = gen_dataset(100, 5, seed=seed)
    X = render_images(recs).reshape(len(recs), -1)
    classes = sorted({r.view for r in recs})
    y = np.array([classes.index(r.view) for r in recs])
    return X, y, np.array([r.patient_id for r in recs]), len(classes)


def test_clean_separable_data_rarely_flagged():
    X, y, groups, _ = _phantom_features(21)
    flags = confident_flags(oof_probabilities(X, y, groups), y)
    assert flags.size <= 0.02 * len(y)


def test_injected_corruptions_recovered():
    X, y, groups, c = _phantom_features(22)
    rng = np.random.default_rng(0)
    corrupt = rng.choice(len(y), size=len(y) // 10, replace=False)
    noisy = y.copy()
    noisy[corrupt] = (y[corrupt] + rng.integers(1, c, size=corrupt.size)) % c
    flags = set(confident_flags(oof_probabilities(X, noisy, groups), noisy).tolist())
    assert len(flags & set(corrupt.tolist())) / corrupt.size >= 0.8


# --------------------------------------------------------------------------- pseudo-labels

@pytest.mark.parametrize("probs,expected", [([0.95, 0.05], 0), ([0.6, 0.4], None), ([0.9, 0.1], None), ([0.05, 0.95], 1)])
def test_pseudo_label(probs, expected):
    assert pseudo_label(probs) == expected


def test_pseudo_label_requires_distribution():
    with pytest.raises(ValueError):
        pseudo_label([0.5, 0.6])


# --------------------------------------------------------------------------- shards

def items(n, subgroup=None, start=0):
    return [(rec(start + i, subgroup=subgroup), [f"caption {start + i} v{k}" for k in range(5)]) for i in range(n)]


def test_hundred_records_ten_shards():
    shards = build_shards(items(100), shard_size=10)
    assert len(shards) == 10
    for s in shards:
        assert len({e.image_id for e in s}) == len(s) == 10


def test_textbook_record_once_per_shard():
    shards = build_shards(items(1, "textbook") + items(90, start=1), shard_size=10)
    assert len(shards) == 10
    assert all(sum(e.image_id == "img0" for e in s) == 1 for s in shards)


def test_too_few_shards_for_upsampling():
    with pytest.raises(ValueError, match="cannot satisfy dedup"):
        build_shards(items(1, "textbook") + items(40, start=1), shard_size=10)


def test_bad_upsample_factor():
    with pytest.raises(ValueError):
        build_shards(items(3), {"standard_view": 0})


@settings(max_examples=30, deadline=None)
@given(n_std=st.integers(1, 80), n_book=st.integers(0, 5), size=st.integers(2, 16), seed=st.integers(0, 100))
def test_shards_never_repeat_an_image(n_std, n_book, size, seed):
    data = items(n_std) + items(n_book, "textbook", start=1000)
    try:
        shards = build_shards(data, shard_size=size, seed=seed)
    except ValueError:
        return
    for s in shards:
        ids = [e.image_id for e in s]
        assert len(ids) == len(set(ids))
    total = sum(len(s) for s in shards)
    assert total == n_std + 10 * n_book


def test_shard_files_roundtrip(tmp_path):
    shards = build_shards(items(25), shard_size=10)
    paths = write_shards(shards, tmp_path)
    back = read_shards(paths)
    assert [[(e.image_id, e.caption) for e in s] for s in back] == [[(e.image_id, e.caption) for e in s] for s in shards]
