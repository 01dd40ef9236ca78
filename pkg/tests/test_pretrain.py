import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from sonoclip.curation import ShardEntry, TemplateBank, build_shards, caption_pool
from sonoclip.model import DualEncoder, ModelConfig
from sonoclip.phantom import gen_dataset, render_images
from sonoclip.pretrain import (
    Checkpoint,
    ConfigurationError,
    ContrastivePretrainer,
    TrainConfig,
    clip_loss,
    lr_at,
    pick_best,
    select_checkpoint,
    shard_batches,
    train,
)
from sonoclip.tokenizer import encode_batch, train_bpe
from sonoclip.zeroshot import PromptBank, class_embeddings, text_encoder_for


def unit(rows):
    return F.normalize(torch.as_tensor(rows, dtype=torch.float64), dim=-1)


def test_single_pair_loss_zero():
    e = unit([[0.3, 0.4]])
    assert clip_loss(e, e, 1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_two_by_two_hand_value():
    e = unit([[1.0, 0.0], [0.0, 1.0]])
    assert clip_loss(e, e, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)


@pytest.mark.parametrize("n", [2, 5, 17])
def test_identical_embeddings_give_log_n(n):
    e = unit(np.ones((n, 4)))
    assert clip_loss(e, e, 0.5).item() == pytest.approx(math.log(n), abs=1e-9)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        clip_loss(torch.zeros(0, 3), torch.zeros(0, 3), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0.01, 2.0), st.integers(0, 10**6))
def test_loss_symmetric_and_nonnegative(n, d, tau, seed):
    g = torch.Generator().manual_seed(seed)
    a = F.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)
    b = F.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)
    assert clip_loss(a, b, tau).item() == clip_loss(b, a, tau).item()
    assert clip_loss(a, b, tau).item() >= 0


def test_lr_schedule_endpoints():
    cfg = TrainConfig.toy(base_lr=1e-3, warmup_steps=10)
    total = 50
    assert lr_at(0, cfg, total) == 0.0
    assert lr_at(10, cfg, total) == pytest.approx(1e-3)
    assert abs(lr_at(total - 1, cfg, total)) <= 1e-9 * 1e-3
    assert lr_at(5, cfg, total) == pytest.approx(5e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(60, 400))
def test_lr_decays_monotonically_after_warmup(w, total):
    cfg = TrainConfig.toy(base_lr=1.0, warmup_steps=w)
    lrs = [lr_at(s, cfg, total) for s in range(w, total)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))
    assert all(0.0 <= v <= 1.0 for v in lrs)


def test_train_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_steps=-1)


def test_batch_larger_than_shard_rejected():
    shards = [[ShardEntry(f"i{k}", "", "c") for k in range(4)]]
    with pytest.raises(ConfigurationError):
        shard_batches(shards, 8, np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_run():
    recs = gen_dataset(40, 5, seed=3)
    templates = TemplateBank.load()
    pools = {r.image_id: caption_pool(r, templates) for r in recs}
    corpus = sorted({c for p in pools.values() for c in p})
    vocab = train_bpe(corpus, 600)
    # textbook-style upsampling of a few records exercises batch dedup
    items = [(r, pools[r.image_id][:5]) for r in recs]
    from dataclasses import replace
    items[:3] = [(replace(r, subgroup="textbook"), c) for r, c in items[:3]]
    shards = build_shards(items, shard_size=20, seed=0)
    tokens = dict(zip(corpus, encode_batch(corpus, vocab)))
    images = dict(zip([r.image_id for r in recs], render_images(recs)))
    mc = ModelConfig.toy(vocab_size=vocab.vocab_size)
    cfg = TrainConfig.toy(epochs=2, warmup_steps=0, base_lr=5e-4, batch_size=16)

    def run(log_path=None):
        torch.manual_seed(0)
        model = DualEncoder(mc)
        cks = train(shards, model, cfg, images, tokens, log_path=log_path)
        return model, cks

    return run, shards, vocab, recs


def test_two_epochs_two_checkpoints_and_loss_falls(small_run, tmp_path):
    run, shards, _, _ = small_run
    model, cks = run(tmp_path / "log.jsonl")
    assert [c.epoch for c in cks] == [0, 1]
    assert cks[1].loss < cks[0].loss
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == sum(math.ceil(len(s) / 16) for s in shards) * 2


def test_training_reproducible(small_run):
    run, _, _, _ = small_run
    _, a = run()
    _, b = run()
    assert abs(a[-1].loss - b[-1].loss) <= 1e-6


def test_batches_never_repeat_images(small_run):
    _, shards, _, _ = small_run
    for batch in shard_batches(shards, 16, np.random.default_rng(1)):
        ids = [e.image_id for e in batch]
        assert len(ids) == len(set(ids))


def test_pick_best_tie_goes_earliest():
    assert pick_best([0.3, 0.8, 0.8]) == 1
    assert pick_best([0.5]) == 0
    with pytest.raises(ValueError):
        pick_best([])


def test_select_single_checkpoint_and_empty_eval(small_run):
    run, _, vocab, recs = small_run
    model, cks = run()
    bank = PromptBank.load()

    def cls_fn(m):
        return class_embeddings(bank, text_encoder_for(m, vocab))

    x = render_images(recs[:20])
    best, f1s = select_checkpoint(cks[-1:], model, x, [r.view for r in recs[:20]], cls_fn)
    assert best is cks[-1] and len(f1s) == 1
    with pytest.raises(ValueError):
        select_checkpoint(cks, model, x[:0], [], cls_fn)
    with pytest.raises(ValueError):
        select_checkpoint([], model, x, [r.view for r in recs[:20]], cls_fn)


def test_checkpoint_to_disk(small_run, tmp_path):
    run, shards, vocab, recs = small_run
    torch.manual_seed(0)
    model = DualEncoder(ModelConfig.toy(vocab_size=vocab.vocab_size))
    templates = TemplateBank.load()
    pools = {r.image_id: caption_pool(r, templates) for r in recs}
    corpus = sorted({c for p in pools.values() for c in p})
    cks = train(shards, model, TrainConfig.toy(epochs=1, batch_size=16), dict(zip([r.image_id for r in recs], render_images(recs))),
                dict(zip(corpus, encode_batch(corpus, vocab))), checkpoint_dir=tmp_path)
    assert cks[0].path.exists()
    other = DualEncoder(ModelConfig.toy(vocab_size=vocab.vocab_size))
    Checkpoint(0, 0.0, 0, path=cks[0].path).load_into(other)
    for k, v in model.state_dict().items():
        assert torch.equal(v, other.state_dict()[k])


def test_pretrainer_estimator():
    recs = gen_dataset(20, 2, seed=5)
    templates = TemplateBank.load()
    X = render_images(recs)
    y = [caption_pool(r, templates) for r in recs]
    est = ContrastivePretrainer(train_config=TrainConfig.toy(epochs=1, batch_size=16), vocab_size=400)
    emb = est.fit(X, y).transform(X[:3])
    assert emb.shape == (3, 128)
    assert len(est.loss_curve_) == 1
    assert "train_config" in est.get_params()
