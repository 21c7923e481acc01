import numpy as np
import pytest
import torch

from helpers import constant_model
from steerdistill.backbone import (
    Backbone,
    BackboneConfig,
    ContextOverflow,
    DecodeConfig,
    PretrainConfig,
    collate,
    generate,
    generate_batch,
    init_backbone,
    lr_at,
    pretrain,
)
from steerdistill.steering import AdapterSet
from steerdistill.synthtask import EOS, query_prompt

CFG = BackboneConfig(40, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_context=64, seed=1)


def test_init_is_deterministic_and_seeded():
    a, b = init_backbone(CFG), init_backbone(CFG)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_backbone(BackboneConfig(**{**CFG.__dict__, "seed": 2}))
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_divisibility_rejected():
    with pytest.raises(ValueError):
        BackboneConfig(40, d_model=63, n_heads=4)


def test_causality(rng):
    m = init_backbone(CFG).freeze()
    x = rng.integers(0, 40, size=20)
    y = x.copy()
    y[11] = (y[11] + 1) % 40
    a, b = m(x), m(y)
    assert torch.equal(a[:11], b[:11])
    assert not torch.equal(a[11], b[11])


def test_zero_adapters_are_identity(rng):
    m = init_backbone(CFG).freeze()
    ad = AdapterSet(2, 16, rank=4, seed=3)
    x = torch.tensor(rng.integers(0, 40, size=(3, 25)))
    assert (m(x, adapters=ad) - m(x)).abs().max().item() <= 1e-12


def test_kv_cache_matches_full_forward(rng):
    m = init_backbone(CFG).freeze()
    x = torch.tensor(rng.integers(0, 40, size=(2, 18)))
    full = m(x)
    cache = []
    parts = [m(x[:, :10], cache=cache)] + [m(x[:, t : t + 1], cache=cache) for t in range(10, 18)]
    assert torch.allclose(torch.cat(parts, dim=1), full, atol=1e-12)


def test_taps_expose_branch_outputs(rng):
    m = init_backbone(CFG).freeze()
    _, taps = m(rng.integers(0, 40, size=7), taps=True)
    assert set(taps) == {(l, b) for l in range(2) for b in ("attn", "mlp")}
    assert taps[(0, "mlp")].shape == (7, 16)


def test_context_overflow():
    m = init_backbone(CFG)
    with pytest.raises(ContextOverflow):
        m(list(range(40)) + list(range(25)))


def test_position_offset_shifts_embeddings(rng):
    m = init_backbone(CFG).freeze()
    x = rng.integers(0, 40, size=9)
    shifted = m(x, offset=20)
    m.pos_emb.data = torch.roll(m.pos_emb.data, -20, dims=0)
    assert torch.equal(shifted, m(x))
    with pytest.raises(ContextOverflow):
        m(x, offset=CFG.max_context - 8)


def test_checkpoint_roundtrip(tmp_path):
    m = init_backbone(CFG)
    m.save(tmp_path / "b.ckpt", {"steps": 0})
    n = Backbone.load(tmp_path / "b.ckpt", expect=CFG)
    for p, q in zip(m.parameters(), n.parameters()):
        assert torch.equal(p, q)
    assert not any(p.requires_grad for p in n.parameters())
    with pytest.raises(ValueError):
        Backbone.load(tmp_path / "b.ckpt", expect=BackboneConfig(41, 16, 2, 2, 32, 64, 1))


def test_generate_eos_dominant_and_budget():
    m = constant_model(40, EOS)
    r = generate(m, [1, 4, 5], DecodeConfig(max_new_tokens=10))
    assert r.tokens == [EOS] and r.stop_reason == "eos"
    assert r.eos_probs[0] > 0.99
    r = generate(m, [1, 4, 5], DecodeConfig(max_new_tokens=0))
    assert r.tokens == [] and r.stop_reason == "budget"
    r = generate(constant_model(40, 7), [1, 4, 5], DecodeConfig(max_new_tokens=6))
    assert r.tokens == [7] * 6 and r.stop_reason == "budget"


def test_generate_batch_matches_single(rng, task, splits, tiny_backbone):
    cases = splits["test"][:4]
    ad = AdapterSet(2, 16, rank=2, seed=1, decay=0.8)
    with torch.no_grad():
        for p in ad.parameters():
            p.copy_(torch.randn(p.shape, dtype=torch.float64))
    dc = DecodeConfig(max_new_tokens=12)
    batch = generate_batch(tiny_backbone, [query_prompt(c) for c in cases], dc, ad)
    for c, b in zip(cases, batch):
        s = generate(tiny_backbone, query_prompt(c), dc, ad)
        assert s.tokens == b.tokens
        assert np.allclose(s.eos_probs, b.eos_probs, atol=1e-12)


def test_decay_applies_only_to_generated_positions(rng, tiny_backbone):
    """Decoding step j runs the previous token at scale rate**j; the prompt at 1."""
    ad = AdapterSet(2, 16, rank=2, seed=1, decay=0.5)
    with torch.no_grad():
        for p in ad.parameters():
            p.copy_(torch.randn(p.shape, dtype=torch.float64))
    prompt = [1, 4, 9, 12, 5]
    g = generate(tiny_backbone, prompt, DecodeConfig(max_new_tokens=4, eos_id=tiny_backbone.config.vocab_size - 1), ad)
    seq = prompt + g.tokens[:-1]
    scales = torch.tensor([1.0] * len(prompt) + [0.5 ** (j + 1) for j in range(len(g.tokens) - 1)], dtype=torch.float64)
    probs = torch.softmax(tiny_backbone(seq, adapters=ad, scales=scales), -1)
    for j, tok in enumerate(g.tokens):
        assert int(probs[len(prompt) - 1 + j].argmax()) == tok


def test_lr_schedule():
    c = PretrainConfig(steps=100, lr=1.0, warmup_frac=0.1, min_lr_frac=0.1)
    assert lr_at(0, c) == pytest.approx(0.1)
    assert lr_at(9, c) == pytest.approx(1.0)
    assert lr_at(99, c) == pytest.approx(0.1, abs=1e-3)
    assert all(lr_at(s, c) >= lr_at(s + 1, c) for s in range(10, 99))


def test_collate_masks():
    inp, tgt, msk = collate([([1, 2, 3], [0, 1, 1]), ([1, 5], [0, 1])])
    assert inp.tolist() == [[1, 2], [1, 0]]
    assert tgt.tolist() == [[2, 3], [5, 0]]
    assert msk.tolist() == [[True, True], [True, False]]


def test_pretrain_is_deterministic_and_learns(task):
    cfg = BackboneConfig(len(task.vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_context=512)
    pc = PretrainConfig(steps=30, batch_size=4, lr=3e-3, seed=4)

    def run():
        m = Backbone(cfg, "float64")
        losses = pretrain(m, lambda r, n, done: task.pretrain_batch(r, n, 512, done), pc)
        return m, losses

    (a, la), (b, lb) = run(), run()
    assert la == lb
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert np.mean(la[-5:]) < np.mean(la[:5])
    assert not any(p.requires_grad for p in a.parameters())
