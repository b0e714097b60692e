import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from spotkit import codec, prompting, training
from spotkit.errors import ContractError
from spotkit.model import (
    STAGE1, STAGE2, LossWeights, ModelConfig, RouterPlan, _patch_cells, batch_loss, build_model, loss,
)
from spotkit.vocab import TokenCategory, build_vocabulary

SMALL = ModelConfig(d_model=16, n_layers=2, n_heads=2, mlp_factor=2, max_len_stage1=24, max_len_stage2=16,
                    grid=8, channels=3, patch=2, n_enc_layers=1)


@pytest.fixture(scope="module")
def small_vocab():
    return build_vocabulary("AB", ("<line>", "<paragraph>", "<total>", "</total>"), n_bins=8)


def _logits_with_logprob(V, target, c):
    """A logit row whose log-softmax at ``target`` is exactly ``-c`` up to float64 rounding."""
    row = torch.zeros(V, dtype=torch.float64)
    row[target] = math.log((V - 1) * math.exp(-c) / (1 - math.exp(-c)))
    return row


@pytest.mark.parametrize("c", [0.1, 1.0, 2.5])
def test_single_structural_token_contributes_four_c(small_vocab, c):
    v = small_vocab
    tag = v.tag_id("<total>")
    prompt = [0, 0, 7, 7, v.char_id("A"), v.char_id("B")]
    targets = torch.tensor(prompt + [tag])
    rng = torch.Generator().manual_seed(0)
    logits = torch.randn(len(targets), v.size, generator=rng, dtype=torch.float64)
    logits[-1] = _logits_with_logprob(v.size, tag, c)
    plan = RouterPlan.stage1(targets.tolist(), v)
    got = loss(logits, targets, LossWeights(), plan, k=6)
    assert got.item() == pytest.approx(4 * c, rel=1e-12)
    # prompt positions carry no weight: arbitrary logits there leave the loss unchanged
    logits[:6] = torch.randn(6, v.size, generator=rng, dtype=torch.float64) * 50
    assert loss(logits, targets, LossWeights(), plan, k=6).item() == pytest.approx(4 * c, rel=1e-12)


def test_non_tag_token_has_unit_weight(small_vocab):
    v = small_vocab
    targets = torch.tensor([3, v.char_id("A"), v.eos])
    logits = torch.stack([_logits_with_logprob(v.size, int(t), 0.7) for t in targets])
    plan = RouterPlan.stage2(3, 1)
    assert loss(logits, targets, LossWeights(), plan, k=0).item() == pytest.approx(3 * 0.7, rel=1e-12)
    assert loss(logits, targets, LossWeights(), plan, k=2).item() == pytest.approx(0.7, rel=1e-12)


def test_loss_rejects_misaligned_inputs(small_vocab):
    with pytest.raises(ContractError):
        loss(torch.zeros(3, small_vocab.size), torch.tensor([0, 1]), LossWeights(), RouterPlan.stage2(2, 0), 0)


def test_batched_loss_matches_per_sequence_loss(small_vocab):
    v = small_vocab
    t = v.tag_id
    seqs = [[v.bos, 0, 0, 7, 7, v.char_id("A"), v.char_id("B"), t("<total>"), 3, 4, t("</total>"), v.eos],
            [v.bos, 0, 0, 7, 7, v.char_id("A"), v.char_id("B"), 1, 2, v.eos]]
    plans = [RouterPlan.stage1(s[1:], v) for s in seqs]
    b = training.make_batch(seqs, plans, [6, 6], v)
    logits = torch.randn(*b.inputs.shape, v.size, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    total, _ = batch_loss(logits, b.targets, b.weights.double())
    ref = sum(loss(logits[i, :len(s) - 1], torch.tensor(s[1:]), LossWeights(), plans[i], 6)
              for i, s in enumerate(seqs))
    assert total.item() == pytest.approx(ref.item(), rel=1e-12)


def test_router_plans(small_vocab):
    v = small_vocab
    p = RouterPlan.stage1([0, v.tag_id("<line>"), v.char_id("A"), v.eos], v)
    assert set(p.categories) == {TokenCategory.STRUCTURED}
    assert p.tag_mask == (False, True, False, False)
    p2 = RouterPlan.stage2(7, 4)
    assert p2.categories == tuple([TokenCategory.DETECTION] * 6 + [TokenCategory.RECOGNITION])
    assert not any(p2.tag_mask)


def _overwrite_experts(model, keep, random=False):
    with torch.no_grad():
        for layer in model.layers:
            for c, expert in enumerate(layer.router.experts):
                if c not in keep:
                    for p in expert.parameters():
                        p.copy_(torch.randn_like(p) if random else torch.zeros_like(p))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(0, 2), min_size=1, max_size=12), st.booleans())
def test_routing_exclusivity(small_vocab, seed, cats, random):
    model = build_model(SMALL, small_vocab, seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    feats = torch.rand(2, 8, 8, 3, generator=g, dtype=torch.float64)
    ids = torch.randint(0, small_vocab.size, (2, len(cats)), generator=g)
    categories = torch.tensor([cats, cats[::-1]])
    mem = model.encode(feats)
    before = model.decode(mem, ids, categories, STAGE2)
    # parameters of experts no position selects are zeroed or scrambled
    _overwrite_experts(model, set(categories.flatten().tolist()), random)
    after = model.decode(mem, ids, categories, STAGE2)
    assert torch.equal(before, after)


def test_routing_actually_uses_the_selected_expert(small_vocab):
    model = build_model(SMALL, small_vocab, 0, dtype=torch.float64)
    feats = torch.rand(1, 8, 8, 3, dtype=torch.float64)
    ids = torch.tensor([[small_vocab.bos, 1, 2]])
    cats = torch.full_like(ids, int(TokenCategory.RECOGNITION))
    mem = model.encode(feats)
    before = model.decode(mem, ids, cats, STAGE2)
    _overwrite_experts(model, {0, 1})
    assert not torch.equal(before, model.decode(mem, ids, cats, STAGE2))


def test_causal_prefix_consistency(small_vocab):
    model = build_model(SMALL, small_vocab, 3, dtype=torch.float64)
    feats = torch.rand(1, 8, 8, 3, dtype=torch.float64)
    ids = torch.tensor([[small_vocab.bos, 1, 2, 3, 4]])
    cats = torch.zeros_like(ids)
    mem = model.encode(feats)
    full = model.decode(mem, ids, cats, STAGE1)
    part = model.decode(mem, ids[:, :3], cats[:, :3], STAGE1)
    assert torch.allclose(full[:, :3], part, atol=1e-12)


def test_decode_guards(small_vocab):
    model = build_model(SMALL, small_vocab, 0)
    mem = model.encode(torch.zeros(1, 8, 8, 3))
    with pytest.raises(ContractError):
        model.decode(mem, torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 2, dtype=torch.long), STAGE1)
    with pytest.raises(ContractError):
        model.decode(mem, torch.zeros(1, 30, dtype=torch.long), torch.zeros(1, 30, dtype=torch.long), STAGE1)
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, n_heads=4)


def test_init_is_deterministic(small_vocab):
    a = build_model(SMALL, small_vocab, 5)
    b = build_model(SMALL, small_vocab, 5)
    c = build_model(SMALL, small_vocab, 6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


@pytest.mark.parametrize("grid,patch,radius", [(8, 1, 1), (8, 2, 1), (8, 2, 0), (6, 3, 2)])
def test_patch_cells_match_stacked_neighbourhoods(grid, patch, radius):
    f = torch.randn(2, grid, grid, 5)
    padded = F.pad(f, (0, 0, radius, radius, radius, radius))
    k = 2 * radius + 1
    ref = torch.cat([padded[:, i:i + grid, j:j + grid] for i in range(k) for j in range(k)], -1)
    n = grid // patch
    ref = ref.reshape(2, n, patch, n, patch, -1).permute(0, 1, 3, 2, 4, 5).reshape(2, n * n, -1)
    got = padded.reshape(2, -1, 5)[:, _patch_cells(grid, patch, radius)].reshape(2, n * n, -1)
    assert torch.equal(ref, got)


def test_sparse_memory_is_invariant_to_batch_padding(small_vocab):
    model = build_model(SMALL, small_vocab, 0).double()
    rng = np.random.default_rng(0)
    grids = np.zeros((2, 8, 8, 3))
    grids[..., 0] = 1
    for b, n in enumerate((2, 9)):
        for r, c in zip(rng.integers(0, 8, n), rng.integers(0, 8, n)):
            grids[b, r, c] = (0, 1, 0)
    ids = torch.tensor([[small_vocab.bos, 1, 2, 3]])
    cats = torch.zeros_like(ids)
    both = model.encode(torch.from_numpy(grids))
    alone = model.encode(torch.from_numpy(grids[:1]))
    assert alone.shape[1] < both.shape[1]
    a = model.decode(alone, ids, cats, STAGE1)
    b = model.decode(both[:1], ids, cats, STAGE1)
    assert torch.allclose(a, b, atol=1e-12)
