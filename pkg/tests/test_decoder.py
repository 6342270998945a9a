import math

import numpy as np
import pytest

from helpers import randomize, tiny_model
from navil import numkernel as nk
from navil.config import DecoderConfig, ModelConfig
from navil.decoder import (TEXT, VISUAL, attention_stats, activated_param_count, decoder_layer, decoder_logits,
                           expert_params, mmoe_attention, mmoe_ffn)
from navil.numkernel import GradTape, Tensor, finite_diff_grad
from navil.params import MODALITIES, init_params, tie_experts
import oracles


def _setup(seed=0, depth=2, width=16, heads=2, vocab=12):
    cfg = tiny_model(dec_depth=depth, dec_width=width, dec_heads=heads, vocab=vocab)
    store = randomize(init_params(cfg, seed), seed + 100)
    return cfg, store


def _rand_inputs(rng, S, vocab, width, n_visual=None):
    route = rng.integers(0, 2, size=(1, S)) if n_visual is None else np.r_[np.ones(n_visual), np.zeros(S - n_visual)][None].astype(int)
    ids = rng.integers(0, vocab, size=(1, S))
    nv = int((route == VISUAL).sum())
    vis = Tensor(rng.standard_normal((nv, width))) if nv else None
    return ids, route, vis


def _attn(store, x, route, layer=0, causal=True, heads=2):
    S = x.shape[1]
    ex = expert_params(store, f"decoder.layers.{layer}", "attn")
    return mmoe_attention(Tensor(x), route, ex, heads, lambda t: nk.rope_1d(t, np.arange(S)), causal).data


def test_tied_attention_is_vanilla_for_any_mask():
    cfg, store = _setup()
    tie_experts(store)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 7, 16))
    w = {k: store[f"decoder.layers.0.attn.text.{k}"].data for k in ("wq", "wk", "wv", "wo")}
    ref = oracles.attention(x, w, 2, lambda t: oracles.rope_pairs(t, np.arange(7)), True)
    for _ in range(5):
        route = rng.integers(0, 2, size=(1, 7))
        assert np.array_equal(_attn(store, x, route), ref)


def test_tied_ffn_is_vanilla():
    cfg, store = _setup()
    tie_experts(store)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 16))
    P = {n: t.data for n, t in store.items()}
    f = "decoder.layers.1.ffn.text"
    ref = oracles.mm(oracles.silu(oracles.mm(x, P[f + ".w_gate"])) * oracles.mm(x, P[f + ".w_up"]), P[f + ".w_down"])
    out = mmoe_ffn(Tensor(x), rng.integers(0, 2, size=(1, 5)), expert_params(store, "decoder.layers.1", "ffn")).data
    assert np.array_equal(out, ref)


@pytest.mark.parametrize("kept,perturbed", [(TEXT, "visual"), (VISUAL, "text")])
def test_modality_isolation(kept, perturbed):
    cfg, store = _setup()
    rng = np.random.default_rng(3)
    S = 6
    route = np.full((1, S), kept)
    ids = rng.integers(0, 8, size=(1, S))
    vis = Tensor(rng.standard_normal((S, 16))) if kept == VISUAL else None
    base = decoder_logits(ids, route, np.arange(S)[None], vis, store, cfg.decoder).data
    for name in store:
        if f".{perturbed}." in name:
            store[name].data[...] += rng.standard_normal(store[name].shape)
    out = decoder_logits(ids, route, np.arange(S)[None], vis, store, cfg.decoder).data
    assert np.array_equal(base, out)


def test_seq1_closed_form():
    cfg, store = _setup()
    x = np.random.default_rng(4).standard_normal((1, 1, 16))
    for m, name in enumerate(MODALITIES):
        out = _attn(store, x, np.array([[m]]))
        wv, wo = (store[f"decoder.layers.0.attn.{name}.{k}"].data for k in ("wv", "wo"))
        assert np.allclose(out[0, 0], x[0, 0] @ wv @ wo, rtol=1e-13, atol=1e-14)


def test_ffn_zero_gate():
    cfg, store = _setup()
    for m in MODALITIES:
        store[f"decoder.layers.0.ffn.{m}.w_gate"].data[...] = 0.0
    x = np.random.default_rng(5).standard_normal((1, 4, 16))
    out = mmoe_ffn(Tensor(x), np.array([[0, 1, 0, 1]]), expert_params(store, "decoder.layers.0", "ffn")).data
    assert not out.any()


def test_ffn_width2_hand_computed():
    experts = [{"w_gate": Tensor([[1.0, 0.0], [0.0, 1.0]]), "w_up": Tensor([[2.0, 0.0], [0.0, 1.0]]),
                "w_down": Tensor([[1.0, 1.0], [0.0, 1.0]])},
               {"w_gate": Tensor([[0.0, 1.0], [1.0, 0.0]]), "w_up": Tensor([[1.0, 0.0], [0.0, 1.0]]),
                "w_down": Tensor([[1.0, 0.0], [0.0, 1.0]])}]
    x = np.array([[[1.0, -1.0]]])
    sig = lambda v: 1 / (1 + math.exp(-v))
    # text expert: gate (1, -1), up (2, -1) -> h = (silu(1)*2, silu(-1)*-1); down adds h0 to both outputs
    h0, h1 = 1 * sig(1) * 2, -1 * sig(-1) * -1
    out = mmoe_ffn(Tensor(x), np.array([[0]]), experts).data[0, 0]
    assert out == pytest.approx([h0, h0 + h1], abs=1e-15)
    # visual expert: gate swapped (-1, 1), up identity
    out = mmoe_ffn(Tensor(x), np.array([[1]]), experts).data[0, 0]
    assert out == pytest.approx([-1 * sig(-1) * 1, 1 * sig(1) * -1], abs=1e-15)


def test_zero_projections_identity_layer():
    cfg, store = _setup()
    for m in MODALITIES:
        store[f"decoder.layers.0.attn.{m}.wo"].data[...] = 0.0
        store[f"decoder.layers.0.ffn.{m}.w_down"].data[...] = 0.0
    x = np.random.default_rng(6).standard_normal((1, 5, 16))
    out = decoder_layer(Tensor(x), np.array([[0, 1, 1, 0, 0]]), np.arange(5)[None], store, 0, cfg.decoder).data
    assert np.array_equal(out, x)


def test_tied_layer_matches_vanilla_block():
    cfg, store = _setup(seed=7)
    tie_experts(store)
    P = {n: t.data for n, t in store.items()}
    x = np.random.default_rng(7).standard_normal((1, 6, 16))
    out = decoder_layer(Tensor(x), np.array([[1, 1, 0, 1, 0, 0]]), np.arange(6)[None], store, 1, cfg.decoder).data
    ref = oracles.block(x, P, "decoder.layers.1", 2, lambda t: oracles.rope_pairs(t, np.arange(6)), True,
                        cfg.decoder.norm_eps, expert="text")
    assert np.array_equal(out, ref)


def test_causality_probe():
    cfg, store = _setup(seed=8)
    rng = np.random.default_rng(8)
    S = 8
    ids = rng.integers(0, 8, size=(1, S))
    route = np.zeros((1, S), int)
    base = decoder_logits(ids, route, np.arange(S)[None], None, store, cfg.decoder).data
    for j in range(1, S):
        ids2 = ids.copy()
        ids2[0, j] = (ids[0, j] + 1) % 8
        out = decoder_logits(ids2, route, np.arange(S)[None], None, store, cfg.decoder).data
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.array_equal(out[0, j], base[0, j])


def test_depth_zero_logits():
    cfg = ModelConfig(tiny_model().encoder, DecoderConfig(depth=0, width=16, mlp_width=32, heads=2, vocab=12))
    store = randomize(init_params(cfg, 0), 9)
    ids = np.array([[1, 5, 3]])
    out = decoder_logits(ids, np.zeros((1, 3), int), np.arange(3)[None], None, store, cfg.decoder).data
    P = {n: t.data for n, t in store.items()}
    emb = P["decoder.embed"][ids]
    ref = oracles.mm(oracles.rmsnorm(emb, P["decoder.final_norm"], 1e-6), P["decoder.lm_head"])
    assert np.array_equal(out, ref)


def test_pure_text_matches_text_transformer():
    cfg, store = _setup(seed=10)
    P = {n: t.data for n, t in store.items()}
    ids = np.random.default_rng(10).integers(0, 12, size=9)
    out = decoder_logits(ids[None], np.zeros((1, 9), int), np.arange(9)[None], None, store, cfg.decoder).data[0]
    assert np.array_equal(out, oracles.vanilla_logits(ids, [], P, cfg.decoder))


def test_activated_params_independent_of_experts():
    cfg, store = _setup()
    n = activated_param_count(store, cfg.decoder)
    dense = sum(t.data.size for name, t in store.items() if name.startswith("decoder.") and ".visual." not in name)
    assert n == dense
    visual_only = sum(t.data.size for name, t in store.items() if ".visual." in name)
    assert n < store.count("decoder.") == n + visual_only


def test_embedding_width_mismatch():
    cfg, store = _setup()
    with pytest.raises(ValueError):
        decoder_logits(np.zeros((1, 3), int), np.array([[1, 0, 0]]), np.arange(3)[None],
                       Tensor(np.ones((1, 8))), store, cfg.decoder)


def test_route_shape_mismatch():
    cfg, store = _setup()
    with pytest.raises(ValueError, match="modality mask"):
        _attn(store, np.ones((1, 3, 16)), np.zeros((1, 4), int))


def test_attention_stats_rows_and_seq1():
    cfg, store = _setup()
    rng = np.random.default_rng(11)
    ids, route, vis = _rand_inputs(rng, 10, 8, 16, n_visual=4)
    record = []
    decoder_logits(ids, route, np.arange(10)[None], vis, store, cfg.decoder, record=record)
    stats = attention_stats(record, route)
    assert stats.shape == (2, 2, 2)
    assert np.allclose(stats.sum(axis=2), 1.0, atol=1e-9)
    record = []
    decoder_logits(np.array([[3]]), np.array([[0]]), np.array([[0]]), None, store, cfg.decoder, record=record)
    s1 = attention_stats(record, np.array([[0]]))
    assert s1[:, TEXT, TEXT].tolist() == [1.0, 1.0]


def test_attention_stats_near_uniform_at_init():
    # with tiny init weights the scores are ~0, so causal attention is ~uniform over the visible prefix
    cfg = tiny_model()
    store = init_params(cfg, 0)
    rng = np.random.default_rng(12)
    S, nv = 40, 20
    ids, route, vis = _rand_inputs(rng, S, 8, 16, n_visual=nv)
    vis = Tensor(0.02 * vis.data)
    record = []
    decoder_logits(ids, route, np.arange(S)[None], vis, store, cfg.decoder, record=record)
    stats = attention_stats(record, route)
    # expected mass for text queries (positions nv..S-1) on the visual prefix: mean of nv/(i+1)
    expect_tv = np.mean([nv / (i + 1) for i in range(nv, S)])
    assert np.allclose(stats[:, TEXT, VISUAL], expect_tv, rtol=0.1)
    assert np.allclose(stats[:, VISUAL, VISUAL], 1.0, rtol=0.1)


def test_decoder_gradients():
    cfg, store = _setup(seed=13, depth=1, width=8, vocab=8)
    rng = np.random.default_rng(13)
    ids, route, vis = _rand_inputs(rng, 6, 8, 8, n_visual=2)
    targets = rng.integers(0, 8, size=(1, 6))
    mask = np.array([[0, 0, 1, 1, 1, 1]], bool)
    names = [n for n in store if n.startswith("decoder.")]

    def loss():
        return nk.cross_entropy(decoder_logits(ids, route, np.arange(6)[None], vis, store, cfg.decoder), targets, mask)

    with GradTape() as tape:
        value = loss()
    g = tape.gradient(value, {n: store[n] for n in names})
    fd = finite_diff_grad(lambda: loss().item(), store, names=names)
    for n in names:
        err = np.abs(g[n] - fd[n]).max() / max(np.abs(fd[n]).max(), 1e-6)
        assert err < 1e-4, (n, err)
