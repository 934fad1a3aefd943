import numpy as np
import pytest

from tggat import numerics as nx
from tggat.env import render_observation
from tggat.model import TGGAT, CapacityError, MemoryBuffer, build_bias
from tggat.trainer import episode_loss

from _reference import vanilla_gat


def make_case(model, rng, n_steps, n_text=6):
    d = model.cfg.d_model
    text = nx.constant(rng.normal(size=(n_text, d)))
    text_mask = np.ones(n_text, bool)
    text_mask[-2:] = rng.random(2) > 0.5
    buf = MemoryBuffer(model.cfg.max_steps)
    for _ in range(n_steps):
        buf.append(nx.constant(rng.normal(size=(1, d))), nx.constant(rng.normal(size=(1, d))),
                   rng.uniform(-300, 300, size=2))
    return text, text_mask, buf


@pytest.fixture
def model(tiny_cfg, vocab):
    return TGGAT(tiny_cfg, len(vocab), 13, seed=5)


def test_zero_bias_matches_plain_attention(model, rng):
    for layer in model.gat.layers:
        assert not layer.w_e.values.any() and not layer.b_e.values.any()
    for n in (1, 2, 4, 6):
        text, mask, buf = make_case(model, rng, n)
        act, img = model.gat(text, mask, buf)
        ref_act, ref_img = vanilla_gat(model.gat, text.values, mask, buf)
        assert np.max(np.abs(act.values[0] - ref_act)) < 1e-9
        assert np.max(np.abs(img.values[0] - ref_img)) < 1e-9


def test_nonzero_bias_changes_output(model, rng):
    text, mask, buf = make_case(model, rng, 4)
    before = model.gat(text, mask, buf)[0].values.copy()
    model.gat.layers[0].w_e.values[:] = 0.01
    assert not np.allclose(model.gat(text, mask, buf)[0].values, before)
    off = model.gat(text, mask, buf, use_bias=False)[0].values
    assert np.allclose(off, before, atol=1e-12)


def test_bias_shape_and_values():
    E = np.array([[0.0, 5.0], [5.0, 0.0]])
    g = build_bias(E, nx.leaf(np.array([1.0, -2.0])), nx.leaf(np.array([0.5, 0.0])))
    assert g.shape == (2, 2, 2)
    assert np.array_equal(g.values[0], E + 0.5) and np.array_equal(g.values[1], -2 * E)


def test_translation_invariance_is_bit_exact(model, rng):
    for layer in model.gat.layers:
        layer.w_e.values[:] = rng.normal(0, 0.02, size=layer.w_e.shape)
        layer.b_e.values[:] = rng.normal(0, 0.5, size=layer.b_e.shape)
    text, mask, buf = make_case(model, rng, 5)
    a = model.gat(text, mask, buf, steps=np.arange(5))
    b = model.gat(text, mask, buf.shifted(1234.5, -77.25), steps=np.arange(5))
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1].values, b[1].values)


def test_batched_steps_match_truncated_buffers(model, rng):
    model.gat.layers[1].w_e.values[:] = 0.03
    text, mask, buf = make_case(model, rng, 4)
    act, img = model.gat(text, mask, buf, steps=np.arange(4))
    for t in range(4):
        part = MemoryBuffer(buf.capacity, buf.images[:t + 1], buf.directions[:t + 1], buf.locations[:t + 1])
        a1, i1 = model.gat(text, mask, part)
        assert np.allclose(act.values[t], a1.values[0], atol=1e-12)
        assert np.allclose(img.values[t], i1.values[0], atol=1e-12)


def test_padded_text_tokens_are_ignored(model, rng):
    text, mask, buf = make_case(model, rng, 3)
    mask[-1] = False
    out = model.gat(text, mask, buf)[0].values
    text.values[-1] += 100.0
    assert np.allclose(model.gat(text, mask, buf)[0].values, out, atol=1e-12)


def test_capacity_error(rng):
    buf = MemoryBuffer(2)
    for _ in range(2):
        buf.append(nx.constant(np.zeros((1, 4))), nx.constant(np.zeros((1, 4))), (0.0, 0.0))
    with pytest.raises(CapacityError):
        buf.append(nx.constant(np.zeros((1, 4))), nx.constant(np.zeros((1, 4))), (0.0, 0.0))


def test_head_ranges(model, rng, small_data, vocab, tiny_cfg):
    worlds, episodes = small_data
    ep = episodes[0]
    text, mask = model.encode_dialog(np.arange(1, 8))
    obs = np.stack([render_observation(worlds[ep.world_ref], s, tiny_cfg.env)[0] for s in ep.states])
    grid, f, dirs = model.observe(text, obs, np.array([s.theta for s in ep.states]))
    buf = MemoryBuffer(tiny_cfg.max_steps)
    for t, s in enumerate(ep.states):
        buf.append(f[t:t + 1], dirs[t:t + 1], (s.x, s.y))
    disp, stop, gr, attn = model.heads(model.forward(text, mask, buf, grid, steps=np.arange(len(ep.states))))
    T = len(ep.states)
    assert disp.shape == (T, 3) and stop.shape == (T, 1)
    assert np.all(np.abs(disp.values) <= tiny_cfg.max_step)
    assert np.all((stop.values > 0) & (stop.values < 1))
    assert gr.b_hat.shape == (T, 4) and attn.shape == (T, tiny_cfg.grid, tiny_cfg.grid)


def test_zero_weighted_heads_get_no_gradient(tiny_cfg, vocab, small_data):
    worlds, episodes = small_data
    cfg = tiny_cfg.replace(lambda2=0.0, lambda3=0.0)
    m = TGGAT(cfg, len(vocab), 13, seed=2)
    ep = episodes[1]
    episode_loss(m, vocab, cfg, ep, worlds[ep.world_ref], ep.states).total.backward()
    for name, p in m.grounding_head.named_parameters():
        assert not p.grad.any(), name
    for name, p in m.attention_head.named_parameters():
        assert not p.grad.any(), name
    assert any(p.grad.any() for p in m.action_head.parameters().values())
