import numpy as np
import pytest

from nse_reader import numerics as nx
from nse_reader.model import core
from nse_reader.model import layers as ly
from nse_reader.model.params import ModelParams
from nse_reader.model.prediction import batch_loss, candidate_probabilities, mixture_prediction
from nse_reader.util import RejectedInput, make_rng

GATING = core.HaltingMode.parse("gating", 3)
ADAPTIVE = core.HaltingMode.parse("adaptive", 3)


def const(a):
    return nx.constant(np.asarray(a, dtype=float))


def zeros(*shape):
    return const(np.zeros(shape))


def random_lstm(rng, input_width, hidden, scale=0.5):
    return ly.LSTMParams(*(nx.parameter(rng.uniform(-scale, scale, shape))
                           for _, shape in ly.LSTMParams.shapes("x", input_width, hidden)))


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def np_lstm(x, h, c, p):
    hid = p.hidden_width
    z = x @ p.w_x.data + h @ p.w_h.data + p.b.data
    i, f, o = np_sigmoid(z[:hid]), np_sigmoid(z[hid:2 * hid]), np_sigmoid(z[2 * hid:3 * hid])
    g = np.tanh(z[3 * hid:])
    c = f * c + i * g
    return o * np.tanh(c), c


def small_model(seed=0, vocab=15, k=4, embed=3):
    return ModelParams.initialize(vocab, k, embed, seed)


def random_batch(seed, n=2, lq=3, ld=6, vocab=15):
    rng = make_rng(seed)
    doc = rng.integers(3, vocab, size=(n, ld))
    query = rng.integers(3, vocab, size=(n, lq))
    masks = np.zeros((n, 3, ld))
    for b in range(n):
        for c in range(3):
            masks[b, c, rng.choice(ld, size=2, replace=False)] = 1.0
    gold = rng.integers(0, 3, size=n)
    return doc, query, masks, gold


def test_halting_mode():
    assert str(core.HaltingMode.parse("adaptive", 12)) == "adaptive(T=12)"
    assert core.HaltingMode.parse("gating", 1).gating
    with pytest.raises(RejectedInput):
        core.HaltingMode.parse("gating", 0)
    with pytest.raises(RejectedInput):
        core.HaltingMode.parse("sometimes", 2)


def test_init_states():
    q, d = zeros(1, 4), zeros(1, 4)
    state = core.init_states(q, d)
    for t in (state.s_q, state.s_d, state.read_h, state.read_c, state.write_h, state.write_c):
        assert np.all(t.data == 0)
    q = const(make_rng(1).standard_normal((1, 4)))
    d = const(make_rng(2).standard_normal((1, 4)))
    state = core.init_states(q, d)
    assert state.s_q is q and state.s_d is d
    assert np.all(state.write_c.data == 0) and np.all(state.read_c.data == 0)
    crossed = core.init_states(q, d, cross=True)
    assert crossed.s_q is d and crossed.s_d is q
    with pytest.raises(RejectedInput):
        core.init_states(zeros(1, 4), zeros(1, 6))


def test_read_step_single_query_word():
    rng = make_rng(3)
    mem = core.MemoryPair(const(rng.standard_normal((1, 4, 1))), const(rng.standard_normal((1, 4, 5))))
    state = core.init_states(const(rng.standard_normal((1, 4))), const(rng.standard_normal((1, 4))))
    rd = core.read_step(state, mem, core.PadMasks.full(mem), random_lstm(rng, 8, 4))
    assert np.allclose(rd.s_q.data, mem.query_memory.data[:, :, 0], atol=1e-15)


def test_read_step_zero_alignment():
    rng = make_rng(4)
    mem = core.MemoryPair(const(rng.standard_normal((1, 4, 3))), const(rng.standard_normal((1, 4, 5))))
    state = core.init_states(const(rng.standard_normal((1, 4))), const(rng.standard_normal((1, 4))))
    read = ly.LSTMParams(*(nx.parameter(np.zeros(s)) for _, s in ly.LSTMParams.shapes("r", 8, 4)))
    rd = core.read_step(state, mem, core.PadMasks.full(mem), read)
    assert np.all(rd.l_q.data == 0)
    assert np.all(rd.z_q.data == 0.5)


def test_read_step_rejects_width_mismatch():
    rng = make_rng(5)
    mem = core.MemoryPair(zeros(1, 4, 3), zeros(1, 6, 5))
    state = core.init_states(zeros(1, 4), zeros(1, 4))
    with pytest.raises(RejectedInput):
        core.read_step(state, mem, core.PadMasks.full(mem), random_lstm(rng, 8, 4))


def test_full_step_matches_hand_arithmetic():
    rng = make_rng(6)
    M_q = np.array([[0.3, -0.5], [0.8, 0.1]])
    M_d = np.array([[0.2, -0.7, 0.4], [0.9, 0.05, -0.3]])
    s_q0 = np.array([0.25, -0.4])
    s_d0 = np.array([-0.6, 0.35])
    read = random_lstm(rng, 4, 2)
    write = random_lstm(rng, 2, 2)
    compose = ly.MLPParams(nx.parameter(rng.uniform(-0.5, 0.5, (6, 2))), nx.parameter(rng.uniform(-0.5, 0.5, 2)))

    r, _ = np_lstm(np.concatenate([s_q0, s_d0]), np.zeros(2), np.zeros(2), read)
    l_q = r @ M_q
    s_q = M_q @ np_softmax(l_q)
    z = np_sigmoid(l_q)
    l_d = s_q @ M_d
    s_d = M_d @ np_softmax(l_d)
    c = np.tanh(np.concatenate([s_q, s_d, r]) @ compose.w.data + compose.b.data)
    M_new = M_q * z + s_d[:, None] * (1 - z)
    w, _ = np_lstm(c, np.zeros(2), np.zeros(2), write)
    g = np_sigmoid(w @ M_q)
    M_gated = M_new * (1 - g) + M_q * g

    mem = core.MemoryPair(const(M_q[None]), const(M_d[None]))
    state = core.init_states(const(s_q0[None]), const(s_d0[None]))
    masks = core.PadMasks.full(mem)
    rd = core.read_step(state, mem, masks, read)
    c_t = core.compose_step(rd.s_q, rd.s_d, rd.r, compose)
    written = core.write_memory(mem.query_memory, rd.z_q, rd.s_d)
    gated, g_q, _, _ = core.gate_memory(written, mem.query_memory, c_t, state.write_h, state.write_c, write)

    assert np.max(np.abs(rd.l_q.data[0] - l_q)) < 1e-10
    assert np.max(np.abs(rd.z_q.data[0] - z)) < 1e-10
    assert np.max(np.abs(rd.l_d.data[0] - l_d)) < 1e-10
    assert np.max(np.abs(rd.s_d.data[0] - s_d)) < 1e-10
    assert np.max(np.abs(c_t.data[0] - c)) < 1e-10
    assert np.max(np.abs(written.data[0] - M_new)) < 1e-10
    assert np.max(np.abs(g_q.data[0] - g)) < 1e-10
    assert np.max(np.abs(gated.data[0] - M_gated)) < 1e-10


def test_compose_step():
    k = 3
    zero = ly.MLPParams(nx.parameter(np.zeros((3 * k, k))), nx.parameter(np.zeros(k)))
    v = [const(make_rng(i).standard_normal((1, k))) for i in range(3)]
    assert np.all(core.compose_step(*v, zero).data == 0)
    p = ly.MLPParams(nx.parameter(make_rng(9).uniform(-1, 1, (3 * k, k))), nx.parameter(np.zeros(k)))
    a, b = core.compose_step(*v, p), core.compose_step(*v, p)
    assert a.shape == (1, k)
    assert a.data.tobytes() == b.data.tobytes()


def test_write_memory():
    M = const([[[1., 2.], [3., 4.]]])
    out = core.write_memory(M, const([[1., 0.]]), const([[5., 6.]]))
    assert out.data[0].tolist() == [[1., 5.], [3., 6.]]

    rng = make_rng(7)
    M = const(rng.standard_normal((2, 4, 5)))
    s_d = const(rng.standard_normal((2, 4)))
    same = core.write_memory(M, const(np.ones((2, 5))), s_d)
    assert same.data.tobytes() == M.data.tobytes()
    over = core.write_memory(M, const(np.zeros((2, 5))), s_d)
    assert np.array_equal(over.data, np.repeat(s_d.data[:, :, None], 5, axis=2))

    z = const(rng.uniform(0, 1, (2, 5)))
    blend = core.write_memory(M, z, s_d).data
    lo = np.minimum(M.data, s_d.data[:, :, None])
    hi = np.maximum(M.data, s_d.data[:, :, None])
    assert np.all(blend >= lo - 1e-15) and np.all(blend <= hi + 1e-15)

    with pytest.raises(RejectedInput):
        core.write_memory(M, const(np.full((2, 5), 1.5)), s_d)


def test_write_memory_keeps_padded_columns():
    rng = make_rng(8)
    M = const(rng.standard_normal((1, 3, 4)))
    out = core.write_memory(M, const(np.zeros((1, 4))), const(rng.standard_normal((1, 3))),
                            query_mask=np.array([[1., 1., 0., 0.]]))
    assert np.array_equal(out.data[0, :, 2:], M.data[0, :, 2:])


def test_gate_memory_identity_when_nothing_changes():
    rng = make_rng(10)
    write = random_lstm(rng, 4, 4, scale=2.0)
    M = const(rng.standard_normal((2, 4, 3)))
    c = const(rng.standard_normal((2, 4)))
    gated, g, _, _ = core.gate_memory(M, M, c, zeros(2, 4), zeros(2, 4), write)
    assert gated.data.tobytes() == M.data.tobytes()
    assert np.all((g.data > 0) & (g.data < 1))


@pytest.mark.parametrize("sign,keeps_old", [(1.0, True), (-1.0, False)])
def test_gate_memory_limits(sign, keeps_old):
    rng = make_rng(11)
    write = random_lstm(rng, 4, 4)
    c = const(rng.standard_normal((1, 4)))
    w, _ = ly.lstm_step(c, zeros(1, 4), zeros(1, 4), write)
    M_prev = const(np.repeat(sign * 1e5 * np.sign(w.data)[:, :, None], 3, axis=2))
    M_new = const(rng.standard_normal((1, 4, 3)))
    gated, _, _, _ = core.gate_memory(M_new, M_prev, c, zeros(1, 4), zeros(1, 4), write)
    expected = M_prev.data if keeps_old else M_new.data
    assert np.max(np.abs(gated.data - expected)) < 1e-9


def test_termination_score():
    rng = make_rng(12)
    write = random_lstm(rng, 4, 4)
    c = const(rng.standard_normal((3, 4)))
    e, _, _ = core.termination_score(c, zeros(4), zeros(3, 4), zeros(3, 4), write)
    assert np.all(e.data == 0.5)
    o = nx.parameter(rng.standard_normal(4))
    e, _, _ = core.termination_score(c, o, zeros(3, 4), zeros(3, 4), write)
    assert np.all((e.data > 0) & (e.data < 1))

    def f(v):
        score, _, _ = core.termination_score(c, v, zeros(3, 4), zeros(3, 4), write)
        return nx.reduce_sum(score)
    assert nx.grad_check(f, o).ok(1e-4)


def test_halting_distribution_examples():
    p = core.halting_distribution([0.5, 0.5], 3)
    assert [float(v.data) for v in p] == [0.5, 0.25, 0.25]
    assert [float(v.data) for v in core.halting_distribution([], 1)] == [1.0]
    near = [float(v.data) for v in core.halting_distribution([1 - 1e-9] * 3, 4)]
    assert near[0] == pytest.approx(1.0) and sum(near[1:]) < 1e-8
    with pytest.raises(RejectedInput):
        core.halting_distribution([], 0)
    with pytest.raises(RejectedInput):
        core.halting_distribution([0.5], 4)


def test_halting_distribution_is_normalized():
    rng = make_rng(13)
    for _ in range(1000):
        steps = int(rng.integers(1, 17))
        e = rng.uniform(0, 1, steps - 1)
        p = np.array([float(v.data) for v in core.halting_distribution(list(e), steps)])
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0) and np.all(p <= 1)


def test_single_step_models_agree():
    params = small_model(seed=14)
    doc, query, masks, _ = random_batch(15, n=100)
    gating = core.forward_pass(params, doc, query, core.HaltingMode.parse("gating", 1))
    adaptive = core.forward_pass(params, doc, query, core.HaltingMode.parse("adaptive", 1))
    assert np.array_equal(gating.l_d[0].data, adaptive.l_d[0].data)
    pg, _ = candidate_probabilities(gating, masks)
    pa, _ = candidate_probabilities(adaptive, masks)
    assert np.max(np.abs(pg.data - pa.data)) <= 1e-12


def test_adaptive_halting_at_first_step_matches_single_step():
    params = small_model(seed=16)
    doc, query, masks, _ = random_batch(17, n=5)
    _, per_step = candidate_probabilities(core.forward_pass(params, doc, query, ADAPTIVE), masks)
    single, _ = candidate_probabilities(
        core.forward_pass(params, doc, query, core.HaltingMode.parse("adaptive", 1)), masks)
    eps = 1e-6
    p = core.halting_distribution([np.full(5, 1 - eps)] * 2, 3)
    mixed = mixture_prediction(per_step, p)
    assert np.max(np.abs(mixed.data - single.data)) < 1e-4


@pytest.mark.parametrize("mode", [GATING, ADAPTIVE])
def test_document_memory_is_never_written(mode):
    params = small_model(seed=18)
    doc, query, _, _ = random_batch(19)
    mem, q_last, d_last = core.encode(params, doc, query)
    before = mem.doc_memory.data.copy()
    masks = core.PadMasks.full(mem)
    result = core.hypothesis_loop(params, mem, core.init_states(q_last, d_last), masks, mode)
    assert result.memory.doc_memory is mem.doc_memory
    assert mem.doc_memory.data.tobytes() == before.tobytes()
    assert result.memory.query_memory.shape == mem.query_memory.shape


@pytest.mark.parametrize("mode", [GATING, ADAPTIVE])
def test_traces_cover_every_step(mode):
    params = small_model(seed=20)
    doc, query, _, _ = random_batch(21)
    result = core.forward_pass(params, doc, query, mode)
    assert len(result.traces) == 3
    for t, trace in enumerate(result.traces):
        assert np.all((trace.z_q.data > 0) & (trace.z_q.data < 1))
        if mode.gating:
            assert np.all((trace.g_q.data > 0) & (trace.g_q.data < 1))
        else:
            assert (trace.e is None) == (t == 2)
            assert np.all((trace.p.data >= 0) & (trace.p.data <= 1))
    if mode.gating:
        assert result.p is None
        assert np.all(result.expected_steps() == 3)
    else:
        total = sum(p.data for p in result.p)
        assert np.allclose(total, 1.0, atol=1e-12)
        assert np.all((result.expected_steps() >= 1) & (result.expected_steps() <= 3))


def test_forward_pass_is_deterministic():
    params = small_model(seed=22)
    doc, query, _, _ = random_batch(23)
    a = core.forward_pass(params, doc, query, ADAPTIVE)
    b = core.forward_pass(params, doc, query, ADAPTIVE)
    for x, y in zip(a.attention, b.attention):
        assert x.data.tobytes() == y.data.tobytes()


def test_padding_does_not_change_attention():
    params = small_model(seed=24)
    doc, query, _, _ = random_batch(25, n=1, ld=5, lq=3)
    alone = core.forward_pass(params, doc, query, GATING)
    padded_doc = np.concatenate([doc, np.zeros((1, 2), dtype=doc.dtype)], axis=1)
    padded_query = np.concatenate([query, np.zeros((1, 1), dtype=query.dtype)], axis=1)
    padded = core.forward_pass(params, padded_doc, padded_query, GATING,
                               doc_mask=np.array([[1., 1., 1., 1., 1., 0., 0.]]),
                               query_mask=np.array([[1., 1., 1., 0.]]))
    assert np.allclose(padded.attention[-1].data[:, :5], alone.attention[-1].data, atol=1e-12)
    assert np.all(padded.attention[-1].data[:, 5:] == 0)


@pytest.mark.parametrize("mode", [GATING, ADAPTIVE])
def test_full_loss_gradients(mode):
    params = small_model(seed=26)
    doc, query, masks, gold = random_batch(27, n=2, lq=3, ld=6)
    doc_mask = np.ones(doc.shape)
    doc_mask[1, -1] = 0.0
    masks = masks * doc_mask[:, None, :]
    masks[1, :, 0] = 1.0

    def loss(_):
        result = core.forward_pass(params, doc, query, mode, doc_mask=doc_mask)
        probs, _ = candidate_probabilities(result, masks)
        return batch_loss(probs, gold)

    for name, tensor in params.named().items():
        report = nx.grad_check(loss, tensor, probes=15, floor=1e-5, name=name)
        assert report.ok(1e-4), report
