import numpy as np
import pytest

from gxlstm import numerics as nx
from gxlstm.corpus import StreamSet, SyntheticConfig, build_context_window, generate_synthetic
from gxlstm.gated import (
    GatedXlstm, GateReport, ModelConfig, batch_from_streamsets, encode_corpus, export_gate_report,
    gate_report_from_weights, predict_batches, predict_posteriors, read_gate_csv,
)

SMALL = dict(embedding_dim=16, steps=4, hidden_dim=8, layers=2, heads=2, qkv_blocks=4)


def model(seed=0, **kw):
    return GatedXlstm(ModelConfig(**{**SMALL, **kw}), seed=seed)


def randomise(m, scale=0.5, seed=1):
    rng = np.random.default_rng(seed)
    for name in ("head.W", "head.b", "gate.W", "gate.b"):
        if name in m.params:
            p = m.params[name]
            p.data = (scale * rng.standard_normal(p.shape)).astype(p.data.dtype)
    return m


def corpus(n=4, **kw):
    return generate_synthetic(SyntheticConfig(n_dialogues=n, embedding_dim=16, steps=4, **kw))


def emb(B=3, S=12, D=16, seed=0):
    return np.random.default_rng(seed).standard_normal((B, S, D))


# -- gates ----------------------------------------------------------------

def test_zero_gate_parameters_give_half():
    m = model()
    m.params["gate.b"].data[:] = 0.0
    _, w = m.forward(emb())
    assert np.all(w.data[0] == 1.0)
    assert np.allclose(w.data[1:], 0.5)


def test_default_gate_bias_init():
    _, w = model().forward(emb())
    assert np.allclose(w.data[1:], 1 / (1 + np.exp(-1.0)))


def test_padded_stream_with_zero_bias_is_half():
    m = randomise(model())
    m.params["gate.b"].data[:] = 0.0
    E = emb()
    E[:, 5] = 0.0
    _, w = m.forward(E)
    assert np.allclose(w.data[5], 0.5)


def test_random_gates_in_open_interval_reference_fixed():
    for seed in range(20):
        m = randomise(model(), scale=3.0, seed=seed)
        _, w = m.forward(emb(B=4, seed=seed) * 3.0)
        assert np.all(w.data[0] == 1.0)
        assert np.all((w.data[1:] > 0) & (w.data[1:] < 1))


def test_override_of_reference_gate_rejected():
    with pytest.raises(ValueError):
        model().forward(emb(), gate_override={0: 0.0})


def test_gates_forced_to_zero_isolate_reference():
    m = randomise(model())
    E = emb()
    closed = {j: 0.0 for j in range(1, 12)}
    a = m.forward(E, gate_override=closed)[0].data
    E2 = E.copy()
    E2[:, 1:] += np.random.default_rng(9).standard_normal(E2[:, 1:].shape)
    b = m.forward(E2, gate_override=closed)[0].data
    assert np.array_equal(a, b)


def test_doubling_padded_stream_changes_nothing():
    m = randomise(model())
    E = emb()
    E[:, 7] = 0.0
    E2 = E.copy()
    E2[:, 7] *= 2.0
    assert np.array_equal(m.forward(E)[0].data, m.forward(E2)[0].data)


@pytest.mark.parametrize("logit,target", [(50.0, "x"), (-50.0, "zero")])
def test_saturated_gate_passes_or_blocks(logit, target):
    m = model()
    m.params["gate.b"].data[:] = logit
    E = emb()
    _, w = m.forward(E)
    x = m.encode(m._prepare(E)).data  # (S, B, d)
    z = w.data[:, :, None] * x
    for j in range(1, 12):
        err = np.linalg.norm(z[j] - x[j]) if target == "x" else np.linalg.norm(z[j])
        assert err < 1e-9 * np.linalg.norm(x[j])


def test_shared_gate_variant():
    m = model(shared_gate=True)
    assert m.params["gate.W"].shape == (1, 16, 1)
    _, w = randomise(m).forward(emb())
    assert w.shape == (12, 3)


def test_strict_mask_zeroes_padded_streams():
    m = model(strict_mask=True)
    padded = np.zeros((3, 12), bool)
    padded[:, 4:] = True
    _, w = m.forward(emb(), padded)
    assert np.all(w.data[4:] == 0) and np.all(w.data[0] == 1)


def test_base_mode_has_no_gate_parameters():
    m = model(mode="base")
    assert "gate.W" not in m.params
    _, w = m.forward(emb())
    assert np.all(w.data == 1.0)


# -- forward --------------------------------------------------------------

def test_logit_shape_and_dimension_check():
    m = model()
    logits, _ = m.forward(emb(B=5))
    assert logits.shape == (5, 4)
    with pytest.raises(ValueError):
        m.forward(emb(D=12))
    with pytest.raises(ValueError):
        m.forward(emb(S=8))


def test_stream_order_canonicalised():
    d = corpus(n=1).dialogues[0]
    m = randomise(model())
    s = build_context_window(d, len(d) - 1)
    perm = np.random.default_rng(3).permutation(12)
    shuffled = StreamSet(tuple(s.refs[i] for i in perm), s.embeddings[perm])
    a = m.forward_streamsets([s]).data
    b = m.forward_streamsets([shuffled]).data
    assert np.array_equal(a, b)


def test_share_frames_variant():
    m = model(share_frames=True)
    assert m.params["enc.W_in"].shape[0] == 4
    assert m.forward(emb())[0].shape == (3, 4)


def test_gradient_through_gate_and_head():
    m = randomise(model(frames=2))
    E = emb(B=2, S=8)
    y = np.array([1, 3])
    params = {k: m.params[k] for k in ("gate.W", "gate.b", "head.W", "head.b", "enc.W_in", "enc.L0.cell.Wq")}
    report = nx.finite_diff_grad_check(lambda: nx.softmax_cross_entropy(m.forward(E)[0], y), params,
                                       tolerance=1e-4, max_coords=24)
    assert report.passed, str(report)


def test_float32_mode_runs():
    m = model(dtype="float32")
    logits, _ = randomise(m).forward(emb())
    assert logits.data.dtype == np.float32


# -- posteriors -----------------------------------------------------------

def test_zero_head_gives_uniform_posteriors():
    p = predict_posteriors(model(), corpus(n=1).dialogues[0])
    assert np.allclose(p, 0.25)


def test_posterior_rows_sum_to_one():
    c = corpus(n=3)
    m = randomise(model(), scale=2.0)
    for d in c.dialogues:
        assert np.allclose(predict_posteriors(m, d).sum(axis=1), 1.0, atol=1e-9)


def test_permuting_dialogues_permutes_outputs():
    c = corpus(n=3)
    m = randomise(model())
    per = [predict_posteriors(m, d) for d in c.dialogues]
    rev = [predict_posteriors(m, d) for d in reversed(c.dialogues)]
    for a, b in zip(per, reversed(rev)):
        assert np.array_equal(a, b)


def test_batched_prediction_matches_per_dialogue():
    c = corpus(n=3)
    m = randomise(model())
    probs, gates = predict_batches(m, encode_corpus(c, 3).batch, batch_size=5)
    per = np.concatenate([predict_posteriors(m, d) for d in c.dialogues])
    assert np.allclose(probs, per, atol=1e-12)
    assert gates.shape == (c.n_utterances, 12)


def test_state_arrays_round_trip():
    a = randomise(model())
    b = model(seed=5)
    b.load_arrays(a.state_arrays())
    E = emb()
    assert np.array_equal(a.forward(E)[0].data, b.forward(E)[0].data)
    with pytest.raises(ValueError):
        b.load_arrays({"head.W": np.zeros(1)})


# -- gate report ----------------------------------------------------------

def test_report_for_zero_gate_parameters(tmp_path):
    m = model()
    m.params["gate.b"].data[:] = 0.0
    r = export_gate_report(m, corpus(n=2), tmp_path / "g.csv", tmp_path / "g.svg")
    assert r.mean_abs_weight[0] == 1.0 and np.allclose(r.mean_abs_weight[1:], 0.5)
    rows = read_gate_csv(tmp_path / "g.csv")
    assert len(rows) == 12
    assert (rows[0]["role"], rows[0]["modality"], rows[0]["frame"], rows[0]["mean_abs_weight"]) == \
        ("self", "audio", 0, 1.0)
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "role,modality,frame,mean_abs_weight,n"
    assert (tmp_path / "g.svg").read_text().startswith("<svg")


def test_report_weight_lookup_and_count():
    w = np.full((10, 12), 0.25)
    w[:, 0] = 1.0
    r = gate_report_from_weights(w, 3)
    assert isinstance(r, GateReport) and r.n == 10
    assert r.weight("self", "audio", 0) == 1.0 and r.weight("interlocutor", "text", 2) == 0.25


def test_report_rejects_empty_corpus():
    from gxlstm.corpus import Corpus

    with pytest.raises(ValueError):
        export_gate_report(model(), Corpus((), 16))


def test_batch_from_streamsets_reorders():
    d = corpus(n=1).dialogues[0]
    s = build_context_window(d, 0)
    rev = StreamSet(s.refs[::-1], s.embeddings[::-1])
    b = batch_from_streamsets([rev], [0])
    assert np.array_equal(b.embeddings[0], s.embeddings)
    assert np.array_equal(b.padded[0], s.padded_mask)
