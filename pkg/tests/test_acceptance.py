"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (collected again in the terminal summary)
and then asserts.  The training-based checks take minutes on one core and
carry the ``slow`` marker; they are part of the default run.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gxlstm.corpus import EMOTIONS, LABEL_INDEX, generate_synthetic, synthetic_class_means
from gxlstm.ded import BlockState, DecodeConfig, ShiftModel, brute_force_decode_full, ddcrp_prior, ded_decode_full, \
    estimate_p0
from gxlstm.gated import GatedXlstm, ModelConfig, export_gate_report
from gxlstm.harness import (
    ablate, evaluate, format_config_text, load_config, make_splits, model_grad_check, run_protocol, train,
)
from gxlstm.numerics import Tensor
from gxlstm.xlstm import (
    MlstmState, SlstmState, XlstmConfig, _mlstm_project, init_mlstm, init_slstm, mlstm_step, slstm_step,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# -- tolerances and budgets -------------------------------------------------

GRAD_TOL, GRAD_MIN_COORDS, GRAD_BUDGET_S = 1e-4, 500, 60.0
MLSTM_STEPS, CARRY_STEPS = 10_000, 100
GATE_FORWARDS, PERTURB_TOL = 1000, 1e-12
DED_INSTANCES, DED_MAX_K, DED_BUDGET_S = 100, 6, 30.0
DDCRP_STATES, DDCRP_SUM_TOL = 10_000, 1e-12
LEARN_MIN_ACC, LEARN_BAYES_MIN, LEARN_BUDGET_S = 0.90, 0.97, 300.0
INTERP_MIN_SEEDS = 4
ABLATE_BUDGET_S = 600.0
P0_RANGE = (0.17, 0.23)


def test_gradient_correctness(acceptance):
    t = time.perf_counter()
    rep = model_grad_check(embedding_dim=64, hidden_dim=8, layers=2, frames=2, tolerance=GRAD_TOL)
    dt = time.perf_counter() - t
    ok = rep.max_rel_error < GRAD_TOL and rep.n_coords >= GRAD_MIN_COORDS and dt < GRAD_BUDGET_S
    assert acceptance("gradient correctness", ok,
                      f"max rel err {rep.max_rel_error:.2e} over {rep.n_coords} coords in {dt:.1f}s")


def _cell(kind, cfg, seed):
    params = {}
    rng = np.random.default_rng(seed)
    (init_mlstm if kind == "m" else init_slstm)(params, kind, cfg, 1, rng)
    for p in params.values():
        p.data = p.data + 0.5 * rng.standard_normal(p.shape)
    return params


def test_cell_invariants(acceptance):
    cfg = XlstmConfig(input_dim=4, hidden_dim=8, layers=2, heads=2, qkv_blocks=4)
    params = _cell("m", cfg, 11)
    rng = np.random.default_rng(11)
    # 100 independent streams x 100 steps = 10,000 cell steps
    B, T = 100, MLSTM_STEPS // 100
    state = MlstmState.zeros(1, B, cfg.heads, cfg.head_dim)
    min_denom, mismatch = np.inf, 0.0
    for t in range(T):
        x = 3.0 * rng.standard_normal((1, B, cfg.hidden_dim))
        q = _mlstm_project(params, "m", cfg, Tensor(x[:, :, None]), Tensor(x[:, :, None]))[0].data[:, :, 0]
        state, h = mlstm_step(params, state, x, cfg, prefix="m", step=t)
        raw = (state.n.data * q).sum(axis=-1)  # n_t . q_t, recomputed outside the cell
        mismatch = max(mismatch, float(np.abs(state.denom - np.maximum(raw, 1.0)).max()))
        min_denom = min(min_denom, float(state.denom.min()))
        assert np.isfinite(h.data).all()
    denom_ok = min_denom >= 1.0 and mismatch < 1e-12

    m_state = MlstmState(Tensor(rng.standard_normal((1, 3, 2, 4, 4))), Tensor(rng.standard_normal((1, 3, 2, 4))),
                         Tensor(np.zeros((1, 3, 2))))
    s_params = _cell("s", cfg, 12)
    s_state = SlstmState(Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.uniform(0.5, 2, (1, 3, 8))),
                         Tensor(np.zeros((1, 3, 8))), Tensor(rng.standard_normal((1, 3, 8))))
    m0 = (m_state.C.data.copy(), m_state.n.data.copy())
    s0 = (s_state.c.data.copy(), s_state.n.data.copy())
    for t in range(CARRY_STEPS):
        x = rng.standard_normal((1, 3, 8))
        m_state, _ = mlstm_step(params, m_state, x, cfg, prefix="m", force_gates=(0.0, 1.0), step=t)
        s_state, _ = slstm_step(s_params, s_state, x, cfg, prefix="s", force_gates=(0.0, 1.0), step=t)
    carry_ok = (np.array_equal(m_state.C.data, m0[0]) and np.array_equal(m_state.n.data, m0[1])
                and np.array_equal(s_state.c.data, s0[0]) and np.array_equal(s_state.n.data, s0[1]))
    assert acceptance("cell invariants", denom_ok and carry_ok,
                      f"min denominator {min_denom:.3f} over {B * T} mLSTM steps (|recomputed diff| {mismatch:.1e}); "
                      f"{CARRY_STEPS}-step carry-through exact: {carry_ok}")


def test_gate_contract(acceptance):
    cfg = ModelConfig(embedding_dim=16, steps=4, hidden_dim=8, layers=2, heads=2, qkv_blocks=4)
    model = GatedXlstm(cfg, seed=0)
    rng = np.random.default_rng(21)
    ref_exact, interior, worst = True, True, 0.0
    for i in range(GATE_FORWARDS):
        scale = rng.uniform(0.1, 4.0)
        for name in ("head.W", "head.b", "gate.W", "gate.b"):
            p = model.params[name]
            p.data = scale * rng.standard_normal(p.shape)
        B = int(rng.integers(1, 4))
        E = rng.standard_normal((B, cfg.n_streams, 16)) * rng.uniform(0.1, 3.0)
        E[:, rng.random(cfg.n_streams) < 0.2] = 0.0  # some padded streams
        E[:, 0] = rng.standard_normal((B, 16))
        _, w = model.forward(E)
        ref_exact &= bool(np.all(w.data[0] == 1.0))
        interior &= bool(np.all((w.data[1:] > 0.0) & (w.data[1:] < 1.0)))
        if i % 10 == 0:
            j = int(rng.integers(1, cfg.n_streams))
            a = model.forward(E, gate_override={j: 0.0})[0].data
            E2 = E.copy()
            E2[:, j] += 5.0 * rng.standard_normal((B, 16))
            b = model.forward(E2, gate_override={j: 0.0})[0].data
            worst = max(worst, float(np.abs(a - b).max()))
    ok = ref_exact and interior and worst < PERTURB_TOL
    assert acceptance("gate contract", ok, f"reference weight exactly 1 in {GATE_FORWARDS} forwards: {ref_exact}; "
                                           f"learned weights in (0,1): {interior}; max perturbation {worst:.1e}")


def test_ded_oracle_equivalence(acceptance):
    rng = np.random.default_rng(31)
    t = time.perf_counter()
    matched = monotone = 0
    for _ in range(DED_INSTANCES):
        K = int(rng.integers(1, DED_MAX_K + 1))
        post = rng.dirichlet(np.full(4, rng.uniform(0.3, 3.0)), size=K)
        spk = ["AB"[s] for s in rng.integers(0, 2, K)]
        shift, alpha = ShiftModel(float(rng.uniform(0.02, 0.98))), float(rng.uniform(0.1, 5.0))
        labels, score = brute_force_decode_full(post, spk, shift, alpha)
        full = ded_decode_full(post, spk, DecodeConfig(beam_width=4 ** K, alpha=alpha), shift)
        matched += list(full.labels) == labels and full.log_score == score
        scores = [ded_decode_full(post, spk, DecodeConfig(beam_width=b, alpha=alpha), shift).log_score
                  for b in (1, 2, 4, 8, 16, 64, 256, 4 ** K)]
        monotone += all(a <= b for a, b in zip(scores, scores[1:]))
    dt = time.perf_counter() - t
    ok = matched == monotone == DED_INSTANCES and dt < DED_BUDGET_S
    assert acceptance("DED oracle equivalence", ok, f"exact match {matched}/{DED_INSTANCES}, monotone in width "
                                                    f"{monotone}/{DED_INSTANCES}, {dt:.1f}s")


def test_ddcrp_validity(acceptance):
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(DDCRP_STATES):
        counts = rng.integers(0, 30, 4) * (rng.random(4) < 0.6)
        p = ddcrp_prior(BlockState(tuple(float(c) for c in counts), float(rng.uniform(1e-3, 20.0))))
        worst = max(worst, abs(p.sum() - 1.0))
        assert (p >= 0).all()
    counts = [0.0] * 4
    counts[LABEL_INDEX["anger"]], counts[LABEL_INDEX["sadness"]] = 2.0, 1.0
    hand = ddcrp_prior(BlockState(tuple(counts), 1.0))
    expected = {"anger": 0.5, "happiness": 0.125, "sadness": 0.25, "neutrality": 0.125}
    hand_ok = all(abs(hand[LABEL_INDEX[e]] - v) < 1e-15 for e, v in expected.items())
    ok = worst < DDCRP_SUM_TOL and hand_ok
    shown = ", ".join(f"{e}={hand[LABEL_INDEX[e]]:g}" for e in EMOTIONS)
    assert acceptance("ddCRP validity", ok, f"max |sum-1| {worst:.1e} over {DDCRP_STATES} states; hand case {shown}")


def _plug_in_accuracy(corpus, syn):
    """Bayes classifier on the generator's true class means (per utterance)."""
    means = synthetic_class_means(syn)
    sa, st = syn.signal_scale.get("audio", 0.0), syn.signal_scale.get("text", 0.0)
    correct = total = 0
    for d in corpus.dialogues:
        for u in d.utterances:
            ll = -((u.audio - sa * means) ** 2).sum(1) - ((u.text - st * means) ** 2).sum(1)
            correct += int(np.argmax(ll)) == LABEL_INDEX[u.label]
            total += 1
    return correct / total


@pytest.mark.slow
def test_synthetic_learnability(acceptance):
    cfg = load_config(CONFIGS / "small.cfg")
    splits = make_splits(cfg)
    bayes = _plug_in_accuracy(generate_synthetic(cfg.synthetic), cfg.synthetic)
    t = time.perf_counter()
    ck = train(cfg, 42, splits)
    acc = evaluate(ck, splits.test).weighted_accuracy
    dt = time.perf_counter() - t
    ok = acc >= LEARN_MIN_ACC and bayes > LEARN_BAYES_MIN and dt < LEARN_BUDGET_S
    assert acceptance("synthetic learnability", ok,
                      f"test W-Acc {acc:.3f} (plug-in Bayes {bayes:.3f}) after {cfg.epochs} epochs in {dt:.0f}s")


@pytest.mark.slow
def test_gate_interpretability(acceptance):
    cfg = load_config(CONFIGS / "interpretability.cfg")
    splits = make_splits(cfg)
    wins, margins = 0, []
    for seed in cfg.seeds:
        rep = export_gate_report(train(cfg, seed, splits).model(), splits.test)
        w = rep.mean_abs_weight
        own_audio = [i for i, r in enumerate(rep.refs) if r.role == "self" and r.modality == "audio"]
        others = [i for i in range(len(w)) if i not in own_audio]
        margin = float(w[own_audio].min() - w[others].max())
        margins.append(margin)
        wins += margin > 0
    ok = wins >= INTERP_MIN_SEEDS
    assert acceptance("gate interpretability", ok, f"self-audio ranked above all other streams in {wins}/"
                                                   f"{len(cfg.seeds)} seeds (margins "
                                                   f"{', '.join(f'{m:+.3f}' for m in margins)})")


@pytest.mark.slow
def test_ablation_trend(acceptance):
    cfg = load_config(CONFIGS / "ablation.cfg")
    t = time.perf_counter()
    res = ablate(cfg)
    dt = time.perf_counter() - t
    acc = {(r.model, r.decoder): r.w_acc for r in res.rows}
    base, gated, gated_ded = acc[("base xLSTM", "none")], acc[("Gated-xLSTM", "none")], acc[("Gated-xLSTM", "ded")]
    ok = gated >= base and gated_ded >= gated and dt < ABLATE_BUDGET_S
    assert acceptance("ablation trend", ok, f"W-Acc base {base:.2f}, gated {gated:.2f}, gated+DED {gated_ded:.2f} "
                                            f"over {len(cfg.seeds)} seeds in {dt:.0f}s")


def test_p0_estimation(acceptance):
    cfg = load_config(CONFIGS / "small.cfg")
    assert cfg.synthetic.self_transition_prob == 0.8
    p0 = estimate_p0(generate_synthetic(cfg.synthetic))
    ok = P0_RANGE[0] <= p0 <= P0_RANGE[1]
    assert acceptance("p0 estimation", ok, f"estimated p0 {p0:.4f} on the q=0.8 corpus")


@pytest.mark.slow
def test_determinism(acceptance, tmp_path):
    base = load_config(CONFIGS / "small.cfg")
    cfg = replace(base, epochs=2, seeds=(42, 43), synthetic=replace(base.synthetic, n_dialogues=60))
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(format_config_text(cfg))
    run_protocol(load_config(cfg_path), tmp_path / "a")
    # second execution in a fresh interpreter through the command line
    proc = subprocess.run([sys.executable, "-m", "gxlstm", "protocol", "--config", str(cfg_path), "--out-dir",
                           str(tmp_path / "b")], capture_output=True, text=True)
    a, b = (tmp_path / "a" / "summary.csv").read_bytes(), (tmp_path / "b" / "summary.csv").read_bytes()
    ok = proc.returncode == 0 and a == b
    assert acceptance("determinism", ok, f"summary.csv byte-identical across processes: {a == b} ({len(a)} bytes)")
