"""mLSTM / sLSTM cells and the stacked xLSTM encoder.

All tensors carry a leading *stack* axis P: one independent parameter set
per stream, so the twelve streams of a prediction run through one batched
graph.  Sequence tensors are laid out as (P, B, T, d).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import NumericError, Tensor


@dataclass
class XlstmConfig:
    input_dim: int = 32  # per-step segment width, D / steps
    hidden_dim: int = 32
    layers: int = 8
    heads: int = 4
    kernel_size: int = 4
    qkv_blocks: int = 4
    ff_factor: float = 1.3
    pattern: str = "ms"  # repeated to `layers`; m = mLSTM, s = sLSTM
    gates: str = "exp"  # mLSTM input gate: "exp" (stabilised) or "sigmoid"
    forget_bias: float = 3.0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % self.qkv_blocks:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by qkv_blocks {self.qkv_blocks}")
        if not self.pattern or set(self.pattern) - {"m", "s"}:
            raise ValueError(f"layer pattern must use only 'm' and 's', got {self.pattern!r}")
        if self.gates not in ("exp", "sigmoid"):
            raise ValueError(f"unknown gate mode {self.gates!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def ff_dim(self) -> int:
        return int(math.ceil(self.ff_factor * self.hidden_dim))

    def layer_kinds(self) -> str:
        reps = -(-self.layers // len(self.pattern))
        return (self.pattern * reps)[: self.layers]


def segment_embedding(e, steps: int = 16) -> np.ndarray:
    """Chop a flat embedding (..., D) into (..., steps, D // steps), in order."""
    e = np.asarray(e)
    D = e.shape[-1]
    if steps < 1 or D % steps:
        raise ValueError(f"{steps} steps do not evenly divide embedding dim {D}")
    return e.reshape(*e.shape[:-1], steps, D // steps)


# ---------------------------------------------------------------------------
# parameter helpers


def _normal(rng, shape, fan_in):
    return rng.standard_normal(shape) / math.sqrt(fan_in)


def _param(params, name, data, dtype):
    params[name] = Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True, name=name)


def _blockdiag_apply(x: Tensor, w: Tensor) -> Tensor:
    """x (P, B, T, d) times a block-diagonal weight (P, nb, bd, bd)."""
    P, B, T, d = x.shape
    nb, bd = w.shape[1], w.shape[2]
    xs = x.reshape(P, B * T, nb, bd).transpose(0, 2, 1, 3)
    return (xs @ w).transpose(0, 2, 1, 3).reshape(P, B, T, d)


def _dense_apply(x: Tensor, w: Tensor) -> Tensor:
    """x (P, B, T, d_in) times (P, d_in, d_out)."""
    P, B, T, d = x.shape
    return (x.reshape(P, B * T, d) @ w).reshape(P, B, T, w.shape[-1])


def _bias(b: Tensor) -> Tensor:
    # (P, k) -> (P, 1, 1, k) for broadcasting over batch and time
    return b.reshape(b.shape[0], 1, 1, b.shape[1])


# ---------------------------------------------------------------------------
# mLSTM


@dataclass
class MlstmState:
    C: Tensor  # (P, B, H, dh, dh)
    n: Tensor  # (P, B, H, dh)
    m: Tensor  # (P, B, H) log-scale stabiliser
    denom: np.ndarray | None = None  # max(n.q, 1) of the last step, diagnostics only
    gates: tuple | None = None  # stabilised (i', f') of the last step, diagnostics only

    @classmethod
    def zeros(cls, P, B, heads, head_dim, dtype=np.float64):
        return cls(
            Tensor(np.zeros((P, B, heads, head_dim, head_dim), dtype)),
            Tensor(np.zeros((P, B, heads, head_dim), dtype)),
            Tensor(np.zeros((P, B, heads), dtype)),
        )


def init_mlstm(params: dict, prefix: str, cfg: XlstmConfig, P: int, rng, dtype=np.float64):
    d, H, nb = cfg.hidden_dim, cfg.heads, cfg.qkv_blocks
    bd = d // nb
    for w in ("Wq", "Wk", "Wv"):
        _param(params, f"{prefix}.{w}", _normal(rng, (P, nb, bd, bd), bd), dtype)
    for b in ("bq", "bk", "bv"):
        _param(params, f"{prefix}.{b}", np.zeros((P, d)), dtype)
    _param(params, f"{prefix}.Wi", _normal(rng, (P, d, H), d) * 0.1, dtype)
    _param(params, f"{prefix}.bi", np.zeros((P, H)), dtype)
    _param(params, f"{prefix}.Wf", _normal(rng, (P, d, H), d) * 0.1, dtype)
    _param(params, f"{prefix}.bf", np.full((P, H), cfg.forget_bias), dtype)
    _param(params, f"{prefix}.Wo", _normal(rng, (P, d, d), d), dtype)
    _param(params, f"{prefix}.bo", np.zeros((P, d)), dtype)


def _mlstm_project(p: dict, prefix: str, cfg: XlstmConfig, x: Tensor, xc: Tensor):
    """Per-step inputs of the recurrence for a whole sequence.

    q, k and the input/forget gates read the convolved stream ``xc``;
    v and the output gate read ``x``.
    """
    P, B, T, d = x.shape
    H, dh = cfg.heads, cfg.head_dim
    heads = (P, B, T, H, dh)
    q = (_blockdiag_apply(xc, p[f"{prefix}.Wq"]) + _bias(p[f"{prefix}.bq"])).reshape(heads)
    k = (_blockdiag_apply(xc, p[f"{prefix}.Wk"]) * (1.0 / math.sqrt(dh)) + _bias(p[f"{prefix}.bk"])).reshape(heads)
    v = (_blockdiag_apply(x, p[f"{prefix}.Wv"]) + _bias(p[f"{prefix}.bv"])).reshape(heads)
    i_pre = _dense_apply(xc, p[f"{prefix}.Wi"]) + _bias(p[f"{prefix}.bi"])
    logf = nx.logsigmoid(_dense_apply(xc, p[f"{prefix}.Wf"]) + _bias(p[f"{prefix}.bf"]))
    if cfg.gates == "sigmoid":
        i_pre = nx.logsigmoid(i_pre)
    o = nx.sigmoid(_dense_apply(x, p[f"{prefix}.Wo"]) + _bias(p[f"{prefix}.bo"]))
    return q, k, v, i_pre, logf, o


def _mlstm_recur(state: MlstmState, q, k, v, log_i, logf, o, force=None):
    """One recurrence step on per-step slices.

    q, k, v: (P, B, H, dh); log_i, logf: (P, B, H) log-domain gates;
    o: (P, B, d).  ``force=(i, f)`` pins the stabilised gates (testing).
    """
    if force is None:
        m_new = nx.maximum(logf + state.m, log_i)
        i_g = nx.exp(log_i - m_new)
        f_g = nx.exp(logf + state.m - m_new)
    else:
        m_new = state.m
        i_g = Tensor(np.full(state.m.shape, force[0], state.m.data.dtype))
        f_g = Tensor(np.full(state.m.shape, force[1], state.m.data.dtype))
    P, B, H = i_g.shape
    f4 = f_g.reshape(P, B, H, 1, 1)
    i4 = i_g.reshape(P, B, H, 1, 1)
    outer = v.reshape(*v.shape, 1) * k.reshape(*k.shape[:-1], 1, k.shape[-1])
    C = f4 * state.C + i4 * outer
    n = f_g.reshape(P, B, H, 1) * state.n + i_g.reshape(P, B, H, 1) * k
    num = (C @ q.reshape(*q.shape, 1)).reshape(q.shape)
    denom = nx.clamp_min((n * q).sum(axis=-1), 1.0)
    h_tilde = num / denom.reshape(P, B, H, 1)
    h = o * h_tilde.reshape(P, B, H * q.shape[-1])
    return MlstmState(C, n, m_new, denom.data, (i_g.data, f_g.data)), h


def mlstm_step(params: dict, state: MlstmState, x_t, cfg: XlstmConfig, prefix: str = "mlstm",
               xc_t=None, force_gates=None, step: int = 0):
    """Advance an mLSTM cell by one step.

    x_t: (P, B, d).  ``xc_t`` is the convolved input feeding q, k and the
    gates (defaults to ``x_t``).  ``step`` only labels numeric errors.
    Returns ``(new_state, h_t)``.
    """
    x_t = nx.as_tensor(x_t)
    xc_t = x_t if xc_t is None else nx.as_tensor(xc_t)
    P, B, d = x_t.shape
    seq = lambda t: t.reshape(P, B, 1, d)
    q, k, v, log_i, logf, o = _mlstm_project(params, prefix, cfg, seq(x_t), seq(xc_t))
    squeeze = lambda t: t.reshape(t.shape[:2] + t.shape[3:])
    with _at_step(step):
        state, h = _mlstm_recur(state, *(squeeze(t) for t in (q, k, v, log_i, logf, o)), force=force_gates)
    _check_step(h, step)
    return state, h


def mlstm_sequence(params, prefix, cfg, x: Tensor, xc: Tensor, state=None):
    P, B, T, _ = x.shape
    q, k, v, log_i, logf, o = _mlstm_project(params, prefix, cfg, x, xc)
    if state is None:
        state = MlstmState.zeros(P, B, cfg.heads, cfg.head_dim, x.data.dtype)
    steps = zip(*(nx.unstack(t, axis=2) for t in (q, k, v, log_i, logf, o)))
    hs = []
    for t, args in enumerate(steps):
        with _at_step(t):
            state, h = _mlstm_recur(state, *args)
        _check_step(h, t)
        hs.append(h)
    return nx.stack(hs, axis=2), state


# ---------------------------------------------------------------------------
# sLSTM


@dataclass
class SlstmState:
    c: Tensor  # (P, B, d)
    n: Tensor
    m: Tensor
    h: Tensor
    gates: tuple | None = None  # stabilised (i', f') of the last step, diagnostics only

    @classmethod
    def zeros(cls, P, B, d, dtype=np.float64):
        z = lambda: Tensor(np.zeros((P, B, d), dtype))
        return cls(z(), z(), z(), z())


_SLSTM_GATES = ("z", "i", "f", "o")


def init_slstm(params: dict, prefix: str, cfg: XlstmConfig, P: int, rng, dtype=np.float64):
    d, H, dh = cfg.hidden_dim, cfg.heads, cfg.head_dim
    # input weights for (z, i, f, o), stacked on the output axis
    _param(params, f"{prefix}.W", _normal(rng, (P, d, 4 * d), d), dtype)
    # block-diagonal recurrent weights, one block per head, gates interleaved per head
    _param(params, f"{prefix}.R", _normal(rng, (P, H, dh, 4 * dh), dh) * 0.5, dtype)
    b = np.zeros((P, 4 * d))
    b[:, 2 * d : 3 * d] = cfg.forget_bias
    _param(params, f"{prefix}.b", b, dtype)


def _slstm_project(p, prefix, cfg, x: Tensor, xc: Tensor):
    """Input contributions (P, B, T, H, 4, dh): z and o read x, i and f read xc."""
    P, B, T, d = x.shape
    H, dh = cfg.heads, cfg.head_dim
    W, b = p[f"{prefix}.W"], p[f"{prefix}.b"]
    from_x = _dense_apply(x, W[:, :, 0:d]), _dense_apply(x, W[:, :, 3 * d : 4 * d])
    from_xc = _dense_apply(xc, W[:, :, d : 3 * d])
    pre = nx.concat([from_x[0], from_xc, from_x[1]], axis=-1) + _bias(b)
    # (P,B,T,4,H,dh) -> (P,B,T,H,4,dh) to line up with the per-head recurrent blocks
    return pre.reshape(P, B, T, 4, H, dh).transpose(0, 1, 2, 4, 3, 5)


def _slstm_recur(R: Tensor, state: SlstmState, pre_t: Tensor, force=None):
    """pre_t: (P, B, H, 4, dh) input contribution for this step."""
    P, H, dh, _ = R.shape
    B = pre_t.shape[1]
    d = H * dh
    rec = (state.h.reshape(P, B, H, dh).transpose(0, 2, 1, 3) @ R)  # (P, H, B, 4dh)
    rec = rec.transpose(0, 2, 1, 3).reshape(P, B, H, 4, dh)
    gates = nx.unstack(pre_t + rec, axis=3)
    flat = lambda t: t.reshape(P, B, d)
    z = nx.tanh(flat(gates[0]))
    log_i = flat(gates[1])
    logf = nx.logsigmoid(flat(gates[2]))
    o = nx.sigmoid(flat(gates[3]))
    if force is None:
        m_new = nx.maximum(logf + state.m, log_i)
        i_g = nx.exp(log_i - m_new)
        f_g = nx.exp(logf + state.m - m_new)
    else:
        m_new = state.m
        i_g = Tensor(np.full(state.m.shape, force[0], state.m.data.dtype))
        f_g = Tensor(np.full(state.m.shape, force[1], state.m.data.dtype))
    c = f_g * state.c + i_g * z
    n = f_g * state.n + i_g
    h = o * (c / n)
    return SlstmState(c, n, m_new, h, (i_g.data, f_g.data)), h


def slstm_step(params: dict, state: SlstmState, x_t, cfg: XlstmConfig, prefix: str = "slstm",
               xc_t=None, force_gates=None, step: int = 0):
    """Advance an sLSTM cell by one step; x_t is (P, B, d)."""
    x_t = nx.as_tensor(x_t)
    xc_t = x_t if xc_t is None else nx.as_tensor(xc_t)
    P, B, d = x_t.shape
    pre = _slstm_project(params, prefix, cfg, x_t.reshape(P, B, 1, d), xc_t.reshape(P, B, 1, d))
    pre = pre.reshape(P, B, cfg.heads, 4, cfg.head_dim)
    with _at_step(step):
        state, h = _slstm_recur(params[f"{prefix}.R"], state, pre, force=force_gates)
    _check_step(h, step)
    return state, h


def slstm_sequence(params, prefix, cfg, x: Tensor, xc: Tensor, state=None):
    P, B, T, d = x.shape
    pre = _slstm_project(params, prefix, cfg, x, xc)
    if state is None:
        state = SlstmState.zeros(P, B, d, x.data.dtype)
    R = params[f"{prefix}.R"]
    hs = []
    for t, pre_t in enumerate(nx.unstack(pre, axis=2)):
        with _at_step(t):
            state, h = _slstm_recur(R, state, pre_t)
        _check_step(h, t)
        hs.append(h)
    return nx.stack(hs, axis=2), state


@contextmanager
def _at_step(t: int):
    try:
        yield
    except NumericError as exc:
        if str(exc).startswith("step "):
            raise
        raise NumericError(f"step {t}: {exc}") from exc


def _check_step(h: Tensor, t: int):
    if not np.isfinite(h.data).all():
        raise NumericError(f"step {t}: non-finite hidden state")


# ---------------------------------------------------------------------------
# blocks and stacks


def init_stack(cfg: XlstmConfig, P: int, rng, prefix: str = "xlstm", dtype=np.float64) -> dict:
    """Parameters for P independent encoders (input projection + blocks + final norm)."""
    params: dict = {}
    d, K = cfg.hidden_dim, cfg.kernel_size
    _param(params, f"{prefix}.W_in", _normal(rng, (P, cfg.input_dim, d), cfg.input_dim), dtype)
    _param(params, f"{prefix}.b_in", np.zeros((P, d)), dtype)
    for li, kind in enumerate(cfg.layer_kinds()):
        lp = f"{prefix}.L{li}"
        for ln in ("ln1", "ln2"):
            _param(params, f"{lp}.{ln}.g", np.ones((P, d)), dtype)
            _param(params, f"{lp}.{ln}.b", np.zeros((P, d)), dtype)
        conv = np.zeros((P, K, d))
        conv[:, -1, :] = 1.0  # start as identity on the current step
        conv += 0.1 * rng.standard_normal((P, K, d))
        _param(params, f"{lp}.conv.k", conv, dtype)
        _param(params, f"{lp}.conv.b", np.zeros((P, d)), dtype)
        if kind == "m":
            init_mlstm(params, f"{lp}.cell", cfg, P, rng, dtype)
        else:
            init_slstm(params, f"{lp}.cell", cfg, P, rng, dtype)
        f = cfg.ff_dim
        _param(params, f"{lp}.ff.Wg", _normal(rng, (P, d, f), d), dtype)
        _param(params, f"{lp}.ff.Wu", _normal(rng, (P, d, f), d), dtype)
        _param(params, f"{lp}.ff.Wd", _normal(rng, (P, f, d), f) * 0.5, dtype)
    _param(params, f"{prefix}.out.g", np.ones((P, d)), dtype)
    _param(params, f"{prefix}.out.b", np.zeros((P, d)), dtype)
    return params


def _ln(params, name, x):
    g, b = params[f"{name}.g"], params[f"{name}.b"]
    return nx.layer_norm(x, g.reshape(g.shape[0], 1, 1, -1), b.reshape(b.shape[0], 1, 1, -1))


def block_forward(params: dict, prefix: str, kind: str, cfg: XlstmConfig, x: Tensor) -> Tensor:
    """Pre-norm residual block: conv -> cell, then gated GELU feed-forward."""
    P = x.shape[0]
    u = _ln(params, f"{prefix}.ln1", x)
    k = params[f"{prefix}.conv.k"]
    xc = nx.causal_depthwise_conv(u, k.reshape(P, 1, *k.shape[1:]), params[f"{prefix}.conv.b"].reshape(P, 1, -1))
    run = mlstm_sequence if kind == "m" else slstm_sequence
    h, _ = run(params, f"{prefix}.cell", cfg, u, xc)
    y = x + h
    v = _ln(params, f"{prefix}.ln2", y)
    ff = nx.gelu(_dense_apply(v, params[f"{prefix}.ff.Wg"])) * _dense_apply(v, params[f"{prefix}.ff.Wu"])
    return y + _dense_apply(ff, params[f"{prefix}.ff.Wd"])


def xlstm_sequence(params: dict, cfg: XlstmConfig, seq, prefix: str = "xlstm") -> Tensor:
    """Top-layer hidden states for every step, (P, B, T, d)."""
    seq = nx.as_tensor(seq)
    if seq.ndim != 4:
        raise ValueError(f"expected (P, B, T, input_dim) input, got {seq.shape}")
    if seq.shape[2] == 0:
        raise ValueError("empty sequence")
    if seq.shape[-1] != cfg.input_dim:
        raise ValueError(f"step width {seq.shape[-1]} != configured input_dim {cfg.input_dim}")
    x = _dense_apply(seq, params[f"{prefix}.W_in"]) + _bias(params[f"{prefix}.b_in"])
    for li, kind in enumerate(cfg.layer_kinds()):
        x = block_forward(params, f"{prefix}.L{li}", kind, cfg, x)
    return _ln(params, f"{prefix}.out", x)


def xlstm_forward(params: dict, cfg: XlstmConfig, seq, prefix: str = "xlstm") -> Tensor:
    """Sequence representation: the last step's top-layer state, (P, B, d)."""
    out = xlstm_sequence(params, cfg, seq, prefix)
    return out[:, :, -1, :]
