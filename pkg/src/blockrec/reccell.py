"""The block-recurrent cell: a transformer layer run vertically over tokens
and horizontally over a block of S state vectors, with gated state updates."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from blockrec.attention import (
    BlockKV,
    ConfigError,
    QKNorm,
    RelPosBias,
    cross_attention,
    tiled_sliding_attention,
)
from blockrec.diffengine import ContractError, layer_norm

GATE_TYPES = ("fixed", "lstm")
GATE_CONFIGS = ("dual", "single", "skip")

# std of a standard normal truncated to [-2, 2]
_TRUNC_STD = 0.87962566103423978


def truncated_normal(shape, std: float, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    """Normal truncated at two standard deviations, rescaled so the result has ``std``."""
    x = torch.empty(shape, dtype=torch.float64)
    nn.init.trunc_normal_(x, mean=0.0, std=1.0, a=-2.0, b=2.0, generator=generator)
    return (x * (std / _TRUNC_STD)).to(dtype)


class Dense(nn.Module):
    """y = x @ W + b with W stored as [d_in, d_out]; fan-in scaled init."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, generator=None, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = nn.Parameter(truncated_normal((d_in, d_out), std, generator))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return layer_norm(x, self.gain)


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int, generator=None):
        super().__init__()
        self.fc1 = Dense(d, hidden, generator=generator)
        self.fc2 = Dense(hidden, d, generator=generator)

    def forward(self, x, dropout: float = 0.0, training: bool = False):
        y = self.fc2(torch.relu(self.fc1(x)))
        return F.dropout(y, dropout, training) if dropout > 0 and training else y


# --- gates ------------------------------------------------------------------


class GateParams(nn.Module):
    """Parameters of one state-update gate.

    fixed: W_z, b_z, b_g.  lstm: W_z, W_i, W_f, b_z, b_i, b_f.  Weights are
    [d_in, d] so that z = h @ W_z + b_z.
    """

    def __init__(self, gate_type: str, d_in: int, d: int):
        super().__init__()
        if gate_type not in GATE_TYPES:
            raise ConfigError(f"unknown gate type {gate_type!r}; expected one of {GATE_TYPES}")
        self.gate_type = gate_type
        self.d_in, self.d = d_in, d
        names = ("z",) if gate_type == "fixed" else ("z", "i", "f")
        for n in names:
            setattr(self, f"W_{n}", nn.Parameter(torch.zeros(d_in, d)))
            setattr(self, f"b_{n}", nn.Parameter(torch.zeros(d)))
        if gate_type == "fixed":
            self.b_g = nn.Parameter(torch.zeros(d))

    def forward(self, c, h):
        if self.gate_type == "fixed":
            return fixed_gate_update(c, h, self)
        return lstm_gate_update(c, h, self)


def init_gate_params(gate_type: str, d_in: int, d: int, generator: torch.Generator | None = None) -> GateParams:
    """Small-but-nonzero gate init.

    Biases ~ N(0, 0.1); weights ~ truncated normal with std sqrt(0.1 / d_in).
    The -1/+1 offsets on the input/forget gates live in the update equations.
    """
    p = GateParams(gate_type, d_in, d)
    w_std = math.sqrt(0.1 / d_in)
    with torch.no_grad():
        for name, t in p.named_parameters():
            if name.startswith("W_"):
                t.copy_(truncated_normal(t.shape, w_std, generator))
            else:
                t.copy_(torch.randn(t.shape, generator=generator, dtype=torch.float64) * 0.1)
    return p


def _check_gate_shapes(c, h, p: GateParams):
    if c.shape[-1] != p.d or h.shape[-1] != p.d_in or c.shape[:-1] != h.shape[:-1]:
        raise ContractError(
            f"gate: c {tuple(c.shape)} / h {tuple(h.shape)} incompatible with d_in={p.d_in}, d={p.d}"
        )


def fixed_gate_update(c: torch.Tensor, h: torch.Tensor, p: GateParams) -> torch.Tensor:
    """c_next = c*g + z*(1-g), z = h W_z + b_z, g = sigmoid(b_g) independent of c and h."""
    if p.gate_type != "fixed":
        raise ContractError("fixed_gate_update needs fixed-gate params")
    _check_gate_shapes(c, h, p)
    z = h @ p.W_z + p.b_z
    g = torch.sigmoid(p.b_g)
    return c * g + z * (1 - g)


def lstm_gate_update(c: torch.Tensor, h: torch.Tensor, p: GateParams) -> torch.Tensor:
    if p.gate_type != "lstm":
        raise ContractError("lstm_gate_update needs lstm-gate params")
    _check_gate_shapes(c, h, p)
    z = torch.tanh(h @ p.W_z + p.b_z)
    i = torch.sigmoid(h @ p.W_i + p.b_i - 1.0)
    f = torch.sigmoid(h @ p.W_f + p.b_f + 1.0)
    return c * f + z * i


def add_state_ids(states: torch.Tensor, state_ids: torch.Tensor) -> torch.Tensor:
    if states.shape[-2:] != state_ids.shape:
        raise ContractError(f"state ids {tuple(state_ids.shape)} do not match states {tuple(states.shape)}")
    return states + state_ids


# --- the cell ---------------------------------------------------------------


class RecurrentCellParams(nn.Module):
    """One block-recurrent layer.

    Shared key/value projections: tokens -> (K_e, V_e), states -> (K_s, V_s).
    Queries: q_ve (tokens, vertical self), q_vs (tokens, vertical cross),
    q_hs (states, horizontal self), q_he (states, horizontal cross).
    """

    def __init__(
        self,
        d: int,
        heads: int,
        head_dim: int,
        mlp_hidden: int,
        num_states: int,
        gate_type: str = "fixed",
        gate_config: str = "skip",
        num_buckets: int = 32,
        max_distance: int = 128,
        dropout: float = 0.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if gate_config not in GATE_CONFIGS:
            raise ConfigError(f"unknown gate config {gate_config!r}; expected one of {GATE_CONFIGS}")
        self.d, self.heads, self.head_dim = d, heads, head_dim
        self.num_states = num_states
        self.gate_type, self.gate_config = gate_type, gate_config
        self.dropout = dropout
        hd = heads * head_dim
        g = generator

        self.ln_tokens = LayerNorm(d)
        self.ln_states = LayerNorm(d)
        self.kv_e = Dense(d, 2 * hd, bias=False, generator=g)
        self.kv_s = Dense(d, 2 * hd, bias=False, generator=g)
        self.q_ve = Dense(d, hd, bias=False, generator=g)
        self.q_vs = Dense(d, hd, bias=False, generator=g)
        self.q_hs = Dense(d, hd, bias=False, generator=g)
        self.q_he = Dense(d, hd, bias=False, generator=g)
        self.rel_bias = RelPosBias(heads, num_buckets, max_distance)
        self.qkn_vself = QKNorm(heads, head_dim)
        self.qkn_vcross = QKNorm(heads, head_dim)
        self.qkn_hself = QKNorm(heads, head_dim)
        self.qkn_hcross = QKNorm(heads, head_dim)

        # vertical: concat(self, cross) -> projection -> residual; MLP -> residual
        self.proj_v = Dense(2 * hd, d, generator=g)
        self.ln_mlp_v = LayerNorm(d)
        self.mlp_v = MLP(d, mlp_hidden, generator=g)

        # horizontal: residuals replaced by gates
        if gate_config == "dual":
            self.gate_proj = init_gate_params(gate_type, 2 * hd, d, g)
            self.ln_mlp_h = LayerNorm(d)
            self.mlp_h_in = Dense(d, mlp_hidden, generator=g)
            self.gate_mlp = init_gate_params(gate_type, mlp_hidden, d, g)
        elif gate_config == "single":
            self.mlp_h_in = Dense(2 * hd, mlp_hidden, generator=g)
            self.gate_mlp = init_gate_params(gate_type, mlp_hidden, d, g)
        else:
            self.gate_proj = init_gate_params(gate_type, 2 * hd, d, g)

        self.state_ids = nn.Parameter(truncated_normal((num_states, d), 1.0, g))
        self.initial_state = nn.Parameter(truncated_normal((num_states, d), 1.0, g))
        self.kv_e_calls = 0

    # shared projections

    def token_kv(self, x_norm):
        """(K_e, V_e) for layer-normed tokens [..., T, d] -> [..., T, heads, head_dim] each."""
        self.kv_e_calls += 1
        kv = self.kv_e(x_norm)
        k, v = kv.split(self.heads * self.head_dim, dim=-1)
        return self._heads(k), self._heads(v)

    def state_inputs(self, states):
        """Layer-normed states with IDs added, plus (K_s, V_s)."""
        s_norm = self.ln_states(add_state_ids(states, self.state_ids))
        k, v = self.kv_s(s_norm).split(self.heads * self.head_dim, dim=-1)
        return s_norm, self._heads(k), self._heads(v)

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.head_dim)

    def _merge(self, x):
        return x.reshape(*x.shape[:-2], self.heads * self.head_dim)

    # substeps

    def vertical(self, x, x_norm, prev: BlockKV, k_e, v_e, k_s, v_s):
        """Token update for all blocks of x at once.

        x, x_norm: [B, T, d] with T a multiple of W; k_s, v_s: [B, T/W, S, H, D]
        (states current at each block).
        """
        B, T, _ = x.shape
        W = prev.keys.shape[1]
        nb = T // W
        training = self.training and self.dropout > 0
        q_self = self._heads(self.q_ve(x_norm))
        att_self = tiled_sliding_attention(
            q_self, prev, k_e, v_e, self.rel_bias, self.qkn_vself, self.dropout, training
        )
        q_cross = self._heads(self.q_vs(x_norm)).view(B, nb, W, self.heads, self.head_dim)
        att_cross = cross_attention(q_cross, k_s, v_s, self.qkn_vcross, self.dropout, training)
        att_cross = att_cross.reshape(B, T, self.heads, self.head_dim)
        y = x + self.proj_v(torch.cat([self._merge(att_self), self._merge(att_cross)], dim=-1))
        return y + self.mlp_v(self.ln_mlp_v(y), self.dropout, self.training)

    def horizontal(self, states, s_norm, k_s, v_s, k_e, v_e):
        """State update for one block; k_e, v_e: [B, W, H, D] of that block's tokens."""
        training = self.training and self.dropout > 0
        q_self = self._heads(self.q_hs(s_norm))
        q_cross = self._heads(self.q_he(s_norm))
        h_self = cross_attention(q_self, k_s, v_s, self.qkn_hself, self.dropout, training)
        h_cross = cross_attention(q_cross, k_e, v_e, self.qkn_hcross, self.dropout, training)
        h = torch.cat([self._merge(h_self), self._merge(h_cross)], dim=-1)
        if self.gate_config == "skip":
            return self.gate_proj(states, h)
        if self.gate_config == "single":
            return self.gate_mlp(states, torch.relu(self.mlp_h_in(h)))
        c1 = self.gate_proj(states, h)
        hidden = torch.relu(self.mlp_h_in(self.ln_mlp_h(c1)))
        return self.gate_mlp(c1, hidden)

    # drivers

    def step(self, tokens, states, prev: BlockKV):
        """One block: (token_out [B, W, d], next_states [B, S, d], cur_kv)."""
        if tokens.shape[1] != prev.keys.shape[1]:
            raise ContractError("step: block length must equal the window")
        x_norm = self.ln_tokens(tokens)
        k_e, v_e = self.token_kv(x_norm)
        s_norm, k_s, v_s = self.state_inputs(states)
        out = self.vertical(tokens, x_norm, prev, k_e, v_e, k_s.unsqueeze(1), v_s.unsqueeze(1))
        nxt = self.horizontal(states, s_norm, k_s, v_s, k_e, v_e)
        valid = torch.ones(tokens.shape[:2], dtype=torch.bool, device=tokens.device)
        return out, nxt, BlockKV(k_e, v_e, valid)

    def forward(self, x, prev: BlockKV, states):
        """Whole segment: the horizontal recurrence runs block by block, then the
        vertical direction runs for all blocks in one batched pass.

        Returns (out [B, N, d], last-block BlockKV, final states, per-block states).
        """
        B, N, _ = x.shape
        W = prev.keys.shape[1]
        if N % W:
            raise ConfigError(f"segment length {N} is not a multiple of window {W}")
        nb = N // W
        x_norm = self.ln_tokens(x)
        k_e, v_e = self.token_kv(x_norm)
        kb = k_e.view(B, nb, W, self.heads, self.head_dim)
        vb = v_e.view(B, nb, W, self.heads, self.head_dim)
        ks_all, vs_all, seq = [], [], [states]
        c = states
        for t in range(nb):
            s_norm, k_s, v_s = self.state_inputs(c)
            ks_all.append(k_s)
            vs_all.append(v_s)
            c = self.horizontal(c, s_norm, k_s, v_s, kb[:, t], vb[:, t])
            seq.append(c)
        out = self.vertical(x, x_norm, prev, k_e, v_e, torch.stack(ks_all, 1), torch.stack(vs_all, 1))
        valid = torch.ones(B, W, dtype=torch.bool, device=x.device)
        return out, BlockKV(kb[:, -1], vb[:, -1], valid), c, seq


def vertical_substep(tokens, states, prev: BlockKV, cell: RecurrentCellParams):
    """Token update of one block given current states."""
    x_norm = cell.ln_tokens(tokens)
    k_e, v_e = cell.token_kv(x_norm)
    _, k_s, v_s = cell.state_inputs(states)
    return cell.vertical(tokens, x_norm, prev, k_e, v_e, k_s.unsqueeze(1), v_s.unsqueeze(1))


def horizontal_substep(states, token_kv: BlockKV, cell: RecurrentCellParams, gate_config: str | None = None):
    """State update of one block given that block's token keys/values."""
    if gate_config is not None and gate_config != cell.gate_config:
        if gate_config not in GATE_CONFIGS:
            raise ConfigError(f"unknown gate config {gate_config!r}; expected one of {GATE_CONFIGS}")
        raise ConfigError(f"cell was built for {cell.gate_config!r}, not {gate_config!r}")
    s_norm, k_s, v_s = cell.state_inputs(states)
    return cell.horizontal(states, s_norm, k_s, v_s, token_kv.keys, token_kv.values)


def recurrent_cell_step(tokens, states, prev: BlockKV, cell: RecurrentCellParams, gate_config: str | None = None):
    if gate_config is not None and gate_config != cell.gate_config:
        raise ConfigError(f"cell was built for {cell.gate_config!r}, not {gate_config!r}")
    return cell.step(tokens, states, prev)
