"""Layer stack, per-layer caches, segment forward pass and cost accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from blockrec.attention import (
    BlockKV,
    ConfigError,
    QKNorm,
    RelPosBias,
    cross_attention,
    sliding_score_count,
    tiled_sliding_attention,
)
from blockrec.reccell import GATE_CONFIGS, GATE_TYPES, MLP, Dense, LayerNorm, RecurrentCellParams, truncated_normal


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d: int = 128
    num_layers: int = 4
    heads: int = 4
    head_dim: int = 32
    mlp_hidden: int = 512
    window: int = 32
    segment: int = 256
    num_states: int = 32
    recurrent_layers: list[int] = field(default_factory=lambda: [3])
    gate_type: str = "fixed"
    gate_config: str = "skip"
    feedback: bool = False
    dropout: float = 0.0
    num_buckets: int = 32
    max_distance: int = 128
    preset: str = "custom"

    def __post_init__(self):
        self.recurrent_layers = sorted(int(i) for i in self.recurrent_layers)
        self.validate()

    def validate(self):
        if self.window < 1 or self.segment < 1:
            raise ConfigError("window and segment must be positive")
        if self.segment % self.window != 0:
            raise ConfigError(
                f"segment length N={self.segment} is not divisible by window W={self.window}"
            )
        bad = [i for i in self.recurrent_layers if not 0 <= i < self.num_layers]
        if bad:
            raise ConfigError(f"recurrent layer indices {bad} outside [0, {self.num_layers})")
        if self.num_states < 1:
            raise ConfigError("num_states must be >= 1")
        if self.gate_type not in GATE_TYPES:
            raise ConfigError(f"unknown gate type {self.gate_type!r}")
        if self.gate_config not in GATE_CONFIGS:
            raise ConfigError(f"unknown gate config {self.gate_config!r}")
        if self.feedback and not self.recurrent_layers:
            raise ConfigError("feedback needs at least one recurrent layer")

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    @property
    def blocks_per_segment(self) -> int:
        return self.segment // self.window

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# Paper-scale shapes: 12 layers, d=1024, 8 heads of 128, MLP 4096, W=S=512, N=4096.
PAPER_DIMS = dict(d=1024, num_layers=12, heads=8, head_dim=128, mlp_hidden=4096,
                  window=512, segment=4096, num_states=512)
TINY_DIMS = dict(d=128, num_layers=4, heads=4, head_dim=32, mlp_hidden=512,
                 window=32, segment=256, num_states=32)


def _presets() -> dict[str, dict]:
    out: dict[str, dict] = {
        "xl": dict(segment=512, recurrent_layers=[]),
        "slide12": dict(recurrent_layers=[]),
        "slide13": dict(num_layers=13, recurrent_layers=[]),
    }
    for gt in GATE_TYPES:
        for gc in GATE_CONFIGS:
            out[f"rec-{gt}-{gc}"] = dict(recurrent_layers=[10], gate_type=gt, gate_config=gc)
            out[f"feedback-{gt}-{gc}"] = dict(recurrent_layers=[10], gate_type=gt, gate_config=gc, feedback=True)
    return out


PRESETS = _presets()


def preset_config(name: str, scale: str = "paper", **overrides) -> ModelConfig:
    """Model taxonomy presets at paper scale or the desk-scale ``tiny`` dims.

    At tiny scale, recurrence sits on layer 3 of 4, slide13 becomes L+1 = 5
    layers, and xl uses N = W.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    if scale not in ("paper", "tiny"):
        raise ConfigError(f"unknown scale {scale!r}; expected 'paper' or 'tiny'")
    kw = dict(PAPER_DIMS if scale == "paper" else TINY_DIMS)
    spec = dict(PRESETS[name])
    if scale == "tiny":
        if spec.get("recurrent_layers"):
            spec["recurrent_layers"] = [TINY_DIMS["num_layers"] - 1]
        if "num_layers" in spec:
            spec["num_layers"] = TINY_DIMS["num_layers"] + 1
    kw.update(spec)
    kw.update(overrides)
    if name == "xl" and "segment" not in overrides:
        kw["segment"] = kw["window"]
    kw["preset"] = name
    return ModelConfig(**kw)


# --- layers -----------------------------------------------------------------


class SlidingLayer(nn.Module):
    """Pre-norm sliding-window transformer layer; optionally cross-attends to
    fed-back recurrent states."""

    def __init__(self, cfg: ModelConfig, feedback: bool = False, generator=None):
        super().__init__()
        g = generator
        hd = cfg.heads * cfg.head_dim
        self.heads, self.head_dim, self.dropout = cfg.heads, cfg.head_dim, cfg.dropout
        self.ln = LayerNorm(cfg.d)
        self.qkv = Dense(cfg.d, 3 * hd, bias=False, generator=g)
        self.rel_bias = RelPosBias(cfg.heads, cfg.num_buckets, cfg.max_distance)
        self.qkn = QKNorm(cfg.heads, cfg.head_dim)
        self.feedback = feedback
        if feedback:
            self.q_state = Dense(cfg.d, hd, bias=False, generator=g)
            self.qkn_state = QKNorm(cfg.heads, cfg.head_dim)
        self.proj = Dense((2 if feedback else 1) * hd, cfg.d, generator=g)
        self.ln_mlp = LayerNorm(cfg.d)
        self.mlp = MLP(cfg.d, cfg.mlp_hidden, generator=g)

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.head_dim)

    def forward(self, x, prev: BlockKV, state_kv=None):
        """x [B, T, d] -> (y, last-block BlockKV). state_kv: (K_s, V_s) [B, T/W, S, H, D]."""
        B, T, _ = x.shape
        W = prev.keys.shape[1]
        xn = self.ln(x)
        q, k, v = (self._heads(t) for t in self.qkv(xn).chunk(3, dim=-1))
        training = self.training and self.dropout > 0
        att = tiled_sliding_attention(q, prev, k, v, self.rel_bias, self.qkn, self.dropout, training)
        parts = [att.reshape(B, T, -1)]
        if self.feedback:
            k_s, v_s = state_kv
            qs = self._heads(self.q_state(xn)).view(B, T // W, W, self.heads, self.head_dim)
            parts.append(cross_attention(qs, k_s, v_s, self.qkn_state, self.dropout, training).reshape(B, T, -1))
        y = x + self.proj(torch.cat(parts, dim=-1))
        y = y + self.mlp(self.ln_mlp(y), self.dropout, self.training)
        valid = torch.ones(B, W, dtype=torch.bool, device=x.device)
        return y, BlockKV(k[:, -W:], v[:, -W:], valid)


# --- caches -----------------------------------------------------------------


@dataclass
class LayerCache:
    """Non-differentiable carry-over for one layer."""

    kv: BlockKV
    states: torch.Tensor | None = None

    def detach(self) -> "LayerCache":
        return LayerCache(self.kv.detach(), None if self.states is None else self.states.detach())


def detach_caches(caches: list[LayerCache]) -> list[LayerCache]:
    return [c.detach() for c in caches]


# --- model ------------------------------------------------------------------


class BlockRecurrentLM(nn.Module):
    """Byte-level language model: sliding-window layers plus recurrent layer(s).

    The embedding has vocab_size + 1 rows (the last is the pad id); output
    logits cover the vocab_size real tokens and are tied to the embedding.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        self.embed = nn.Parameter(truncated_normal((cfg.vocab_size + 1, cfg.d), 0.02, g))
        layers = []
        for i in range(cfg.num_layers):
            if i in cfg.recurrent_layers:
                layers.append(RecurrentCellParams(
                    cfg.d, cfg.heads, cfg.head_dim, cfg.mlp_hidden, cfg.num_states,
                    cfg.gate_type, cfg.gate_config, cfg.num_buckets, cfg.max_distance, cfg.dropout, g,
                ))
            else:
                layers.append(SlidingLayer(cfg, feedback=cfg.feedback, generator=g))
        self.layers = nn.ModuleList(layers)
        self.ln_out = LayerNorm(cfg.d)
        self.clear_states_each_segment = False

    @property
    def tokenizer(self) -> str:
        return f"bytes/{self.cfg.vocab_size}"

    @property
    def feedback_layer(self) -> int | None:
        return self.cfg.recurrent_layers[-1] if self.cfg.feedback else None

    def is_recurrent(self, i: int) -> bool:
        return isinstance(self.layers[i], RecurrentCellParams)

    def init_caches(self, batch: int) -> list[LayerCache]:
        cfg = self.cfg
        dtype = self.embed.dtype
        caches = []
        for i, layer in enumerate(self.layers):
            kv = BlockKV.empty(batch, cfg.window, cfg.heads, cfg.head_dim, dtype)
            states = None
            if self.is_recurrent(i):
                states = layer.initial_state.detach().expand(batch, -1, -1).clone()
            caches.append(LayerCache(kv, states))
        return caches

    def _apply_reset(self, caches, reset):
        if reset is None:
            return caches
        reset = torch.as_tensor(reset, dtype=torch.bool)
        out = []
        for i, c in enumerate(caches):
            kv = BlockKV(c.kv.keys, c.kv.values, c.kv.valid & ~reset[:, None])
            states = c.states
            if states is not None:
                init = self.layers[i].initial_state.expand_as(states)
                states = torch.where(reset[:, None, None], init, states)
            out.append(LayerCache(kv, states))
        return out

    def _check_caches(self, caches, batch):
        if len(caches) != len(self.layers):
            raise ConfigError(f"{len(caches)} caches for {len(self.layers)} layers")
        for i, c in enumerate(caches):
            if c.kv.keys.shape != (batch, self.cfg.window, self.cfg.heads, self.cfg.head_dim):
                raise ConfigError(f"cache of layer {i} has shape {tuple(c.kv.keys.shape)}")
            if self.is_recurrent(i) != (c.states is not None):
                raise ConfigError(f"cache of layer {i} does not match its layer type")

    def logits_from_hidden(self, x):
        return self.ln_out(x) @ self.embed[: self.cfg.vocab_size].T

    def forward(self, tokens, caches, reset=None, return_states: bool = False):
        """Process one segment: tokens [B, N] -> (logits [B, N, V], new detached caches)."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        B, N = tokens.shape
        if N % self.cfg.window:
            raise ConfigError(f"segment length {N} is not divisible by window {self.cfg.window}")
        self._check_caches(caches, B)
        caches = self._apply_reset(caches, reset)
        if self.clear_states_each_segment:
            caches = [
                c if c.states is None else LayerCache(c.kv, self.layers[i].initial_state.expand_as(c.states))
                for i, c in enumerate(caches)
            ]
        x = self.embed[tokens]
        if self.cfg.feedback:
            x, new = self._forward_feedback(x, caches)
        else:
            new = []
            for layer, cache in zip(self.layers, caches):
                if isinstance(layer, RecurrentCellParams):
                    x, kv, c, _ = layer(x, cache.kv, cache.states)
                    new.append(LayerCache(kv, c))
                else:
                    x, kv = layer(x, cache.kv)
                    new.append(LayerCache(kv))
        return self.logits_from_hidden(x), detach_caches(new)

    def _forward_feedback(self, x, caches):
        # block by block through the whole stack: every layer at block t
        # cross-attends to the feedback layer's state after block t-1
        W = self.cfg.window
        fb = self.feedback_layer
        fb_cell = self.layers[fb]
        prevs = [c.kv for c in caches]
        states = [c.states for c in caches]
        outs = []
        for t in range(x.shape[1] // W):
            h = x[:, t * W:(t + 1) * W]
            _, k_s, v_s = fb_cell.state_inputs(states[fb])
            skv = (k_s.unsqueeze(1), v_s.unsqueeze(1))
            for i, layer in enumerate(self.layers):
                if isinstance(layer, RecurrentCellParams):
                    h, states[i], prevs[i] = layer.step(h, states[i], prevs[i])
                else:
                    h, prevs[i] = layer(h, prevs[i], skv)
            outs.append(h)
        new = [LayerCache(kv, s) for kv, s in zip(prevs, states)]
        return torch.cat(outs, dim=1), new

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forward_segment(model: BlockRecurrentLM, tokens, caches, reset=None):
    return model(tokens, caches, reset)


def init_caches(model: BlockRecurrentLM, batch: int) -> list[LayerCache]:
    return model.init_caches(batch)


# --- cost accounting --------------------------------------------------------


def attention_score_count(cfg: ModelConfig) -> dict[str, int]:
    """Attention scores per segment for one sliding layer and one recurrent layer."""
    W, S, N = cfg.window, cfg.num_states, cfg.segment
    return {
        "sliding": sliding_score_count(N, W),
        "recurrent": (2 * W * W + S * S + 2 * S * W) * (N // W),
    }


def count_parameters(cfg: ModelConfig) -> int:
    """Parameter count without allocating the weights."""
    with torch.device("meta"):
        return BlockRecurrentLM(cfg).num_parameters()


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model: nn.Module, directory: str | Path, extra: dict | None = None) -> Path:
    """Write manifest.json (name -> shape, dtype, offset, nbytes) and params.bin."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as f:
        for name, t in model.state_dict().items():
            a = t.detach().cpu().numpy()
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(a).tobytes()
            entries.append(dict(name=name, shape=list(a.shape), dtype=a.dtype.str, offset=offset, nbytes=len(raw)))
            f.write(raw)
            offset += len(raw)
    manifest = dict(format="blockrec-checkpoint-v1", params=entries)
    if isinstance(model, BlockRecurrentLM):
        manifest["config"] = asdict(model.cfg)
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory: str | Path, model: nn.Module | None = None) -> nn.Module:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    fresh = model is None
    if fresh:
        model = BlockRecurrentLM(ModelConfig(**manifest["config"]))
    blob = (directory / "params.bin").read_bytes()
    state = {}
    for e in manifest["params"]:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("="), copy=True))
    if fresh:
        dtypes = {t.dtype for t in state.values() if t.is_floating_point()}
        if len(dtypes) == 1:
            model = model.to(dtypes.pop())
    model.load_state_dict(state)
    return model
