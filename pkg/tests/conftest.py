import numpy as np
import pytest
import torch

from blockrec.model import BlockRecurrentLM, ModelConfig


# acceptance verdicts, filled by test_acceptance and printed after the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=256, d=16, num_layers=2, heads=2, head_dim=4, mlp_hidden=32,
                window=4, segment=8, num_states=3, recurrent_layers=[1],
                gate_type="fixed", gate_config="skip")
    base.update(kw)
    return ModelConfig(**base)


def toy_model(seed=0, **kw) -> BlockRecurrentLM:
    return BlockRecurrentLM(toy_config(**kw), seed=seed).double()


class UniformModel:
    """Zero logits everywhere: exactly log2(V) bits per token."""

    tokenizer = "bytes/256"

    def __init__(self, segment=8):
        self.segment_length = segment

    def init_caches(self, batch):
        return None

    def __call__(self, tokens, caches, reset=None):
        B, N = tokens.shape
        return torch.zeros(B, N, 256, dtype=torch.float64), None


class NGramModel:
    """Add-one smoothed byte bigram (order=2) or unigram (order=1) from a training string.

    Carries the previous byte across segments as its cache.
    """

    tokenizer = "bytes/256"

    def __init__(self, text: bytes, order: int, segment=8):
        self.order, self.segment_length = order, segment
        data = np.frombuffer(text, dtype=np.uint8).astype(int)
        if order == 1:
            c = np.bincount(data, minlength=256) + 1.0
            self.logp = np.log(c / c.sum())
        else:
            c = np.ones((256, 256))
            np.add.at(c, (data[:-1], data[1:]), 1.0)
            self.logp = np.log(c / c.sum(axis=1, keepdims=True))

    def prob(self, prev, nxt):
        return self.logp[nxt] if self.order == 1 else self.logp[prev, nxt]

    def init_caches(self, batch):
        return np.zeros(batch, dtype=int)

    def __call__(self, tokens, caches, reset=None):
        tokens = np.asarray(tokens)
        B, N = tokens.shape
        out = np.zeros((B, N, 256))
        for b in range(B):
            for i in range(N):
                tok = min(tokens[b, i], 255)
                out[b, i] = self.logp if self.order == 1 else self.logp[tok]
        return torch.as_tensor(out), tokens[:, -1].copy()
