"""Evaluation and analysis: bits per token, per-token CE diffs, cumulative CE
curves, state clearing, and a synthetic long-range recall task.

Any model with this interface can be evaluated:
    model.init_caches(batch) -> caches
    model(tokens [B, N], caches, reset [B]) -> (logits [B, N, V], caches)
    model.segment_length, model.tokenizer
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from blockrec.attention import ConfigError
from blockrec.data import DocumentStore, byte_tokenize, segment_stream

LN2 = math.log(2.0)
EXCERPT_BYTES = 60


def segment_length(model) -> int:
    return model.cfg.segment if hasattr(model, "cfg") else model.segment_length


def _tokenizer(model) -> str:
    return getattr(model, "tokenizer", "bytes/256")


@torch.no_grad()
def score_store(model, store: DocumentStore, batch: int = 1, seed: int = 0, shuffle: bool = False):
    """Per-document arrays of (nll_bits, argmax) indexed by target token position.

    Entry k refers to predicting token k from tokens < k; entry 0 is NaN / -1.
    """
    if len(store) == 0:
        raise ConfigError("document store is empty")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    N = segment_length(model)
    nll = [np.full(len(d), np.nan) for d in store.docs]
    pred = [np.full(len(d), -1, dtype=np.int64) for d in store.docs]
    caches = model.init_caches(batch)
    for seg in segment_stream(store, N, batch, seed, shuffle):
        logits, caches = model(torch.as_tensor(seg.tokens), caches, torch.as_tensor(seg.reset))
        logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
        tgt = torch.as_tensor(seg.targets).clamp(max=logits.shape[-1] - 1)
        bits = (-logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1) / LN2).numpy()
        am = logits.argmax(dim=-1).numpy()
        for b in range(batch):
            k = seg.doc_index[b]
            if k < 0:
                continue
            m = seg.mask[b]
            n = int(m.sum())
            pos = seg.offset[b] + 1
            nll[k][pos:pos + n] = bits[b, :n]
            pred[k][pos:pos + n] = am[b, :n]
    if was_training and hasattr(model, "train"):
        model.train()
    return nll, pred


def token_nll_bits(model, document) -> np.ndarray:
    tokens = document if isinstance(document, np.ndarray) else byte_tokenize(document)
    store = DocumentStore([bytes(tokens.astype(np.uint8).tolist())])
    return score_store(model, store)[0][0]


def bits_per_token_eval(model, store: DocumentStore, batch: int = 1, seed: int = 0, shuffle: bool = False) -> float:
    """Mean -log2 p(target) over every prediction target in the store."""
    nll, _ = score_store(model, store, batch, seed, shuffle)
    total = math.fsum(float(x) for a in nll for x in a[1:])
    count = sum(len(a) - 1 for a in nll)
    if count == 0:
        raise ConfigError("store has no prediction targets")
    return total / count


# --- per-token diffs ---------------------------------------------------------


@dataclass
class TokenDiffRecord:
    token_index: int
    nll_a: float
    nll_b: float
    excerpt: str

    @property
    def diff(self) -> float:
        return self.nll_b - self.nll_a

    def header(self) -> str:
        # float32 shortest repr, e.g. "(30555, 0.3696011, 12.688916)"
        return f"({self.token_index}, {str(np.float32(self.nll_a))}, {str(np.float32(self.nll_b))})"


def excerpt(document: bytes, index: int, width: int = EXCERPT_BYTES) -> str:
    """Text around byte ``index`` with that byte bracketed as |tok|."""
    def dec(b: bytes) -> str:
        return b.decode("utf-8", errors="replace").replace("\n", " ")

    lo, hi = max(0, index - width), min(len(document), index + 1 + width)
    return dec(document[lo:index]) + "|" + dec(document[index:index + 1]) + "|" + dec(document[index + 1:hi])


def token_ce_diffs(model_a, model_b, document) -> tuple[np.ndarray, np.ndarray]:
    if _tokenizer(model_a) != _tokenizer(model_b):
        raise ConfigError(f"tokenizer mismatch: {_tokenizer(model_a)} vs {_tokenizer(model_b)}")
    return token_nll_bits(model_a, document), token_nll_bits(model_b, document)


def token_ce_diff(model_a, model_b, document, top_k: int = 4) -> list[TokenDiffRecord]:
    """Tokens where model_a beats model_b by the widest margin (nll_b - nll_a),
    descending, ties broken by lower index."""
    doc = document if isinstance(document, bytes) else bytes(np.asarray(document, dtype=np.uint8).tolist())
    a, b = token_ce_diffs(model_a, model_b, doc)
    return top_diff_records(doc, a, b, top_k)


def top_diff_records(doc: bytes, nll_a: np.ndarray, nll_b: np.ndarray, top_k: int) -> list[TokenDiffRecord]:
    diff = nll_b[1:] - nll_a[1:]
    idx = np.arange(1, len(doc))
    order = np.lexsort((idx, -diff))[:top_k]
    return [TokenDiffRecord(int(idx[i]), float(nll_a[idx[i]]), float(nll_b[idx[i]]), excerpt(doc, int(idx[i])))
            for i in order]


def write_topk_report(path: str | Path, records: list[TokenDiffRecord], title: str = "") -> None:
    lines = [title, ""] if title else []
    for r in records:
        lines += [r.header(), r.excerpt, ""]
    Path(path).write_text("\n".join(lines))


def write_diff_csv(path: str | Path, nll_a: np.ndarray, nll_b: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["token_index", "nll_a_bits", "nll_b_bits", "diff_bits"])
        for k in range(1, len(nll_a)):
            w.writerow([k, f"{nll_a[k]:.7g}", f"{nll_b[k]:.7g}", f"{nll_b[k] - nll_a[k]:.7g}"])


# --- cumulative CE ------------------------------------------------------------


def cumulative_ce_curve(model, store: DocumentStore, batch: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(position, mean bits over all tokens at positions <= position, documents at that length)."""
    nll, _ = score_store(model, store, batch)
    return cumulative_curve_from_nll(nll)


def cumulative_curve_from_nll(nll: list[np.ndarray]):
    length = max(len(a) for a in nll)
    total = np.zeros(length)
    count = np.zeros(length, dtype=np.int64)
    for a in nll:
        total[1:len(a)] += a[1:]
        count[1:len(a)] += 1
    pos = np.arange(1, length)
    curve = np.cumsum(total[1:]) / np.cumsum(count[1:])
    return pos, curve, count[1:]


def write_curve_csv(path: str | Path, pos, curve, docs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "cumulative_bits", "documents_at_length"])
        for p, c, n in zip(pos, curve, docs):
            w.writerow([int(p), f"{c:.7g}", int(n)])


# --- state clearing ------------------------------------------------------------


def state_clearing_eval(model, document, clear_kv: bool = False) -> np.ndarray:
    """NLL(cleared) - NLL(carried) per token, in bits.

    The cleared run re-initialises every recurrent state at each segment
    boundary; with ``clear_kv`` it also drops the key/value caches.
    """
    if not getattr(model, "cfg", None) or not model.cfg.recurrent_layers:
        raise ConfigError("state clearing needs a model with at least one recurrent layer")
    tokens = document if isinstance(document, np.ndarray) else byte_tokenize(document)
    carried = token_nll_bits(model, tokens)
    if clear_kv:
        cleared = _nll_with_reset_every_segment(model, tokens)
    else:
        model.clear_states_each_segment = True
        try:
            cleared = token_nll_bits(model, tokens)
        finally:
            model.clear_states_each_segment = False
    return cleared - carried


@torch.no_grad()
def _nll_with_reset_every_segment(model, tokens: np.ndarray) -> np.ndarray:
    N = segment_length(model)
    store = DocumentStore([bytes(tokens[i:i + N + 1].astype(np.uint8).tolist()) for i in range(0, len(tokens), N)])
    out = np.full(len(tokens), np.nan)
    for j, a in enumerate(score_store(model, store)[0]):
        out[j * N + 1:j * N + len(a)] = a[1:]
    return out


# --- synthetic recall task ---------------------------------------------------

KEY_MARK, VAL_MARK, QUERY_MARK = ord("#"), ord("="), ord("?")


@dataclass
class RecallTaskSpec:
    """Documents of filler with embedded "#K=v" pairs, each later queried as "?Kv".

    Distance is measured from the stored value to the answer. Keys are
    upper-case letters, values digits/letters, filler lower-case letters.
    """

    num_docs: int = 64
    seq_len: int = 2048
    num_pairs: int = 2
    key_alphabet: int = 16
    value_alphabet: int = 8
    d_min: int = 512
    d_max: int = 1024
    filler_alphabet: int = 16

    def validate(self):
        if self.d_max >= self.seq_len:
            raise ConfigError(f"d_max={self.d_max} must be below seq_len={self.seq_len}")
        if not 1 <= self.d_min <= self.d_max:
            raise ConfigError("need 1 <= d_min <= d_max")
        if self.num_pairs > self.key_alphabet:
            raise ConfigError("num_pairs exceeds key alphabet (keys are distinct per document)")
        if not (1 <= self.key_alphabet <= 26 and 1 <= self.value_alphabet <= 26 and 1 <= self.filler_alphabet <= 26):
            raise ConfigError("alphabets must have between 1 and 26 symbols")


@dataclass
class Retrieval:
    answer: int       # position of the value token following "?K"
    source: int       # position of the value in "#K=v"
    key: int
    value: int

    @property
    def distance(self) -> int:
        return self.answer - self.source


def gen_recall_task(spec: RecallTaskSpec, rng: np.random.Generator | int = 0) -> DocumentStore:
    spec.validate()
    rng = np.random.default_rng(rng)
    keys = np.frombuffer(b"ABCDEFGHIJKLMNOPQRSTUVWXYZ", dtype=np.uint8)
    values = np.frombuffer(b"0123456789!$%&*+<>@^~|:;/(", dtype=np.uint8)
    filler = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    docs, retrievals = [], []
    for _ in range(spec.num_docs):
        doc = filler[rng.integers(0, spec.filler_alphabet, spec.seq_len)].copy()
        used = np.zeros(spec.seq_len, dtype=bool)
        ks = rng.choice(spec.key_alphabet, spec.num_pairs, replace=False)
        rets = []
        for key in ks:
            for _attempt in range(1000):
                d = int(rng.integers(spec.d_min, spec.d_max + 1))
                src = int(rng.integers(3, spec.seq_len - d))
                ans = src + d
                write = slice(src - 3, src + 1)  # "#K=v"
                read = slice(ans - 2, ans + 1)   # "?Kv"
                if ans - 2 <= src or used[write].any() or used[read].any():
                    continue
                value = int(rng.integers(spec.value_alphabet))
                doc[write] = [KEY_MARK, keys[key], VAL_MARK, values[value]]
                doc[read] = [QUERY_MARK, keys[key], values[value]]
                used[write] = used[read] = True
                rets.append(Retrieval(ans, src, int(keys[key]), int(values[value])))
                break
            else:
                raise ConfigError("could not place all pairs; lower num_pairs or widen seq_len")
        docs.append(doc.tobytes())
        retrievals.append(sorted(rets, key=lambda r: r.answer))
    return DocumentStore(docs, meta={"retrievals": retrievals, "spec": spec,
                                     "chance": 1.0 / spec.value_alphabet})


def retrieval_accuracy(model, store: DocumentStore, batch: int = 8, min_distance: int = 0) -> tuple[float, int]:
    """Fraction of retrieval positions whose argmax prediction is the stored value."""
    _, pred = score_store(model, store, batch)
    hits = total = 0
    for p, rets in zip(pred, store.meta["retrievals"]):
        for r in rets:
            if r.distance < min_distance:
                continue
            total += 1
            hits += int(p[r.answer] == r.value)
    return (hits / total if total else float("nan")), total


def chance_band(chance: float, n: int, k: float = 3.0) -> tuple[float, float]:
    se = math.sqrt(chance * (1 - chance) / n)
    return chance - k * se, chance + k * se


def spike_fraction(diffs: np.ndarray, retrievals: list[Retrieval], segment: int, threshold: float = 1.0) -> tuple[float, int]:
    """Share of retrievals whose source lies in an earlier segment and whose
    cleared-minus-carried NLL exceeds ``threshold`` bits."""
    eligible = [r for r in retrievals if r.source // segment < r.answer // segment]
    if not eligible:
        return float("nan"), 0
    hits = sum(int(diffs[r.answer] > threshold) for r in eligible)
    return hits / len(eligible), len(eligible)
