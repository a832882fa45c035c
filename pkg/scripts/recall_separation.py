"""Long-range recall: recurrent model vs a cost-matched sliding-window baseline.

Both models train on synthetic key/value documents, then answer queries
whose stored value lies 4*W*L to 8*W*L tokens back. A non-recurrent model
cannot see that far (its receptive field is W*L), so it should sit at
chance; the recurrent one has to carry the binding in its state.

Training loss is restricted to answer positions. Every other token in the
task is either constant filler or uniformly random, so it only adds noise.

    python scripts/recall_separation.py --out runs/recall
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from blockrec.data import DocumentStore, training_stream
from blockrec.evalsuite import RecallTaskSpec, chance_band, gen_recall_task, retrieval_accuracy
from blockrec.model import BlockRecurrentLM, preset_config, save_checkpoint
from blockrec.optim import Adafactor, ScheduleConfig, fit


@dataclass
class Stage:
    steps: int          # cumulative step at which the stage ends
    seq_len: int
    d_min: int
    d_max: int
    num_pairs: int
    num_docs: int


@dataclass
class RecallRecipe:
    model: str = "rec-fixed-skip"
    baseline: str = "slide13"            # L+1 sliding layers: same cost, no recurrence
    batch: int = 4
    key_alphabet: int = 8
    value_alphabet: int = 8
    filler_alphabet: int = 1
    stages: list[Stage] = field(default_factory=lambda: [
        # every pair inside one segment so the gradient reaches the write;
        # evaluation then asks the state to hold bindings across segments
        Stage(12000, 256, 8, 250, 6, 4000),
    ])
    baseline_steps: int = 1500
    rec_minutes: float = 45.0
    eval_seq_len: int = 1100
    eval_docs: int = 200
    eval_pairs: int = 2
    valid_docs: int = 48
    eval_every: int = 500
    target: float = 0.9
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(base_rate=1.0, warmup_steps=200))

    @property
    def long_range(self) -> tuple[int, int]:
        cfg = preset_config(self.model, "tiny")
        trf = cfg.window * cfg.num_layers
        return 4 * trf, 8 * trf


def _spec(recipe: RecallRecipe, **kw) -> RecallTaskSpec:
    return RecallTaskSpec(key_alphabet=recipe.key_alphabet, value_alphabet=recipe.value_alphabet,
                          filler_alphabet=recipe.filler_alphabet, **kw)


def answer_only(stream, store: DocumentStore):
    """Mask every target except the values that answer a query."""
    answers = [np.array([r.answer for r in rs]) for rs in store.meta["retrievals"]]
    for seg in stream:
        keep = np.zeros_like(seg.mask)
        for b, k in enumerate(seg.doc_index):
            if k < 0:
                continue
            rel = answers[k] - 1 - int(seg.offset[b])    # targets[t] is token t + 1
            keep[b, rel[(rel >= 0) & (rel < keep.shape[1])]] = True
        seg.mask = seg.mask & keep
        yield seg


def train_on_stages(model, recipe: RecallRecipe, stages, tests: dict, log, deadline: float | None = None):
    opt, done, history = Adafactor(model), 0, []

    def evaluate(step, loss, m):
        if step % recipe.eval_every == 0:
            acc = {name: retrieval_accuracy(m, st, batch=8)[0] for name, st in tests.items()}
            history.append(dict(step=step, loss=loss, **acc))
            log(f"  step {step:5d} loss {loss:.3f} " + " ".join(f"{k} {v:.3f}" for k, v in acc.items()))
            if acc.get("long", 0.0) >= recipe.target:
                return True
        return deadline is not None and time.time() > deadline

    for i, st in enumerate(stages):
        if done >= st.steps:
            continue
        store = gen_recall_task(_spec(recipe, num_docs=st.num_docs, seq_len=st.seq_len, num_pairs=st.num_pairs,
                                      d_min=st.d_min, d_max=st.d_max), recipe.seed * 100 + i + 1)
        stream = answer_only(training_stream(store, model.cfg.segment, recipe.batch, recipe.seed + i), store)
        wanted = st.steps - done
        losses, opt, _ = fit(model, stream, wanted, recipe.schedule, callback=evaluate, start_step=done + 1, opt=opt)
        done += len(losses)
        if len(losses) < wanted:   # stopped early: target reached or out of time
            break
    return done, history


def run_recall_experiment(recipe: RecallRecipe, out: Path | None = None, verbose: bool = False) -> dict:
    log = print if verbose else (lambda *_: None)
    t0 = time.time()
    lo, hi = recipe.long_range
    kw = dict(seq_len=recipe.eval_seq_len, num_pairs=recipe.eval_pairs)
    tests = {
        "short": gen_recall_task(_spec(recipe, num_docs=32, d_min=8, d_max=100, **kw), 9001),
        "long": gen_recall_task(_spec(recipe, num_docs=recipe.eval_docs, d_min=lo, d_max=hi, **kw), 9002),
    }
    # early stopping watches held-out validation sets, never the final test set
    valid = {
        "short": gen_recall_task(_spec(recipe, num_docs=16, d_min=8, d_max=100, **kw), 8001),
        "long": gen_recall_task(_spec(recipe, num_docs=recipe.valid_docs, d_min=lo, d_max=hi, **kw), 8002),
    }
    torch.manual_seed(recipe.seed)
    rec = BlockRecurrentLM(preset_config(recipe.model, "tiny"), seed=recipe.seed)
    log(f"{recipe.model}: training (long range d in [{lo}, {hi}])")
    rec_steps, rec_hist = train_on_stages(rec, recipe, recipe.stages, valid, log, deadline=t0 + recipe.rec_minutes * 60)
    rec_long, n_long = retrieval_accuracy(rec, tests["long"])
    rec_short, _ = retrieval_accuracy(rec, tests["short"])

    torch.manual_seed(recipe.seed)
    base = BlockRecurrentLM(preset_config(recipe.baseline, "tiny"), seed=recipe.seed)
    log(f"{recipe.baseline}: training")
    first = recipe.stages[0]
    base_stages = [Stage(recipe.baseline_steps, first.seq_len, first.d_min, first.d_max, first.num_pairs, first.num_docs)]
    base_steps, base_hist = train_on_stages(base, recipe, base_stages, {"short": valid["short"]}, log)
    base_long, _ = retrieval_accuracy(base, tests["long"])
    base_short, _ = retrieval_accuracy(base, tests["short"])

    chance = tests["long"].meta["chance"]
    spike_store = gen_recall_task(_spec(recipe, num_docs=8, seq_len=recipe.eval_seq_len, num_pairs=4,
                                        d_min=lo // 2, d_max=hi), 9003)
    result = dict(
        recipe=asdict(recipe), long_range=[lo, hi], n_long=n_long, chance=chance,
        baseline_band=list(chance_band(chance, n_long)),
        rec_steps=rec_steps, rec_long_acc=rec_long, rec_short_acc=rec_short, rec_history=rec_hist,
        baseline_steps=base_steps, baseline_long_acc=base_long, baseline_short_acc=base_short,
        minutes=(time.time() - t0) / 60,
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "recall.json").write_text(json.dumps(result, indent=1, default=str))
        save_checkpoint(rec, out / "recurrent", extra={"seed": recipe.seed, "step": rec_steps})
        save_checkpoint(base, out / "baseline", extra={"seed": recipe.seed, "step": base_steps})
    log(f"long-range accuracy: {recipe.model} {rec_long:.3f}, {recipe.baseline} {base_long:.3f} "
        f"(chance {chance:.3f}, n={n_long}); short-range control: {rec_short:.3f} / {base_short:.3f}; "
        f"{result['minutes']:.1f} min")
    return {**result, "rec_model": rec, "baseline_model": base, "spike_store": spike_store}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/recall")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    run_recall_experiment(RecallRecipe(seed=a.seed), Path(a.out), verbose=True)


if __name__ == "__main__":
    main()
