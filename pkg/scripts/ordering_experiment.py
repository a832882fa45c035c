"""Bits-per-byte ordering of recurrent, sliding and XL models on a byte corpus.

Trains rec-fixed-skip, slide13 (L+1 layers) and xl (N = W) at the tiny
preset with matched tokens per step, then scores held-out documents.

    python scripts/fetch_corpus.py data/corpus
    python scripts/ordering_experiment.py --corpus data/corpus --steps 20000

Before training it times a few steps of each model and refuses to start when
the projected runtime exceeds the budget, unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from blockrec.data import DocumentStore, training_stream
from blockrec.evalsuite import bits_per_token_eval
from blockrec.model import BlockRecurrentLM, preset_config
from blockrec.optim import Adafactor, ScheduleConfig, fit, train_step

HELDOUT = ("shksprdata__tempest_gut.txt", "shksprdata__twelfth_night_gut.txt", "shksprdata__winters_tale_gut.txt")
MODELS = ("rec-fixed-skip", "slide13", "xl")


@dataclass
class OrderingRecipe:
    corpus: str = "data/corpus"
    steps: int = 20_000
    seeds: tuple[int, ...] = (0, 1, 2)
    batch: int = 4                  # at N = 256; xl runs batch * N / W streams
    heldout: tuple[str, ...] = HELDOUT
    min_gap: float = 0.01
    budget_hours: float = 3.0
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(base_rate=1.0, warmup_steps=1000))


def split_corpus(recipe: OrderingRecipe) -> tuple[DocumentStore, DocumentStore]:
    full = DocumentStore.from_directory(recipe.corpus)
    test = [d for d, i in zip(full.docs, full.ids) if i in recipe.heldout]
    train = [d for d, i in zip(full.docs, full.ids) if i not in recipe.heldout]
    if len(test) != len(recipe.heldout):
        raise FileNotFoundError(f"held-out documents missing from {recipe.corpus}")
    return DocumentStore(train), DocumentStore(test, split="test")


def _model_and_batch(name: str, recipe: OrderingRecipe, seed: int):
    cfg = preset_config(name, "tiny")
    batch = recipe.batch * preset_config("rec-fixed-skip", "tiny").segment // cfg.segment
    return BlockRecurrentLM(cfg, seed=seed), batch


def time_per_step(name: str, recipe: OrderingRecipe, train: DocumentStore, steps: int = 6) -> float:
    model, batch = _model_and_batch(name, recipe, 0)
    stream = training_stream(train, model.cfg.segment, batch, 0)
    opt, caches = Adafactor(model), model.init_caches(batch)
    _, caches, _ = train_step(model, opt, next(stream), caches, recipe.schedule, 1)
    t0 = time.perf_counter()
    for s in range(steps):
        _, caches, _ = train_step(model, opt, next(stream), caches, recipe.schedule, s + 2)
    return (time.perf_counter() - t0) / steps


def projected_hours(recipe: OrderingRecipe, train: DocumentStore) -> dict[str, float]:
    per_step = {m: time_per_step(m, recipe, train) for m in MODELS}
    total = sum(per_step.values()) * recipe.steps * len(recipe.seeds) / 3600
    return {"seconds_per_step": per_step, "projected_hours": total}


def run_ordering_experiment(recipe: OrderingRecipe, out: Path | None = None, force: bool = False,
                            verbose: bool = False) -> dict:
    train, test = split_corpus(recipe)
    plan = projected_hours(recipe, train)
    result = {"recipe": asdict(recipe), **plan, "train_bytes": sum(map(len, train.docs)),
              "test_bytes": sum(map(len, test.docs)), "ran": False}
    if verbose:
        print(json.dumps(plan))
    if plan["projected_hours"] > recipe.budget_hours and not force:
        result.update(ordered_seeds=0, summary=(
            f"projected {plan['projected_hours']:.1f} h for {len(recipe.seeds)} seeds x {recipe.steps} steps "
            f"exceeds the {recipe.budget_hours:.0f} h budget; not run"))
        return result
    bpb = {}
    for seed in recipe.seeds:
        for name in MODELS:
            torch.manual_seed(seed)
            model, batch = _model_and_batch(name, recipe, seed)
            t0 = time.time()
            fit(model, training_stream(train, model.cfg.segment, batch, seed), recipe.steps, recipe.schedule)
            bpb[f"{name}/{seed}"] = bits_per_token_eval(model, test, batch=len(test))
            if verbose:
                print(f"seed {seed} {name}: {bpb[f'{name}/{seed}']:.4f} bits/byte ({time.time() - t0:.0f}s)", flush=True)
    ordered = 0
    for seed in recipe.seeds:
        r, s, x = (bpb[f"{m}/{seed}"] for m in MODELS)
        ordered += int(s - r >= recipe.min_gap and x - s >= recipe.min_gap)
    result.update(ran=True, bits_per_byte=bpb, ordered_seeds=ordered,
                  summary=", ".join(f"{k} {v:.3f}" for k, v in bpb.items()))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ordering.json").write_text(json.dumps(result, indent=1, default=str))
    return result


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--corpus", default="data/corpus")
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--out", default="runs/ordering")
    ap.add_argument("--force", action="store_true", help="train even when over the runtime budget")
    a = ap.parse_args()
    recipe = OrderingRecipe(corpus=a.corpus, steps=a.steps, seeds=tuple(a.seeds), batch=a.batch)
    res = run_ordering_experiment(recipe, Path(a.out), force=a.force, verbose=True)
    print(res["summary"])
    print(f"ordering rec < slide < xl (gap >= {recipe.min_gap}) held on {res['ordered_seeds']}/{len(recipe.seeds)} seeds")


if __name__ == "__main__":
    main()
