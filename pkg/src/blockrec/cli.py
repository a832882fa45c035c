"""Command-line entry points.

    blockrec train      --preset rec-fixed-skip --override scale=tiny --out runs/a
    blockrec eval       --checkpoint runs/a/checkpoint --data valid.txt
    blockrec diff       --checkpoint runs/a/checkpoint --checkpoint-b runs/b/checkpoint --document doc.txt
    blockrec curve      --checkpoint runs/a/checkpoint --data valid.txt
    blockrec clearstate --checkpoint runs/a/checkpoint --document doc.txt
    blockrec gentask    --config task.yaml --out data/recall
    blockrec gradcheck

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from blockrec.attention import ConfigError
from blockrec.data import DEFAULT_SEPARATOR, DocumentStore, training_stream
from blockrec.diffengine import NumericalError
from blockrec.model import BlockRecurrentLM, ModelConfig, load_checkpoint, preset_config, save_checkpoint
from blockrec.optim import ScheduleConfig, fit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"preset"}
SCHEDULE_KEYS = {f.name for f in fields(ScheduleConfig)}


@dataclass
class DataConfig:
    train: str | None = None
    eval: str | None = None
    separator: str = DEFAULT_SEPARATOR.decode()
    recall: dict | None = None   # RecallTaskSpec fields; used when train is unset


@dataclass
class RunConfig:
    preset: str = "rec-fixed-skip"
    scale: str = "tiny"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    steps: int = 1000
    batch: int = 4
    checkpoint_every: int = 0
    log_every: int = 1
    out: str = "runs/default"

    def validate(self):
        self.model.validate()
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"].pop("preset")
        return d


TOP_KEYS = {f.name for f in fields(RunConfig)}
DATA_KEYS = {f.name for f in fields(DataConfig)}


def _check_keys(section: str, got: dict, allowed: set[str]):
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def _parse_value(text: str):
    return yaml.safe_load(text)


def _apply_override(raw: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] in MODEL_KEYS and parts[0] not in TOP_KEYS:
        parts = ["model", parts[0]]
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-section")
    node[parts[-1]] = _parse_value(value)


def build_run_config(raw: dict) -> RunConfig:
    """Expand the preset, then apply model overrides; reject unknown keys everywhere."""
    raw = dict(raw or {})
    _check_keys("config", raw, TOP_KEYS)
    model_raw = dict(raw.pop("model", None) or {})
    _check_keys("model", model_raw, MODEL_KEYS)
    sched_raw = dict(raw.pop("schedule", None) or {})
    _check_keys("schedule", sched_raw, SCHEDULE_KEYS)
    data_raw = dict(raw.pop("data", None) or {})
    _check_keys("data", data_raw, DATA_KEYS)
    run = RunConfig(**raw)
    run.model = preset_config(run.preset, run.scale, **model_raw)
    try:
        run.schedule = ScheduleConfig(**sched_raw)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    run.data = DataConfig(**data_raw)
    run.validate()
    return run


def parse_config(path: str | Path | None, overrides: list[str] = (), preset: str | None = None,
                 seed: int | None = None, out: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    if preset is not None:
        raw["preset"] = preset
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    for item in overrides:
        _apply_override(raw, item)
    return build_run_config(raw)


def write_snapshot(run: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(run.to_dict(), sort_keys=True))
    return path


# --- commands ---------------------------------------------------------------


def _train_store(run: RunConfig) -> DocumentStore:
    from blockrec.evalsuite import RecallTaskSpec, gen_recall_task

    if run.data.train:
        return DocumentStore.load(run.data.train, run.data.separator.encode())
    if run.data.recall is not None:
        return gen_recall_task(RecallTaskSpec(**run.data.recall), run.seed)
    raise ConfigError("no training data: set data.train or data.recall")


def cmd_train(run: RunConfig) -> int:
    out = Path(run.out)
    write_snapshot(run, out)
    torch.manual_seed(run.seed)
    model = BlockRecurrentLM(run.model, seed=run.seed)
    store = _train_store(run)
    stream = training_stream(store, run.model.segment, run.batch, run.seed)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    every = run.checkpoint_every or run.steps

    def checkpoint(step, loss, model):
        if step % every == 0 or step == run.steps:
            save_checkpoint(model, out / "checkpoint", extra={"step": step, "seed": run.seed})
            print(f"step {step} loss_bits {loss:.4f}")

    fit(model, stream, run.steps, run.schedule, metrics, callback=checkpoint, log_every=run.log_every)
    return EXIT_OK


def _load(path) -> BlockRecurrentLM:
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"no checkpoint manifest under {path}")
    return load_checkpoint(path)


def _store(path, separator=DEFAULT_SEPARATOR, split="test") -> DocumentStore:
    if path is None:
        raise ConfigError("--data is required")
    if not Path(path).exists():
        raise ConfigError(f"data path {path} does not exist")
    return DocumentStore.load(path, separator, split)


def cmd_eval(args, run: RunConfig) -> int:
    from blockrec.evalsuite import bits_per_token_eval

    model = _load(args.checkpoint)
    bpt = bits_per_token_eval(model, _store(args.data), batch=args.batch)
    out = Path(run.out)
    write_snapshot(run, out)
    (out / "eval.json").write_text(json.dumps({"bits_per_token": bpt, "seed": run.seed, "data": args.data}))
    print(f"bits_per_token {bpt:.6f}")
    return EXIT_OK


def cmd_diff(args, run: RunConfig) -> int:
    from blockrec.evalsuite import token_ce_diffs, top_diff_records, write_diff_csv, write_topk_report

    a, b = _load(args.checkpoint), _load(args.checkpoint_b)
    doc = Path(args.document).read_bytes()
    nll_a, nll_b = token_ce_diffs(a, b, doc)
    out = Path(run.out)
    write_snapshot(run, out)
    write_diff_csv(out / "token_diff.csv", nll_a, nll_b)
    recs = top_diff_records(doc, nll_a, nll_b, args.top_k)
    write_topk_report(out / "top_tokens.txt", recs, f"{args.checkpoint} vs {args.checkpoint_b}")
    for r in recs:
        print(r.header())
    return EXIT_OK


def cmd_curve(args, run: RunConfig) -> int:
    from blockrec.evalsuite import cumulative_ce_curve, write_curve_csv

    pos, curve, docs = cumulative_ce_curve(_load(args.checkpoint), _store(args.data), args.batch)
    out = Path(run.out)
    write_snapshot(run, out)
    write_curve_csv(out / "cumulative_ce.csv", pos, curve, docs)
    print(f"final cumulative bits {curve[-1]:.6f} over {len(pos)} positions")
    return EXIT_OK


def cmd_clearstate(args, run: RunConfig) -> int:
    from blockrec.evalsuite import state_clearing_eval

    model = _load(args.checkpoint)
    tokens = np.frombuffer(Path(args.document).read_bytes(), dtype=np.uint8).astype(np.int64)
    diff = state_clearing_eval(model, tokens, clear_kv=args.clear_kv)
    out = Path(run.out)
    write_snapshot(run, out)
    np.savetxt(out / "clearstate_diff.csv", diff[1:], fmt="%.7g", header="diff_bits", comments="")
    N = model.cfg.segment
    first = float(np.abs(diff[1:N]).max()) if len(diff) > 1 else 0.0
    print(f"first-segment max |diff| {first:.3g}; mean diff after {np.nanmean(diff[N:]) if len(diff) > N else 0.0:.4f} bits")
    return EXIT_OK


def cmd_gentask(args, run: RunConfig) -> int:
    from blockrec.evalsuite import RecallTaskSpec, gen_recall_task

    spec = RecallTaskSpec(**(run.data.recall or {}))
    store = gen_recall_task(spec, run.seed)
    out = Path(run.out)
    write_snapshot(run, out)
    store.save_concatenated(out / "recall.bin")
    rets = [[asdict(r) for r in rs] for rs in store.meta["retrievals"]]
    (out / "retrievals.json").write_text(json.dumps({"seed": run.seed, "chance": store.meta["chance"], "retrievals": rets}))
    print(f"wrote {len(store)} documents to {out / 'recall.bin'}")
    return EXIT_OK


def gradcheck_suite(tol: float = 1e-4, verbose: bool = True) -> dict[str, float]:
    """Finite-difference checks of every primitive, both gates, both substeps
    and a full two-block segment loss, all in float64."""
    from blockrec import diffengine as de
    from blockrec.attention import BlockKV
    from blockrec.reccell import horizontal_substep, init_gate_params, vertical_substep, RecurrentCellParams

    g = torch.Generator().manual_seed(0)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    w, w35, w38, w43, wg = r(3, 4), r(3, 5), r(3, 8), r(4, 3), r(2, 4)
    mask = torch.rand(3, 4, generator=g) < 0.3
    ids = torch.tensor([0, 2, 1])
    tgt = torch.tensor([1, 3, 0])
    a34, b34, b45 = r(3, 4), r(3, 4), r(4, 5)
    cases = {
        "matmul": (lambda a, b: (de.matmul(a, b) * w35).sum(), [a34, b45]),
        "add": (lambda a, b: (de.add(a, b) ** 2).sum(), [a34, b34]),
        "sub": (lambda a, b: (de.sub(a, b) ** 2).sum(), [a34, b34]),
        "mul": (lambda a, b: (de.mul(a, b) * w).sum(), [a34, b34]),
        "scale": (lambda a: (de.scale(a, 2.5) * w).sum(), [a34]),
        "concat": (lambda a, b: (de.concat([a, b], -1) * w38).sum(), [a34, b34]),
        "split": (lambda a: sum((p * p).sum() * (i + 1) for i, p in enumerate(de.split(a, [1, 3], -1))), [a34]),
        "transpose": (lambda a: (de.transpose(a) * w43).sum(), [a34]),
        "sigmoid": (lambda a: (de.sigmoid(a) * w).sum(), [a34]),
        "tanh": (lambda a: (de.tanh(a) * w).sum(), [a34]),
        "relu": (lambda a: (de.relu(a) * w).sum(), [a34 + 0.05 * torch.sign(a34)]),
        "exp": (lambda a: (de.exp(a) * w).sum(), [a34]),
        "log": (lambda a: (de.log(a) * w).sum(), [a34.abs() + 0.5]),
        "softmax_rows": (lambda a: (de.softmax_rows(a) * w).sum(), [a34]),
        "layer_norm": (lambda a, gn, bb: (de.layer_norm(a, gn, bb) * w).sum(), [a34, r(4), r(4)]),
        "embedding": (lambda t: (de.embedding(t, ids) * w).sum(), [r(5, 4)]),
        "cross_entropy": (lambda a: de.reduce_mean(de.cross_entropy(a, tgt)), [a34]),
        "reduce_sum": (lambda a: de.reduce_sum(a * w), [a34]),
        "reduce_mean": (lambda a: de.reduce_mean(a * a), [a34]),
        "stop_gradient": (lambda b: (de.stop_gradient(a34) * b).sum(), [b34]),
        "masked_fill": (lambda a: (de.masked_fill(a, mask, 0.0) * w).sum(), [a34]),
    }
    results = {f"op:{k}": de.grad_check(f, xs) for k, (f, xs) in cases.items()}
    # a stopped input must receive exactly zero gradient
    leaf = a34.clone().requires_grad_()
    (de.stop_gradient(leaf) * b34 + 0 * leaf).sum().backward()
    results["op:stop_gradient_zero"] = float(leaf.grad.abs().max())

    for gt in ("fixed", "lstm"):
        p = init_gate_params(gt, 5, 4, g).double()
        results[f"gate:{gt}"] = de.grad_check(lambda c, h, p=p: (p(c, h) * wg).sum(), [r(2, 4), r(2, 5)])

    for gc in ("dual", "single", "skip"):
        cell = RecurrentCellParams(8, 2, 2, 16, 2, "fixed", gc, generator=g).double()
        prev = BlockKV(r(1, 4, 2, 2), r(1, 4, 2, 2), torch.tensor([[False, True, True, True]]))
        wv, wh = r(1, 4, 8), r(1, 2, 8)
        results[f"vertical:{gc}"] = de.grad_check(
            lambda x, s: (vertical_substep(x, s, prev, cell) * wv).sum(), [r(1, 4, 8), r(1, 2, 8)])
        results[f"horizontal:{gc}"] = de.grad_check(
            lambda s, k, v: (horizontal_substep(s, BlockKV(k, v, prev.valid), cell) * wh).sum(),
            [r(1, 2, 8), r(1, 4, 2, 2), r(1, 4, 2, 2)])

    cfg = ModelConfig(d=8, num_layers=2, heads=2, head_dim=2, mlp_hidden=16, window=4, segment=8,
                      num_states=2, recurrent_layers=[1])
    model = BlockRecurrentLM(cfg, seed=0).double()
    tokens = torch.randint(0, 256, (1, 8), generator=g)
    targets = torch.randint(0, 256, (1, 8), generator=g)
    names = ["embed", "layers.1.gate_proj.W_z", "layers.1.initial_state", "layers.1.kv_e.weight", "layers.0.qkv.weight"]
    params = dict(model.named_parameters())

    def seg_loss(*vals):
        over = dict(zip(names, vals))
        logits, _ = torch.func.functional_call(model, {**params, **over}, (tokens, model.init_caches(1)))
        return de.reduce_mean(de.cross_entropy(logits[0], targets[0]))

    results["segment:two-block"] = de.grad_check(seg_loss, [params[n] for n in names], max_coords=40, generator=g)
    if verbose:
        for k, v in results.items():
            print(f"{'PASS' if v < tol else 'FAIL'} {k:24s} max rel err {v:.2e}")
    return results


def cmd_gradcheck(args, run: RunConfig) -> int:
    results = gradcheck_suite(args.tol)
    bad = [k for k, v in results.items() if not v < args.tol]
    if bad:
        raise NumericalError(f"grad check failed for {', '.join(bad)}")
    print(f"all {len(results)} grad checks below {args.tol:g}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", help="model preset name")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override applied after preset expansion (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    ap = argparse.ArgumentParser(prog="blockrec", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    for name in ("eval", "curve"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--batch", type=int, default=1)
    p = sub.add_parser("diff", parents=[common], help="per-token cross-entropy difference of two models")
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoint-b")
    p.add_argument("--document", required=True)
    p.add_argument("--top-k", type=int, default=4)
    p = sub.add_parser("clearstate", parents=[common], help="carried vs cleared recurrent state")
    p.add_argument("--checkpoint")
    p.add_argument("--document", required=True)
    p.add_argument("--clear-kv", action="store_true")
    sub.add_parser("gentask", parents=[common], help="write a synthetic recall corpus")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification")
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def main(argv: list[str] | None = None) -> int:
    if os.environ.get("BLOCKREC_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    args = build_parser().parse_args(argv)
    try:
        run = parse_config(args.config, args.override, args.preset, args.seed, args.out)
        if args.command == "train":
            return cmd_train(run)
        handler = {"eval": cmd_eval, "diff": cmd_diff, "curve": cmd_curve, "clearstate": cmd_clearstate,
                   "gentask": cmd_gentask, "gradcheck": cmd_gradcheck}[args.command]
        return handler(args, run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TypeError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
