"""Command-line entry point: ``dail <subcommand> [flags]``.

Exit status: 0 on success, 1 on configuration or runtime errors, 2 on
usage errors (unknown flags or subcommands).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .config import ConfigError, PipelineConfig, dump_config, load_config

log = logging.getLogger("dail")

SUBCOMMANDS = ("synth", "pretrain", "rollout", "train", "eval", "passk", "waypoints", "dedup",
               "calibrate-tau", "tune-gamma", "repro")


class CliError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_fingerprint: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(paths: Sequence[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "manifest.json":
                    out[str(f)] = file_hash(f)
        elif p.is_file():
            out[str(p)] = file_hash(p)
    return out


# --------------------------------------------------------------------------
# subcommand handlers; each returns (inputs, outputs) for the manifest


def _load_params(path: str):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)


def _read_corpus(path: str):
    from .synthetic import read_corpus

    if not Path(path).is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return read_corpus(path)


def cmd_pretrain(args, cfg: PipelineConfig):
    from .checkpoint import save_checkpoint
    from .pipeline import pretrain_base

    out = Path(args.out or cfg.path("checkpoints") / "base.npz")
    save_checkpoint(out, pretrain_base(cfg))
    return [], [out]


def cmd_synth(args, cfg: PipelineConfig):
    from .pipeline import curate
    from .synthetic import write_corpus

    params, _ = _load_params(args.base)
    corpus = curate(params, cfg)
    out = Path(args.out or cfg.path("corpus"))
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for split, recs in corpus.splits().items():
        write_corpus(out / f"{split}.jsonl", recs)
        outputs.append(out / f"{split}.jsonl")
    print(f"pretrain={len(corpus.pretrain)} hard={len(corpus.hard)} validation={len(corpus.validation)}")
    return [Path(args.base)], outputs


def cmd_rollout(args, cfg: PipelineConfig):
    from .pipeline import generate_dsyn, rollout_config
    from .rollout import write_traces

    params, _ = _load_params(args.base)
    records = _read_corpus(args.corpus)
    traces = generate_dsyn(params, records, cfg)
    out = Path(args.out or cfg.path("traces") / "dsyn.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_traces(out, traces, rollout_config(cfg))
    rate = sum(t.accept_rate for t in traces) / max(1, len(traces))
    print(f"traces={len(traces)} mean_accept_rate={rate:.4f}")
    return [Path(args.base), Path(args.corpus)], [out]


def cmd_train(args, cfg: PipelineConfig):
    from .checkpoint import save_checkpoint
    from .pipeline import sft_examples, train_adapter, training_examples
    from .rollout import read_traces

    params, _ = _load_params(args.base)
    records = _read_corpus(args.corpus)
    inputs = [Path(args.base), Path(args.corpus)]
    objective = args.objective
    if objective == "sft":
        examples = sft_examples(records)
        objective = "nll"
    elif objective == "star":
        examples = _star_examples(params, records, cfg)
        objective = "nll"
    else:
        if not args.traces:
            raise CliError(f"--traces is required for objective {objective}")
        examples, _ = training_examples(records, read_traces(args.traces), cfg)
        inputs.append(Path(args.traces))
    if not examples:
        raise CliError("no training examples")
    res = train_adapter(params, examples, cfg, objective)
    out = Path(args.out or cfg.path("checkpoints") / f"{args.objective}.npz")
    save_checkpoint(out, params, res.adapter)
    loss_csv = out.with_suffix(".loss.csv")
    res.write_csv(loss_csv)
    return inputs, [out, loss_csv]


def _star_examples(params, records, cfg: PipelineConfig):
    from .pipeline import rollout_config
    from .rollout import rationalize_with_hint
    from .training import make_example

    out = []
    for r in records:
        kept = rationalize_with_hint(r.instance(), params, None, rollout_config(cfg),
                                     attempts=cfg.corpus.filter_attempts, seed=cfg.seed)
        out.extend(make_example(r.instance(), None, t.tokens) for t in kept[: cfg.rollout.samples])
    return out


def cmd_eval(args, cfg: PipelineConfig):
    from .evaluation import evaluate, plot_curves, write_curve_csv, write_records_csv
    from .pipeline import eval_ks, sampler_config

    params, adapter = _load_params(args.checkpoint)
    records = _read_corpus(args.corpus)
    n = args.n or cfg.eval.n
    budget = args.think_budget if args.think_budget is not None else cfg.eval.think_budget
    ks = [k for k in eval_ks(cfg) if k <= n] if not args.n else None
    recs, curve = evaluate(params, adapter, [r.instance() for r in records], n, sampler_config(cfg),
                           think_budget=budget, max_len=cfg.eval.max_len, seed=cfg.seed + 2,
                           ks=ks, workers=cfg.workers)
    out = Path(args.out or cfg.path("reports"))
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.checkpoint).stem
    write_records_csv(out / f"eval_{stem}.csv", recs)
    write_curve_csv(out / f"passk_{stem}.csv", curve)
    outputs = [out / f"eval_{stem}.csv", out / f"passk_{stem}.csv"]
    if not args.no_plot:
        plot_curves(out / f"passk_{stem}.svg", {stem: curve})
        outputs.append(out / f"passk_{stem}.svg")
    for k, v in zip(curve.ks, curve.estimates):
        print(f"pass@{k}\t{v:.6f}")
    return [Path(args.checkpoint), Path(args.corpus)], outputs


def cmd_passk(args, cfg: PipelineConfig):
    from .evaluation import pass_at_k

    try:
        print(f"{pass_at_k(args.n, args.c, args.k):.6f}")
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return [], []


def cmd_waypoints(args, cfg: PipelineConfig):
    from .contexts import ProblemInstance, default_templates
    from .waypoints import extract_waypoints

    if args.file:
        text = Path(args.file).read_text(encoding="utf-8")
    else:
        text = args.text if args.text is not None else sys.stdin.read()
    partial = extract_waypoints(text, args.mode)
    if args.json:
        print(json.dumps(partial.to_record(), sort_keys=True))
    else:
        domain = "proof" if args.proof else "verifiable"
        x = ProblemInstance("cli", args.problem or "", None if args.proof else partial.answer, domain)
        print(default_templates().negative_text(x, partial))
    return ([Path(args.file)] if args.file else []), []


def cmd_dedup(args, cfg: PipelineConfig):
    from .evaluation import dedup

    def lines(path):
        if not Path(path).is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        return [l.rstrip("\n") for l in open(path, encoding="utf-8") if l.strip()]

    train, evals = lines(args.train), lines(args.eval)
    threshold = args.threshold if args.threshold is not None else cfg.eval.dedup_threshold
    flagged = dedup(train, evals, threshold)
    dropped = sorted({j for _, j, _ in flagged})
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("train_index,eval_index,similarity\n")
            for i, j, s in flagged:
                fh.write(f"{i},{j},{s:.6f}\n")
        outputs.append(Path(args.out))
    print(f"flagged={len(dropped)} kept={len(evals) - len(dropped)} of {len(evals)}")
    return [Path(args.train), Path(args.eval)], outputs


def cmd_calibrate_tau(args, cfg: PipelineConfig):
    from .evaluation import calibrate_tau, write_tau_csv
    from .pipeline import rollout_config

    params, _ = _load_params(args.base)
    records = _read_corpus(args.corpus)
    if args.limit:
        records = records[: args.limit]
    report = calibrate_tau([(r.instance(), r.expert()) for r in records], params, rollout_config(cfg),
                           cfg.eval.tau_grid, args.samples, cfg.seed, workers=cfg.workers)
    out = Path(args.out or cfg.path("reports") / "calibrate_tau.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tau_csv(out, report)
    for r in report.rows:
        print(f"tau={r.tau}\taccept_rate={r.accept_rate:.4f}\taccuracy={r.accuracy:.4f}")
    print(f"selected tau={report.selected}")
    return [Path(args.base), Path(args.corpus)], [out]


def cmd_tune_gamma(args, cfg: PipelineConfig):
    from .evaluation import tune_gamma, write_gamma_csv
    from .pipeline import eval_ks, sampler_config, train_adapter, training_examples
    from .rollout import read_traces

    params, _ = _load_params(args.base)
    records = _read_corpus(args.corpus)
    validation = [r.instance() for r in _read_corpus(args.validation)]
    examples, _ = training_examples(records, read_traces(args.traces), cfg)
    grid = tuple(float(g) for g in args.grid.split(",")) if args.grid else cfg.train.gamma_grid
    report = tune_gamma(validation, lambda g: train_adapter(params, examples, cfg, "contrastive", g).adapter,
                        params, grid, cfg.eval.n, sampler_config(cfg), cfg.eval.max_len, cfg.seed + 2,
                        eval_ks(cfg), cfg.workers)
    out = Path(args.out or cfg.path("reports") / "tune_gamma.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gamma_csv(out, report)
    print(f"selected gamma={report.selected}")
    return [Path(args.base), Path(args.corpus), Path(args.validation), Path(args.traces)], [out]


def cmd_repro(args, cfg: PipelineConfig):
    from .pipeline import run_desk

    if args.suite != "desk":
        raise CliError(f"unknown suite {args.suite!r}")
    out = Path(args.out or Path(cfg.paths.work_dir))
    res = run_desk(cfg, out, plots=not args.no_plot)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    for name, curve in res.curves.items():
        print(name, " ".join(f"pass@{k}={v:.4f}" for k, v in zip(curve.ks, curve.estimates)))
    for name, (injected, heldout) in res.shortcut_ll.items():
        print(f"shortcut span loglik {name}: injected {injected:.4f} held-out {heldout:.4f}")
    return [], [out / "reports", out / "checkpoints", out / "corpus", out / "traces"]


HANDLERS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "rollout": cmd_rollout, "train": cmd_train,
    "eval": cmd_eval, "passk": cmd_passk, "waypoints": cmd_waypoints, "dedup": cmd_dedup,
    "calibrate-tau": cmd_calibrate_tau, "tune-gamma": cmd_tune_gamma, "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (flat key = value)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. rollout.tau=0.9")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dail", description="Distribution-aligned imitation learning, desk scale.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("pretrain", parents=[common], help="pretrain the toy base model")
    s.add_argument("--out")

    s = sub.add_parser("synth", parents=[common], help="build the synthetic corpus with the solvability filter")
    s.add_argument("--base", required=True, help="base checkpoint used by the filter")
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("rollout", parents=[common], help="generate D_syn")
    s.add_argument("--base", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=["mixed", "direct"], dest="o_rollout.mode")
    s.add_argument("--tau", type=float, dest="o_rollout.tau")
    s.add_argument("--max-len", type=int, dest="o_rollout.max_len")
    s.add_argument("--truncate", type=int, dest="o_rollout.mixed_truncation")
    s.add_argument("--temp", type=float, dest="o_rollout.temperature")
    s.add_argument("--top-p", type=float, dest="o_rollout.top_p")
    s.add_argument("--samples", type=int, dest="o_rollout.samples")
    s.add_argument("--out")

    s = sub.add_parser("train", parents=[common], help="train an adapter")
    s.add_argument("--base", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--traces")
    s.add_argument("--objective", default="contrastive",
                   choices=["contrastive", "kl_pos", "kl_neg", "nll", "sft", "star"])
    s.add_argument("--gamma", type=float, dest="o_train.gamma")
    s.add_argument("--lr", type=float, dest="o_train.learning_rate")
    s.add_argument("--epochs", type=int, dest="o_train.epochs")
    s.add_argument("--batch", type=int, dest="o_train.batch_size")
    s.add_argument("--aggregation", choices=["mean", "sum"], dest="o_train.token_aggregation")
    s.add_argument("--clamp", type=float, dest="o_train.negative_clamp")
    s.add_argument("--out")

    s = sub.add_parser("eval", parents=[common], help="pass@k evaluation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--think-budget", type=int)
    s.add_argument("--out")
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("passk", parents=[common], help="print the pass@k estimate")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--c", type=int, required=True)
    s.add_argument("--k", type=int, required=True)

    s = sub.add_parser("waypoints", parents=[common], help="extract waypoints and render the negative context")
    s.add_argument("--text", help="solution text (default: read standard input)")
    s.add_argument("--file")
    s.add_argument("--mode", default="full", choices=["full", "numeric_only"])
    s.add_argument("--problem")
    s.add_argument("--proof", action="store_true", help="render as a proof-domain instance (no answer)")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("dedup", parents=[common], help="flag near-duplicate eval problems")
    s.add_argument("--train", required=True, help="one problem per line")
    s.add_argument("--eval", required=True, help="one problem per line")
    s.add_argument("--threshold", type=float)
    s.add_argument("--out")

    s = sub.add_parser("calibrate-tau", parents=[common], help="tau sweep on the training set")
    s.add_argument("--base", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--out")

    s = sub.add_parser("tune-gamma", parents=[common], help="gamma sweep on validation")
    s.add_argument("--base", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--traces", required=True)
    s.add_argument("--validation", required=True)
    s.add_argument("--grid")
    s.add_argument("--out")

    s = sub.add_parser("repro", parents=[common], help="run an end-to-end suite")
    s.add_argument("--suite", default="desk", choices=["desk"])
    s.add_argument("--out")
    s.add_argument("--no-plot", action="store_true")
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        overrides[key.strip()] = value
    for name, value in vars(args).items():
        if name.startswith("o_") and value is not None:
            overrides[name[2:]] = str(value)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1

    import torch

    torch.set_num_threads(1)
    t0 = time.time()
    try:
        inputs, outputs = HANDLERS[args.command](args, cfg)
    except (CliError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = RunManifest(args.command, argv, cfg.fingerprint(), _hash_tree(inputs), _hash_tree(outputs),
                           round(time.time() - t0, 3))
    if args.manifest:
        manifest.write(Path(args.manifest))
    elif args.command == "repro":
        manifest.write(Path(outputs[0]).parent / "manifest.json")
    else:
        # one manifest per produced artifact set, so repeated commands do not collide
        stem = f"{args.command}-{Path(outputs[0]).stem}" if outputs else args.command
        manifest.write(cfg.path("reports").parent / "manifests" / f"{stem}.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
