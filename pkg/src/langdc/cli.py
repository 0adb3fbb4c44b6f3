"""Command-line entry point: gen-data, train, eval, oracle, flops, report, ablate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .corpus import build_corpus, read_corpus, write_corpus
from .errors import ConfigError, ContractViolation, DataError
from .evaluation import (CorrectnessMatrix, EvalConfig, evaluate, length_stats, oracle_select, read_records,
                         summarize, write_records, write_summary)
from .flopsacct import QWEN25_05B, QWEN25_3B, TokenPlan, pipeline_flops, plan_from_dict, profile_from_dict
from .model import ModelBundle, ModelConfig
from .training import (CheckpointError,
                       load_checkpoint, read_checkpoint, run_stage, save_checkpoint, scheme_name)

STAGE_PLAN = {1: ("LanguagePretrain", "CrossModalPretrain"), 2: ("CapPrunerPretrain", "PostPretrain"), 3: ("SFT",)}


def _print(msg):
    print(msg, flush=True)


def _md_table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out) + "\n"


def _write_run_meta(run_dir, cfg, argv):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(cfg.to_toml())
    meta = {"version": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "seed": cfg.seed, "data_seed": cfg.data_seed, "argv": list(argv)}
    (run_dir / "provenance.json").write_text(json.dumps(meta, indent=2))


def _load_corpus(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"corpus directory {p} does not exist")
    return read_corpus(p)


def _bundle_from_ckpt(path, tap_layer=None):
    ckpt = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(ckpt.meta["config"])
    if tap_layer is not None:
        from dataclasses import replace
        mcfg = replace(mcfg, cap_pruner=replace(mcfg.cap_pruner, tap_layer=tap_layer))
    bundle = ModelBundle(mcfg, 0)
    load_checkpoint(path, bundle)
    return bundle, ckpt


# pipelines reused by tests and ablations -----------------------------------------------------

def split_corpus(cfg):
    full = build_corpus(cfg.data_seed, cfg.train_clips + cfg.eval_clips, (cfg.richness_min, cfg.richness_max), cfg.grid)
    ids = [c.clip_id for c in full.clips]
    return full.subset(ids[: cfg.train_clips]), full.subset(ids[cfg.train_clips:])


def train_stages(bundle, cfg, corpus, stages, run_dir=None, skip_cappruner_pretrain=False,
                 skip_post_pretrain=False, log=None, seed=None):
    """Run the named pipeline stages in order, writing ``stage{n}.ckpt`` after each."""
    results = []
    prov = [scheme_name(skip_cappruner_pretrain, skip_post_pretrain)]
    for n in stages:
        for stage in STAGE_PLAN[n]:
            if stage == "CapPrunerPretrain" and skip_cappruner_pretrain:
                continue
            if stage == "PostPretrain" and skip_post_pretrain:
                continue
            if stage == "LanguagePretrain" and cfg.lm_epochs == 0:
                continue
            spec = cfg.stage_spec(stage, seed)
            results.append(run_stage(bundle, corpus, spec, run_dir=run_dir, log=log, provenance=prov))
            prov = prov + [stage]
        if run_dir is not None:
            save_checkpoint(Path(run_dir) / f"stage{n}.ckpt", bundle, spec=None, provenance=prov)
    return results


def run_eval(bundle, corpus, out_dir, ecfg: EvalConfig):
    recs = evaluate(bundle, corpus, ecfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(recs, out / "records.jsonl")
    rows = summarize(recs)
    write_summary(rows, out / "summary.csv")
    length_stats(recs, out_dir=out)
    meta = {"stride": ecfg.stride or bundle.cfg.base_pruner.stride, "use_base": ecfg.use_base,
            "use_cap": ecfg.use_cap, "label": ecfg.label, "digest": bundle.digest()}
    (out / "eval_meta.json").write_text(json.dumps(meta, indent=2))
    (out / "summary.md").write_text(
        f"# Evaluation ({ecfg.label})\n\n"
        + _md_table(["kind", "n", "accuracy", "mean tokens"],
                    [(r["kind"], r["n"], f"{100 * r['accuracy']:.2f}", f"{r['mean_tokens']:.1f}") for r in rows]))
    return recs


# commands --------------------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    train, held = split_corpus(cfg)
    out = Path(args.out)
    write_corpus(train, out / "train")
    write_corpus(held, out / "eval")
    _write_run_meta(out, cfg, sys.argv)
    (out / "summary.md").write_text(
        f"# Corpus\n\n{len(train.clips)} training clips, {len(held.clips)} held-out clips, "
        f"{len(train.qa) + len(held.qa)} questions (data_seed {cfg.data_seed}).\n")
    _print(f"wrote {out}/train and {out}/eval")


def cmd_train(args, cfg):
    corpus = _load_corpus(args.data)
    run = Path(args.run)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    if stages[0] > 1:
        prev = run / f"stage{stages[0] - 1}.ckpt"
        if not prev.exists():
            raise DataError(f"{prev} missing; train stage {stages[0] - 1} first")
        bundle, _ = _bundle_from_ckpt(prev)
    else:
        bundle = ModelBundle(cfg.model_config(), cfg.seed)
    _write_run_meta(run, cfg, sys.argv)
    results = train_stages(bundle, cfg, corpus, stages, run, args.skip_cappruner_pretrain,
                           args.skip_post_pretrain, log=_print)
    rows = [(r.stage, r.steps, f"{np.mean(r.losses[-20:]):.4f}", f"{r.seconds:.1f}") for r in results]
    with open(run / "summary.md", "a") as fh:
        fh.write(f"# Training ({scheme_name(args.skip_cappruner_pretrain, args.skip_post_pretrain)})\n\n"
                 + _md_table(["stage", "steps", "final loss", "seconds"], rows) + "\n")
    _print(f"checkpoint {run}/stage{stages[-1]}.ckpt")


def cmd_eval(args, cfg):
    bundle, _ = _bundle_from_ckpt(args.ckpt)
    corpus = _load_corpus(args.data)
    ecfg = EvalConfig(args.stride, not args.no_base, not args.no_cap, cfg.eval_batch)
    recs = run_eval(bundle, corpus, args.out, ecfg)
    _print(f"accuracy {100 * np.mean([r.correct for r in recs]):.2f}% over {len(recs)} questions")


def cmd_oracle(args, cfg):
    runs = {}
    for d in args.runs:
        p = Path(d) / "records.jsonl"
        if not p.exists():
            raise DataError(f"{p} missing")
        runs[Path(d).name] = read_records(p)
    m = CorrectnessMatrix.from_runs(runs)
    if not m.instances:
        raise DataError("runs share no instance ids")
    res = oracle_select(m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    acc, tok = m.column_accuracy(), m.column_mean_tokens()
    rows = [(lab, f"{100 * a:.2f}", f"{t:.1f}") for lab, a, t in zip(m.columns, acc, tok)]
    rows.append(("oracle", f"{100 * res.accuracy:.2f}", f"{res.mean_tokens:.1f}"))
    with open(out / "oracle.csv", "w") as fh:
        fh.write("config,accuracy,mean_tokens\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
    with open(out / "oracle_choices.csv", "w") as fh:
        fh.write("instance_id,chosen,charged,correct\n")
        for i, c, t, k in zip(m.instances, res.chosen, res.charged, res.correct):
            fh.write(f"{i},{m.columns[c]},{t:g},{int(k)}\n")
    (out / "summary.md").write_text("# Oracle\n\n" + _md_table(["config", "accuracy", "mean tokens"], rows))
    _print(f"oracle accuracy {100 * res.accuracy:.2f}% at {res.mean_tokens:.1f} tokens")


def cmd_flops(args, cfg):
    from ._toml import load_toml
    llm, cap, enc = QWEN25_3B, QWEN25_05B, None
    if args.arch_file:
        prof = load_toml(args.arch_file)
        llm = profile_from_dict("llm", prof["llm"]) if "llm" in prof else llm
        cap = profile_from_dict("cappruner", prof["cappruner"]) if "cappruner" in prof else cap
        enc = profile_from_dict("encoder", prof["encoder"]) if "encoder" in prof else None
    plan = plan_from_dict(load_toml(args.plan)) if args.plan else TokenPlan()
    rep = pipeline_flops(llm, cap, plan, enc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out)
    md = out.with_suffix(".md")
    md.write_text("# FLOPs\n\n" + _md_table(["pipeline", "component", "TFLOPs"],
                                           [(r["pipeline"], r["component"], f"{r['flops'] / 1e12:.3f}") for r in rep.rows()])
                  + f"\nratio langdc/baseline = {rep.ratio:.4f} (formula {rep.version})\n")
    _print(f"langdc/baseline = {rep.ratio:.4f}")


def report_rows(run_dirs):
    rows = []
    for d in run_dirs:
        d = Path(d)
        try:
            meta = json.loads((d / "eval_meta.json").read_text())
        except FileNotFoundError:
            raise DataError(f"{d} has no eval_meta.json") from None
        recs = read_records(d / "records.jsonl")
        rows.append({"base": f"stride {meta['stride']}" if meta["use_base"] else "-",
                     "cap": "yes" if meta["use_cap"] else "-",
                     "accuracy": 100 * float(np.mean([r.correct for r in recs])),
                     "mean_tokens": float(np.mean([r.tokens for r in recs])), "run": d.name})
    return rows


def cmd_report(args, cfg):
    rows = report_rows(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w") as fh:
        fh.write("run,base_pruner,cap_pruner,accuracy,mean_tokens\n")
        for r in rows:
            fh.write(f"{r['run']},{r['base']},{r['cap']},{r['accuracy']:.4f},{r['mean_tokens']:.2f}\n")
    (out / "report.md").write_text("# Pruner combinations\n\n" + _md_table(
        ["BasePruner", "CapPruner", "accuracy", "mean tokens"],
        [(r["base"], r["cap"], f"{r['accuracy']:.2f}", f"{r['mean_tokens']:.1f}") for r in rows]))
    _print((out / "report.md").read_text())


def cmd_ablate(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "pruners":
        if not args.ckpt:
            raise ConfigError("ablate pruners needs --ckpt")
        bundle, _ = _bundle_from_ckpt(args.ckpt)
        corpus = _load_corpus(args.data)
        dirs = []
        for base in (True, False):
            for cap in (False, True):
                ecfg = EvalConfig(0, base, cap, cfg.eval_batch)
                d = out / ecfg.label.replace("/", "")
                run_eval(bundle, corpus, d, ecfg)
                dirs.append(d)
        args.runs = dirs
        cmd_report(args, cfg)
        return
    train = _load_corpus(Path(args.data) / "train")
    held = _load_corpus(Path(args.data) / "eval")
    rows = []
    if args.what == "schemes":
        for seed in args.seeds:
            for skip_cap, skip_post in ((False, False), (True, False), (False, True)):
                name = scheme_name(skip_cap, skip_post)
                d = out / f"seed{seed}" / name.replace("/", "").replace(" ", "_")
                bundle = ModelBundle(cfg.model_config(), seed)
                _write_run_meta(d, cfg, sys.argv)
                train_stages(bundle, cfg, train, [1, 2, 3], d, skip_cap, skip_post, log=_print, seed=seed)
                recs = run_eval(bundle, held, d / "eval", EvalConfig(0, True, True, cfg.eval_batch))
                rows.append((seed, name, f"{100 * np.mean([r.correct for r in recs]):.2f}",
                             f"{np.mean([r.tokens for r in recs]):.1f}"))
        header = ["seed", "scheme", "accuracy", "mean tokens"]
    else:  # tap-layer sweep from a run directory holding stage2.ckpt
        if not args.ckpt:
            raise ConfigError("ablate tap needs --ckpt (a stage-2 checkpoint)")
        layers = args.layers or list(range(ModelConfig.from_dict(read_checkpoint(args.ckpt).meta["config"]).cap_pruner.layers + 1))
        for t in layers:
            bundle, _ = _bundle_from_ckpt(args.ckpt, tap_layer=t)
            d = out / f"tap{t}"
            for stage in ("PostPretrain", "SFT"):
                run_stage(bundle, train, cfg.stage_spec(stage), run_dir=d, log=_print)
            recs = run_eval(bundle, held, d / "eval", EvalConfig(0, True, True, cfg.eval_batch))
            rows.append((t, f"{100 * np.mean([r.correct for r in recs]):.2f}", f"{np.mean([r.tokens for r in recs]):.1f}"))
        header = ["tap layer", "accuracy", "mean tokens"]
    (out / "summary.md").write_text(f"# Ablation: {args.what}\n\n" + _md_table(header, rows))
    with open(out / "summary.csv", "w") as fh:
        fh.write(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    _print((out / "summary.md").read_text())


# argument parsing --------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="langdc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat TOML run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (TOML value syntax)")
        return sp

    s = common(sub.add_parser("gen-data", help="generate training and held-out corpora"))
    s.add_argument("--out", required=True)
    s.add_argument("--num-clips", type=int, help="training clips (sets train_clips)")
    s.add_argument("--richness-min", type=int)
    s.add_argument("--richness-max", type=int)
    s = common(sub.add_parser("train", help="run training stages into a run directory"))
    s.add_argument("--data", required=True, help="training corpus directory")
    s.add_argument("--run", "--out", dest="run", required=True, help="run directory")
    s.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    s.add_argument("--skip-cappruner-pretrain", action="store_true")
    s.add_argument("--skip-post-pretrain", action="store_true")
    s = common(sub.add_parser("eval", help="score a checkpoint on a corpus"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=0, help="base pooling stride (0 = model default)")
    s.add_argument("--no-base", action="store_true", help="drop base pruner tokens")
    s.add_argument("--no-cap", action="store_true", help="drop caption pruner tokens")
    s = common(sub.add_parser("oracle", help="per-instance cheapest-correct selection over eval runs"))
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s = common(sub.add_parser("flops", help="analytic prefill FLOPs report"))
    s.add_argument("--arch-file", help="TOML with [llm], [cappruner] and optional [encoder] tables")
    s.add_argument("--plan", help="TOML token plan")
    s.add_argument("--out", required=True, help="CSV path")
    s = common(sub.add_parser("report", help="pruner-combination table over eval runs"))
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s = common(sub.add_parser("ablate", help="pruner grid, training-scheme knockouts or tap-layer sweep"))
    s.add_argument("what", choices=["pruners", "schemes", "tap"])
    s.add_argument("--data", required=True, help="eval corpus (pruners) or gen-data output directory")
    s.add_argument("--ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--layers", type=int, nargs="+")
    return p


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle,
            "flops": cmd_flops, "report": cmd_report, "ablate": cmd_ablate}


def _overrides(args):
    from ._toml import TOMLDecodeError, toml
    values = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            values[key.strip()] = toml.loads(f"v = {raw}")["v"]
        except TOMLDecodeError:
            values[key.strip()] = raw
    if args.seed is not None:
        # the corpus generator only sees data_seed
        values["data_seed" if args.command == "gen-data" else "seed"] = args.seed
    for flag, key in (("num_clips", "train_clips"), ("richness_min", "richness_min"),
                      ("richness_max", "richness_max")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return values


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        HANDLERS[args.command](args, cfg)
    except (ConfigError, DataError, ContractViolation, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
