"""Command-line entry point: ``cwlab {gen-data,bench,train,eval,analyze,ablate}``.

Every subcommand resolves a configuration (defaults < ``--config`` file <
flags), persists it next to its outputs and accepts ``--dry-run``, which
prints the resolved configuration and exits without touching the disk.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime or
numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import CwlabError, InputError

log = logging.getLogger("cwlab")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
FAMILY_FLAGS = {"ae": "AE", "vae": "VAE", "modular": "Modular", "gnn": "GNN"}
ENV_ALIASES = {"physics": "physics-nbody", "pushing": "pushing-grid", "oscillator": "harmonic-oscillator"}


class UsageError(CwlabError):
    exit_code = EXIT_USAGE


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with any of the sections env/backbone/causal/stages/bench/eval")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--desk", action="store_true", help="apply the single-CPU preset (stage epochs / 4, smaller batches and latents)")
    p.add_argument("--out", help="output directory (default: $CWLAB_OUT/<command>)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--seed", type=int, help="master seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cwlab", description="Causal world-model training and counterfactual retrieval.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate episodes into a dataset directory")
    _common(p)
    p.add_argument("--env", default=None, help="physics | pushing | oscillator")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--obs-mode", choices=("pixels", "state"))
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("bench", help="build a counterfactual benchmark from a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--max-samples", type=int)
    p.add_argument("--num-candidates", type=int)
    p.add_argument("--horizons", type=_ints)
    p.add_argument("--delta", type=float)
    p.add_argument("--magnitude-sweep", action="store_true")

    p = sub.add_parser("train", help="train a baseline or +causal world model")
    _common(p)
    p.add_argument("--data", required=True)
    fam = p.add_argument_group("backbone family (pick one)")
    for flag in FAMILY_FLAGS:
        fam.add_argument(f"--{flag}", action="store_true")
    obj = p.add_mutually_exclusive_group()
    obj.add_argument("--contrastive", action="store_true")
    obj.add_argument("--nll", action="store_true")
    p.add_argument("--with-causal", action="store_true")
    p.add_argument("--stage-split", help="e.g. s1_8_s2_40")
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("eval", help="factual and counterfactual retrieval metrics")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--max-samples", type=int, default=2000)
    p.add_argument("--horizons", type=_ints, default=(1, 5, 10))
    p.add_argument("--paired-with", help="baseline run directory for the paired report")
    p.add_argument("--intervention-mode", choices=("observation", "latent"))

    p = sub.add_parser("analyze", help="structure heatmaps, rank correlation, identifiability test")
    _common(p)
    p.add_argument("--run", help="run directory holding adjacency.csv")
    p.add_argument("--adjacency", help="explicit adjacency.csv path")
    p.add_argument("--self-compare", action="store_true", help="compare the learned A with itself")
    p.add_argument("--ref-seed", type=int, default=0, help="episode seed of the reference state for the Jacobian template")
    p.add_argument("--threshold", type=float, help="relative edge threshold (default 0.3)")
    p.add_argument("--identifiability", action="store_true")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--edges", type=int, default=3)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--headless", action="store_true", help="write CSV matrices instead of PNG figures")

    p = sub.add_parser("ablate", help="single-factor ablation grid")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--variants", help="comma-separated row names (default: all)")
    p.add_argument("--split-scale", type=float, default=1.0, help="divide the stage-split variants by this factor")
    return ap


# ---------------------------------------------------------------- resolve
def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = cfgmod.parse_value(v)
    if args.seed is not None:
        ov["stages.seed"] = args.seed
        ov["bench.seed"] = args.seed
    cmd = args.command
    if cmd == "gen-data":
        if args.env:
            ov["env.name"] = ENV_ALIASES.get(args.env, args.env)
        if args.obs_mode:
            ov["env.obs_mode"] = args.obs_mode
    if cmd == "bench":
        for flag, key in (("max_samples", "max_samples"), ("num_candidates", "num_candidates"), ("horizons", "horizons"), ("delta", "delta")):
            if getattr(args, flag) is not None:
                ov[f"bench.{key}"] = getattr(args, flag)
        if args.magnitude_sweep:
            ov["bench.magnitude_sweep"] = True
    if cmd == "train":
        chosen = [FAMILY_FLAGS[f] for f in FAMILY_FLAGS if getattr(args, f)]
        if len(chosen) > 1:
            raise UsageError(f"conflicting backbone family flags: {chosen}")
        if chosen:
            ov["backbone.family"] = chosen[0]
        if args.contrastive or args.nll:
            ov["backbone.objective"] = "contrastive" if args.contrastive else "nll"
        if args.stage_split:
            ov["stages.stage_split"] = args.stage_split
    if cmd == "eval" and args.intervention_mode:
        ov["eval.intervention_mode"] = args.intervention_mode
    if cmd == "analyze" and args.threshold is not None:
        ov["eval.rel_threshold"] = args.threshold
    return ov


def resolve_args(args) -> cfgmod.ResolvedConfig:
    out = Path(args.out) if args.out else cfgmod.output_root() / args.command
    return cfgmod.resolve(args.config, _overrides(args), desk=args.desk, out_dir=out)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _persist(rc: cfgmod.ResolvedConfig) -> Path:
    out = Path(rc.out_dir)
    _write_json(out / "resolved_config.json", rc.to_dict())
    return out


# --------------------------------------------------------------- commands
def cmd_gen_data(args, rc: cfgmod.ResolvedConfig) -> int:
    from .datasets import generate_dataset, save_dataset

    if args.episodes < 1:
        raise InputError("--episodes must be >= 1")
    out = Path(rc.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"output directory {out} is not empty (use --force)")
    ds = generate_dataset(rc.env(), args.episodes, rc.seed)
    save_dataset(ds, out, force=True)
    manifest = {"n_episodes": len(ds), "master_seed": rc.seed, "env": rc.tree["env"], "config_hash": rc.hash,
                "files": sorted(p.name for p in (out / "episodes").glob("episode_*.npz"))}
    _write_json(out / "manifest.json", manifest)
    _persist(rc)
    print(f"wrote {len(ds)} episodes to {out} (config {rc.hash})")
    return EXIT_OK


def cmd_bench(args, rc) -> int:
    from .bench import build_benchmark, save_benchmark
    from .datasets import load_dataset

    ds = load_dataset(args.data)
    bench = build_benchmark(ds, rc.bench())
    bench.extra["config_hash"] = rc.hash
    out = _persist(rc)
    save_benchmark(bench, out / "benchmark.npz")
    print(f"wrote {len(bench)} query groups to {out / 'benchmark.npz'}")
    return EXIT_OK


def cmd_train(args, rc) -> int:
    from .datasets import load_dataset
    from .training import run_pipeline

    ds = load_dataset(args.data)
    if asdict_env(ds.env_config) != rc.tree["env"]:
        log.info("environment section taken from the dataset at %s", args.data)
        rc.tree["env"] = asdict_env(ds.env_config)
    frac = args.val_fraction
    train, val, _ = ds.split((1.0 - frac, frac, 0.0)) if frac > 0 else (ds, None, None)
    out = _persist(rc)
    res = run_pipeline(rc.backbone(), rc.stages(), train, args.with_causal, val, out,
                       extra_header={"config_hash": rc.hash, "dataset": str(args.data)})
    _curves(res.records, out)
    last = res.records[-1] if res.records else {}
    print(f"trained {'+causal' if args.with_causal else 'baseline'} run in {out}; last record {json.dumps(last.get('losses', {}))}")
    return EXIT_OK


def asdict_env(env_cfg) -> dict:
    from dataclasses import asdict

    return asdict(env_cfg)


def _curves(records: list[dict], out: Path, headless: bool = True) -> None:
    from .plotting import get_writer

    curves: dict[str, list[float]] = {}
    for r in records:
        for k, v in r["losses"].items():
            curves.setdefault(f"{r['stage']}/{k}", []).append(v)
    get_writer(headless).curves(curves, out / "curves")


def _check_compatible(header: dict, bench, model) -> None:
    from .errors import ConfigError

    if header["env"]["name"] != bench.env_config.name or header["env"]["obs_mode"] != bench.env_config.obs_mode:
        raise ConfigError(f"run env {header['env']['name']}/{header['env']['obs_mode']} does not match benchmark "
                          f"{bench.env_config.name}/{bench.env_config.obs_mode}")
    if tuple(header["obs_shape"]) != tuple(bench.pool_obs.shape[1:]):
        raise ConfigError(f"observation shape {header['obs_shape']} != benchmark {list(bench.pool_obs.shape[1:])}")
    if header["action_dim"] != bench.actions.shape[-1]:
        raise ConfigError(f"action dim {header['action_dim']} != benchmark {bench.actions.shape[-1]}")


def _evaluate(run_dir: str, bench, horizons, mode):
    from .evaluation import counterfactual_eval
    from .training import load_run

    model, header = load_run(run_dir)
    _check_compatible(header, bench, model)
    report, _ = counterfactual_eval(model, bench, horizons, intervention_mode=mode)
    return report.flat(), header


def cmd_eval(args, rc) -> int:
    from .bench import load_benchmark
    from .evaluation import paired_table

    bench = load_benchmark(args.bench).subset(args.max_samples)
    for h in args.horizons:
        bench.horizon_slot(h)
    mode = rc.evaluation().intervention_mode
    metrics, header = _evaluate(args.run, bench, args.horizons, mode)
    out = _persist(rc)
    doc = {"run": args.run, "benchmark": args.bench, "groups": len(bench), "intervention_mode": mode,
           "metrics": metrics, "config_hash": header.get("config_hash"), "eval_config_hash": rc.hash}
    keys = [f"H@1@{h}" for h in args.horizons] + ["CF-H@1", "CF-MRR"]
    if args.paired_with:
        base, _ = _evaluate(args.paired_with, bench, args.horizons, mode)
        doc["paired"] = {"baseline": base, "delta": {k: metrics[k] - base[k] for k in metrics}}
        table = paired_table({header["backbone"]["family"] + "_" + header["backbone"]["objective"]: (base, metrics)}, keys)
    else:
        table = "\n".join(f"{k:<10} {100 * metrics[k]:6.1f}" for k in keys)
    _write_json(out / "metrics.json", doc)
    (out / "metrics.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_analyze(args, rc) -> int:
    from .causal import load_adjacency
    from .envs import jacobian_template, make_env
    from .evaluation import identifiability_test, structure_recovery
    from .plotting import get_writer

    out = _persist(rc)
    writer = get_writer(args.headless)
    ev = rc.evaluation()
    report: dict = {"config_hash": rc.hash}
    if args.run or args.adjacency:
        path = Path(args.adjacency) if args.adjacency else Path(args.run) / "adjacency.csv"
        A = load_adjacency(path)
        if args.self_compare:
            ref = A
        else:
            env_cfg = rc.tree["env"]
            if args.run and (Path(args.run) / "config.json").exists():
                env_cfg = json.loads((Path(args.run) / "config.json").read_text())["env"]
            env = make_env(env_cfg)
            s_star, _ = env.reset(args.ref_seed)
            ref = jacobian_template(env, s_star).A_GT.T  # Jacobian rows are targets; A[j, i] is j -> i
        diag = structure_recovery(A, ref, k=ev.top_k, rel=ev.rel_threshold, abs_floor=ev.abs_threshold)
        report["structure"] = diag.summary()
        writer.heatmap_pair(A, ref, out / "adjacency_vs_template", titles=("learned A", "A_GT" if not args.self_compare else "learned A"))
        print(f"rank correlation {diag.rank_correlation:.4f}  top-{diag.k} overlap {diag.topk_overlap:.3f}")
    if args.identifiability:
        res = identifiability_test(args.d, args.edges, args.samples, seeds=tuple(range(args.seeds)))
        report["identifiability"] = {"shd": res["shd"], "mean_shd": res["mean_shd"], "config": res["config"]}
        for r in res["runs"]:
            writer.heatmap_pair(r["A_hat"], r["A_star"], out / f"identifiability_seed{r['seed']}", titles=("learned A", "planted A"))
        print(f"identifiability SHD per seed {res['shd']} mean {res['mean_shd']:.3f}")
    if len(report) == 1:
        raise InputError("nothing to analyze: pass --run/--adjacency and/or --identifiability")
    _write_json(out / "analysis.json", report)
    return EXIT_OK


def cmd_ablate(args, rc) -> int:
    from dataclasses import asdict

    from .backbone import BackboneConfig
    from .bench import load_benchmark
    from .datasets import load_dataset
    from .evaluation import ablation_table, ablation_variants, counterfactual_eval, run_ablation_grid
    from .training import StageConfig, run_pipeline

    ds = load_dataset(args.data)
    bench = load_benchmark(args.bench)
    train, val, _ = ds.split((0.9, 0.1, 0.0))
    variants = ablation_variants(args.split_scale)
    if args.variants:
        names = [v.strip() for v in args.variants.split(",")]
        unknown = [n for n in names if n not in variants]
        if unknown:
            raise InputError(f"unknown ablation rows {unknown}")
        variants = {n: variants[n] for n in names}
    base = {"backbone": dict(rc.tree["backbone"], family="GNN", objective="contrastive"),
            "stages": {k: v for k, v in rc.tree["stages"].items() if k != "stage_split"}, "with_causal": True}
    out = _persist(rc)
    mode = rc.evaluation().intervention_mode

    def runner(cfg: dict) -> dict:
        st = {k: v for k, v in cfg["stages"].items() if k != "stage_split"}
        scfg = StageConfig(**st, weights=rc.weights())
        res = run_pipeline(BackboneConfig(**cfg["backbone"]), scfg, train, cfg["with_causal"], val)
        return counterfactual_eval(res.model, bench, (1,), intervention_mode=mode)[0].flat()

    rows = run_ablation_grid(base, variants, lambda c: _rename(runner(c)))
    table = ablation_table(rows)
    _write_json(out / "ablation.json", {"rows": rows, "config_hash": rc.hash, "base": asdict(BackboneConfig(**base["backbone"]))})
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _rename(m: dict) -> dict:
    return {"H@1": m["H@1@1"], "MRR": m["MRR@1"], "CF-H@1": m["CF-H@1"], "CF-MRR": m["CF-MRR"]}


COMMANDS = {"gen-data": cmd_gen_data, "bench": cmd_bench, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = resolve_args(args)
        if args.dry_run:
            print(rc.dumps())
            return EXIT_OK
        return COMMANDS[args.command](args, rc)
    except CwlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
