"""Experiment driver: ``bgcond {condense,attack,eval,defend,report,convert,schema}``.

Exit codes: 0 success, 2 bad configuration or dataset, 3 missing or
mismatched artifact, 4 nothing to report.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import CONFIG_SCHEMA, ENV_THREADS, ExperimentConfig, load_config
from .errors import BGCError, BundleCorrupt, BundleIncomplete, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_EMPTY = 0, 2, 3, 4


class ArtifactError(BGCError):
    pass


def _limit_threads():
    n = os.environ.get(ENV_THREADS)
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- artifact layout ----------------------------------------------------------


def clean_dir(out: Path, seed: int) -> Path:
    return out / "clean" / f"seed_{seed}"


def attack_dir(out: Path, seed: int) -> Path:
    return out / "attack" / f"seed_{seed}"


def results_dir(out: Path) -> Path:
    return out / "results"


def _write_fingerprint(d: Path, cfg: ExperimentConfig, stage: str, seed: int):
    doc = {"stage": stage, "seed": int(seed), "fingerprint": cfg.fingerprint(stage, seed),
           "config": cfg.stage_config(stage, seed)}
    (d / "fingerprint.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def check_artifact(d: Path, cfg: ExperimentConfig, stage: str, seed: int, force: bool = False):
    fp = d / "fingerprint.json"
    if not fp.is_file():
        raise ArtifactError(f"{d}: missing {stage} artifact (run `bgcond {'condense' if stage == 'clean' else 'attack'}` first)")
    doc = json.loads(fp.read_text())
    want = cfg.fingerprint(stage, seed)
    if doc.get("fingerprint") != want and not force:
        raise ArtifactError(f"{d}: config fingerprint {doc.get('fingerprint', '?')[:12]} does not match "
                            f"current config {want[:12]} (use --force to evaluate anyway)")


def _publish(tmp: Path, final: Path):
    if final.exists():
        shutil.rmtree(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    os.replace(tmp, final)


# --- trials -------------------------------------------------------------------


def _condense_trial(cfg: ExperimentConfig, seed: int, out: Path) -> str:
    from .condense import condense_clean, save_synthetic

    _limit_threads()
    g = cfg.load_graph()
    S = condense_clean(g, replace(cfg.condensation, seed=seed))
    final = clean_dir(out, seed)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=final.parent))
    save_synthetic(S, tmp)
    _write_fingerprint(tmp, cfg, "clean", seed)
    _publish(tmp, final)
    return str(final)


def _attack_trial(cfg: ExperimentConfig, seed: int, out: Path) -> str:
    from .backdoor import run_bgc
    from .condense import save_synthetic

    _limit_threads()
    g = cfg.load_graph()
    S, gen, trace = run_bgc(g, replace(cfg.condensation, seed=seed), cfg.attack)
    final = attack_dir(out, seed)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=final.parent))
    save_synthetic(S, tmp / "synthetic")
    gen.save(tmp / "generator")
    (tmp / "trace.json").write_text(json.dumps(trace) + "\n")
    (tmp / "selection.json").write_text(json.dumps({"nodes": [int(v) for v in S.selection.nodes]}) + "\n")
    _write_fingerprint(tmp, cfg, "attack", seed)
    _publish(tmp, final)
    return str(final)


def _run_trials(fn, cfg, seeds, out, workers):
    if workers <= 1 or len(seeds) <= 1:
        return [fn(cfg, s, out) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds, [out] * len(seeds)))


def _pending(seeds, dirs, overwrite):
    todo = []
    for s, d in zip(seeds, dirs):
        if (d / "fingerprint.json").is_file() and not overwrite:
            _log(f"{d} exists; keeping it (pass --overwrite to recompute)")
        else:
            todo.append(s)
    return todo


def cmd_condense(cfg: ExperimentConfig, out: Path, seeds, overwrite=False, workers=1) -> int:
    todo = _pending(seeds, [clean_dir(out, s) for s in seeds], overwrite)
    for p in _run_trials(_condense_trial, cfg, todo, out, workers):
        _log(f"wrote {p}")
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, out: Path, seeds, overwrite=False, workers=1) -> int:
    todo = _pending(seeds, [attack_dir(out, s) for s in seeds], overwrite)
    for p in _run_trials(_attack_trial, cfg, todo, out, workers):
        _log(f"wrote {p}")
    return EXIT_OK


def _context(cfg: ExperimentConfig) -> dict:
    a, c = cfg.attack, cfg.condensation
    return {"epochs": c.epochs, "trigger_size": a.trigger_size, "poison_ratio": a.poison_ratio, "ratio": c.ratio,
            "directed": a.directed, "generator": a.generator}


def _eval_trial(cfg: ExperimentConfig, seed: int, out: Path, defenses, force: bool, timing: bool):
    from .backdoor import TriggerGenerator
    from .condense import load_synthetic
    from .evaluation import MetricsRecord, compute_asr, compute_cta, defense_eval, fit_downstream

    _limit_threads()
    g = cfg.load_graph()
    ad = attack_dir(out, seed)
    check_artifact(ad, cfg, "attack", seed, force)
    S = load_synthetic(ad / "synthetic")
    gen = TriggerGenerator.load(ad / "generator")
    cd = clean_dir(out, seed)
    clean_S = None
    if (cd / "fingerprint.json").is_file():
        check_artifact(cd, cfg, "clean", seed, force)
        clean_S = load_synthetic(cd)
    y_t = cfg.attack.target_class
    src = cfg.attack.source_class if cfg.attack.directed else None
    excl = cfg.evaluation.get("exclude_already_target", True)
    training = cfg.training
    rows = []
    for spec in cfg.models:
        t0 = time.perf_counter()
        model = fit_downstream(spec, S, seed, **training)
        cta = compute_cta(model, g, g.test)
        asr = compute_asr(model, gen, g, g.test, y_t, excl, src)
        c_cta = c_asr = None
        if clean_S is not None:
            clean = fit_downstream(spec, clean_S, seed, **training)
            c_cta = compute_cta(clean, g, g.test)
            c_asr = compute_asr(clean, gen, g, g.test, y_t, excl, src)
        wall = time.perf_counter() - t0 if timing else 0.0
        base = MetricsRecord(g.name, cfg.condensation.method, cfg.condensation.ratio, int(seed), cta, asr, c_cta,
                             c_asr, wall_s=wall, arch=spec.kind, context=_context(cfg))
        rows.append(base)
        for dspec in defenses:
            t1 = time.perf_counter()
            kw = {k: v for k, v in dspec.items() if k != "name"}
            rec = defense_eval(S, gen, g, spec, seed, base, dspec["name"], y_t=y_t, exclude_already_target=excl,
                               source_class=src, training=training, **kw)
            rec.wall_s = time.perf_counter() - t1 if timing else 0.0
            rows.append(rec)
    return rows


def _evaluate(cfg, out, seeds, overwrite, workers, force, timing, defenses, stem) -> int:
    from .evaluation import summarize, write_csv, write_jsonl

    rd = results_dir(out)
    csv_path = rd / f"{stem}.csv"
    if csv_path.exists() and not overwrite:
        _log(f"{csv_path} exists; keeping it (pass --overwrite to recompute)")
        return EXIT_OK
    for s in seeds:
        check_artifact(attack_dir(out, s), cfg, "attack", s, force)
    args = [(cfg, s, out, defenses, force, timing) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_eval_star, args))
    else:
        chunks = [_eval_trial(*a) for a in args]
    records = [r for chunk in chunks for r in chunk]
    if stem == "defense":
        records = [r for r in records if r.defense is not None] + [r for r in records if r.defense is None]
    # single writer: rows are collected from the trials and written here only
    rd.mkdir(parents=True, exist_ok=True)
    write_csv(records, csv_path)
    write_jsonl(records, rd / f"{stem}.jsonl")
    (rd / f"{stem}_summary.json").write_text(json.dumps(summarize(records), indent=1, sort_keys=True) + "\n")
    _log(f"wrote {csv_path} ({len(records)} rows)")
    return EXIT_OK


def _eval_star(a):
    return _eval_trial(*a)


def cmd_eval(cfg, out, seeds, overwrite=False, workers=1, force=False, timing=True) -> int:
    return _evaluate(cfg, out, seeds, overwrite, workers, force, timing, [], "results")


def cmd_defend(cfg, out, seeds, overwrite=False, workers=1, force=False, timing=True) -> int:
    defenses = cfg.defenses or [{"name": "prune"}, {"name": "randsmooth"}]
    return _evaluate(cfg, out, seeds, overwrite, workers, force, timing, defenses, "defense")


# --- report ---------------------------------------------------------------------

SERIES_KEYS = ("epochs", "trigger_size", "poison_ratio", "ratio")
SERIES_METRICS = ("cta", "asr", "c_cta", "c_asr", "d_cta", "d_asr")


def collect_records(root: Path) -> list[dict]:
    """Result rows under ``root``; rows repeated across files (ignoring wall time) count once."""
    rows, seen = [], set()
    for path in sorted(Path(root).rglob("*.jsonl")):
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            key = json.dumps({k: v for k, v in r.items() if k != "wall_s"}, sort_keys=True)
            if key not in seen:
                seen.add(key)
                rows.append(r)
    return rows


def series(rows: list[dict], key: str) -> list[dict]:
    """Group rows by (dataset, method, arch, defense, x) and average each metric; sorted by x."""
    groups: dict = {}
    for r in rows:
        x = r.get("context", {}).get(key, r.get(key))
        if x is None:
            continue
        gk = (r["dataset"], r["method"], r.get("arch", "GCN"), r.get("defense") or "", x)
        groups.setdefault(gk, []).append(r)
    out = []
    for gk in sorted(groups, key=lambda k: (k[4], k[0], k[1], k[2], k[3])):
        members = groups[gk]
        entry = {"x": gk[4], "dataset": gk[0], "method": gk[1], "arch": gk[2], "defense": gk[3], "n": len(members)}
        for m in SERIES_METRICS:
            vals = [r[m] for r in members if r.get(m) is not None]
            entry[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{m}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def _write_series(entries, path: Path):
    import csv

    cols = ["x", "dataset", "method", "arch", "defense", "n"] + [f"{m}_{s}" for m in SERIES_METRICS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for e in entries:
            w.writerow({k: ("" if e[k] is None else e[k]) for k in cols})


def cmd_report(root: Path, out: Path | None = None, overwrite=False) -> int:
    rows = collect_records(root)
    if not rows:
        _log(f"{root}: no result rows found")
        return EXIT_EMPTY
    out = Path(out) if out is not None else Path(root) / "series"
    out.mkdir(parents=True, exist_ok=True)
    for key in SERIES_KEYS:
        path = out / f"{key}.csv"
        if path.exists() and not overwrite:
            _log(f"{path} exists; keeping it (pass --overwrite to recompute)")
            continue
        _write_series(series(rows, key), path)
        _log(f"wrote {path}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------------


def _seeds(text):
    try:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed list must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgcond", description="Backdoored graph condensation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("condense", "clean condensation per seed"), ("attack", "backdoored condensation per seed"),
                        ("eval", "train test models on the artifacts and write results.csv"),
                        ("defend", "eval with the configured defenses; writes defense.csv")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="experiment JSON")
        s.add_argument("--out", help="output directory (default: config 'output' or $BGCOND_OUT/<name>)")
        s.add_argument("--seeds", type=_seeds, help="comma-separated seeds overriding the config")
        s.add_argument("--overwrite", action="store_true", help="recompute and replace existing outputs")
        s.add_argument("--workers", type=int, default=1, help="parallel trials")
        if name in ("eval", "defend"):
            s.add_argument("--force", action="store_true", help="accept artifacts with a different fingerprint")
            s.add_argument("--no-timing", action="store_true", help="write wall_s as 0 for byte-stable rows")
    r = sub.add_parser("report", help="aggregate result rows into per-figure series")
    r.add_argument("results", help="directory searched recursively for *.jsonl result rows")
    r.add_argument("--out", help="series directory (default: RESULTS/series)")
    r.add_argument("--overwrite", action="store_true")
    c = sub.add_parser("convert", help="build a graph bundle from raw citation files", add_help=False)
    c.add_argument("rest", nargs=argparse.REMAINDER)
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(CONFIG_SCHEMA, indent=1))
        return EXIT_OK
    if args.command == "convert":
        from .convert import main as convert_main

        return convert_main(args.rest)
    _limit_threads()
    try:
        if args.command == "report":
            return cmd_report(Path(args.results), args.out, args.overwrite)
        cfg = load_config(args.config)
        out = cfg.output_dir(args.out)
        seeds = args.seeds or cfg.seeds
        if args.command == "condense":
            return cmd_condense(cfg, out, seeds, args.overwrite, args.workers)
        if args.command == "attack":
            return cmd_attack(cfg, out, seeds, args.overwrite, args.workers)
        fn = cmd_eval if args.command == "eval" else cmd_defend
        return fn(cfg, out, seeds, args.overwrite, args.workers, args.force, not args.no_timing)
    except (ConfigError, BundleIncomplete, BundleCorrupt) as e:
        _log(f"error: {type(e).__name__}: {e}")
        return EXIT_CONFIG
    except ArtifactError as e:
        _log(f"error: {e}")
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
