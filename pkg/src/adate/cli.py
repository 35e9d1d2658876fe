"""Command-line pipeline: surrogates -> oracle -> adate -> test -> report.

Every command reads the same run configuration and writes under ``--out``.
Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 coefficient generation stopped at its iteration cap.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .mdp import ValidationError
from .mixture import MixtureWeights, adate_generate
from .surrogate import QTable, backward_induction_q, coverage_violations, critical_set
from .testing import (ADATE, NADE, NDE, Campaign, aar, bootstrap_required_tests, is_environment,
                      nde_environment, oracle_moments, required_tests, run_campaign, running_stats)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NONCONVERGED = 0, 2, 3, 4
ENVIRONMENTS = (NDE, NADE, ADATE)

log = logging.getLogger("adate")


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# artifact helpers


def stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}


def stamp_line(cfg: RunConfig) -> str:
    s = stamp(cfg)
    return f"version={s['version']} config_hash={s['config_hash']} seed={s['seed']}"


def write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def _finite(x):
    return x if x is None or math.isfinite(x) else "inf"


def surrogate_dir(cfg: RunConfig) -> Path:
    return cfg.out / "surrogates"


def load_surrogates(cfg: RunConfig) -> list:
    """Tables listed in the surrogate manifest, checked against the configured grid."""
    manifest = read_json(surrogate_dir(cfg) / "manifest.json", "surrogate manifest (run `adate surrogates` first)")
    expected = cfg.grid.grid_hash()
    if manifest["grid_hash"] != expected:
        raise ConfigError("grid", f"surrogate tables were built for grid {manifest['grid_hash']}, "
                                  f"config describes {expected}; rerun `adate surrogates`")
    if list(manifest["labels"]) != list(cfg.surrogates):
        raise ConfigError("surrogates", f"tables cover {manifest['labels']}, config lists {list(cfg.surrogates)}")
    tables = []
    for label in manifest["labels"]:
        path = surrogate_dir(cfg) / f"{label}.qtab"
        if not path.exists():
            raise MissingArtifact(f"surrogate table missing: {path}")
        q = QTable.load(path, label)
        if q.grid_hash != expected:
            raise ConfigError("grid", f"{path} has grid hash {q.grid_hash}, config describes {expected}")
        tables.append(q)
    return tables


def load_alpha(cfg: RunConfig, n: int) -> np.ndarray:
    data = read_json(cfg.out / "adate" / "alpha_final.json", "alpha_final.json (run `adate adate` first)")
    alpha = MixtureWeights(np.asarray(data["alpha"], dtype=float)).alpha
    if alpha.shape != (n,):
        raise ConfigError("surrogates", f"alpha_final.json has {len(alpha)} weights for {n} surrogates")
    return alpha


def environment(cfg: RunConfig, kind: str, phi: np.ndarray):
    if kind == NDE:
        return nde_environment(phi)
    tables = load_surrogates(cfg)
    alpha = np.full(len(tables), 1.0 / len(tables)) if kind == NADE else load_alpha(cfg, len(tables))
    return is_environment(tables, alpha, phi, cfg.campaign.epsilon, cfg.grid.n_cells, kind=kind)


# ---------------------------------------------------------------------------
# commands


def cmd_surrogates(cfg: RunConfig, args) -> int:
    phi = cfg.phi()
    out = surrogate_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for label, model in cfg.surrogates.items():
        q = backward_induction_q(cfg.chain(model), phi)
        q.label = label
        q.save(out / f"{label}.qtab")
        tables.append(q)
        print(f"wrote {out / f'{label}.qtab'}")
    crit = critical_set(tables, phi, cfg.grid.n_cells)
    write_json(out / "manifest.json", {**stamp(cfg), "grid_hash": cfg.grid.grid_hash(), "grid": cfg.grid.name,
                                       "labels": list(cfg.surrogates), "critical_states": len(crit)})
    if args.oracle:
        oracle = backward_induction_q(cfg.chain(cfg.av), phi)
        bad = coverage_violations(oracle, tables, phi)
        write_json(out / "coverage_report.json", {**stamp(cfg), "av": getattr(cfg.av, "name", ""),
                                                  "violations": len(bad), "states": bad.tolist()})
        print(f"coverage violations against the AV oracle: {len(bad)}")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    phi = cfg.phi()
    chain = cfg.chain(cfg.av)
    q = backward_induction_q(chain, phi)
    out = cfg.out / "oracle"
    out.mkdir(parents=True, exist_ok=True)
    q.label = "av"
    q.save(out / "av.qtab")
    init = cfg.initial()
    report = {**stamp(cfg), "av": getattr(cfg.av, "name", ""), "grid_hash": cfg.grid.grid_hash(),
              "initial_cells": int(len(init.support)), "environments": {}}
    thr, conf = cfg.campaign.rhw_threshold, cfg.campaign.confidence
    for kind in ENVIRONMENTS:
        try:
            env = environment(cfg, kind, phi)
        except MissingArtifact:
            continue
        report["environments"][kind] = oracle_moments(chain, env, init).to_dict(thr, conf)
    report["mu"] = report["environments"][NDE]["mu_true"]
    write_json(out / "oracle.json", report)
    print(f"oracle crash rate {report['mu']:.6g} over {report['initial_cells']} initial cells")
    return EXIT_OK


def cmd_adate(cfg: RunConfig, args) -> int:
    tables = load_surrogates(cfg)
    phi = cfg.phi()
    chain = cfg.chain(cfg.av)
    lcfg = cfg.learner_config()
    result = adate_generate(tables, chain, phi, lcfg, cfg.rng("learning"))
    out = cfg.out / "adate"
    mix = sum(a * q.values for a, q in zip(result.weights.alpha, tables))
    visited = result.learner.visited_critical_pairs()
    linf = float(np.abs(result.learner.q - mix)[visited].max()) if visited.any() else 0.0
    result.write(out, stamp_line(cfg), **stamp(cfg), labels=list(cfg.surrogates))
    result.learner.save(out / "learner", cfg.grid.grid_hash(), {**stamp(cfg), "linf_to_mixture": linf})
    alpha = ", ".join(f"{a:.4f}" for a in result.weights.alpha)
    print(f"alpha = [{alpha}] after {len(result.history)} iterations ({result.terminated_by})")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _series(campaign: Campaign, confidence: float, points: int = 200) -> dict:
    mu, r = running_stats(campaign.terms, confidence)
    idx = np.unique(np.geomspace(1, campaign.n, num=min(points, campaign.n)).astype(int)) - 1
    return {"n": (idx + 1).tolist(), "running_mu": mu[idx].tolist(),
            "running_rhw": [_finite(float(x)) for x in r[idx]]}


def cmd_test(cfg: RunConfig, args) -> int:
    kind = args.env
    phi = cfg.phi()
    env = environment(cfg, kind, phi)
    chain = cfg.chain(cfg.av)
    cc = cfg.campaign
    episodes = args.episodes or cc.episodes
    campaign = run_campaign(chain, env, cfg.initial(), episodes, cfg.seed_for(f"campaign/{kind}"),
                            cc.chunk_size, args.threads)
    est = campaign.estimate(cc.confidence)
    boot = bootstrap_required_tests(campaign.terms, cc.rhw_threshold, cfg.bootstrap_reps, cfg.rng("bootstrap"),
                                    cc.n_min, cc.confidence)
    out = cfg.out / "test"
    out.mkdir(parents=True, exist_ok=True)
    campaign.to_csv(out / f"{kind}_campaign.csv", stamp_line(cfg), cc.confidence)
    summary = {**stamp(cfg), "environment": kind, **est.to_dict(), "epsilon": env.epsilon if kind != NDE else 0.0,
               "alpha": list(env.alpha), "rhw_threshold": cc.rhw_threshold,
               "required_tests": required_tests(campaign.terms, cc.rhw_threshold, cc.n_min, cc.confidence),
               "bootstrap": boot.to_dict(), "rhw_series": _series(campaign, cc.confidence)}
    write_json(out / f"{kind}_summary.json", summary)
    print(f"{kind}: mu = {est.mu:.6g}, RHW = {est.rhw:.4g}, bootstrap required tests = {boot.mean:.6g}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    paths = [Path(p) for p in args.summaries] or sorted((cfg.out / "test").glob("*_summary.json"))
    if not paths:
        raise MissingArtifact(f"no campaign summaries under {cfg.out / 'test'} (run `adate test` first)")
    summaries = [read_json(p, "campaign summary") for p in paths]
    hashes = {s["config_hash"] for s in summaries}
    if len(hashes) > 1:
        print(f"warning: summaries come from {len(hashes)} different configurations; see config_mismatch",
              file=sys.stderr)
    nde = next((s for s in summaries if s["environment"] == NDE), None)
    ref_hash = (nde or summaries[0])["config_hash"]
    rows = []
    for s in summaries:
        boot = s["bootstrap"]
        row = {"environment": s["environment"], "n": s["n"], "mu": s["mu"], "var": s["var"], "rhw": s["rhw"],
               "required_tests": s["required_tests"], "bootstrap_mean": boot["mean"],
               "bootstrap_censored": boot["censored"], "aar": "", "aar_unrounded": "",
               "config_hash": s["config_hash"], "config_mismatch": s["config_hash"] != ref_hash}
        if nde is not None and boot["mean"] > 0:
            n_nde = nde["bootstrap"]["mean"]
            row["aar"] = aar(n_nde, boot["mean"])
            row["aar_unrounded"] = n_nde / boot["mean"]
        rows.append(row)
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        fh.write(f"# {stamp_line(cfg)}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(out / "rhw_series.csv", "w", newline="") as fh:
        fh.write(f"# {stamp_line(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(["environment", "n", "running_mu", "running_rhw"])
        for s in summaries:
            ser = s["rhw_series"]
            for n, m, r in zip(ser["n"], ser["running_mu"], ser["running_rhw"]):
                w.writerow([s["environment"], n, m, r])
    text = format_report(rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def format_report(rows: list) -> str:
    head = f"{'env':<8}{'n':>10}{'mu':>14}{'RHW':>10}{'required':>12}{'boot mean':>12}{'AAR':>6}  config"
    lines = [head, "-" * len(head)]
    for r in rows:
        rhw = r["rhw"] if isinstance(r["rhw"], str) else f"{r['rhw']:.4f}"
        req = "-" if r["required_tests"] is None else str(r["required_tests"])
        flag = " MISMATCH" if r["config_mismatch"] else ""
        lines.append(f"{r['environment']:<8}{r['n']:>10}{r['mu']:>14.6g}{rhw:>10}{req:>12}"
                     f"{r['bootstrap_mean']:>12.1f}{str(r['aar']):>6}  {r['config_hash']}{flag}")
    return "\n".join(lines) + "\n"


COMMANDS = {"surrogates": cmd_surrogates, "oracle": cmd_oracle, "adate": cmd_adate, "test": cmd_test,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="K=V", dest="overrides",
                        help="override a config field, e.g. learner.c=5 (repeatable)")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads for campaigns")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adate", description="Adaptive testing environments for a vehicle under test.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("surrogates", parents=[common], help="compute surrogate challenge tables")
    s.add_argument("--oracle", action="store_true", help="also report coverage violations against the AV oracle")
    sub.add_parser("oracle", parents=[common], help="exact crash rate and estimator moments for the AV")
    sub.add_parser("adate", parents=[common], help="learn mixture coefficients for the AV")
    t = sub.add_parser("test", parents=[common], help="run a test campaign")
    t.add_argument("--env", choices=ENVIRONMENTS, required=True, metavar="KIND", help="nde, nade or adate")
    t.add_argument("--episodes", type=int, metavar="N", help="episode budget (overrides the config)")
    r = sub.add_parser("report", parents=[common], help="compare campaign summaries")
    r.add_argument("summaries", nargs="*", help="summary JSON files (default: all under OUT/test)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if getattr(args, "episodes", None) is not None and args.episodes < 1:
            raise ConfigError("--episodes", "must be at least 1")
        cfg = RunConfig.load(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
