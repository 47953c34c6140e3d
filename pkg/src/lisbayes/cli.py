"""Command-line experiment runner.

Every subcommand reads an :class:`ExperimentConfig`, writes CSV files (with
header rows) into the output directory and finishes with ``manifest.json``
listing each file with its SHA-256 hash. Exit codes: 0 success, 2 config
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import build_problem, load_config
from .diagnostics import (
    divergence_from_samples,
    exact_H0,
    exact_H1,
    posterior_samples,
    linear_bounds_report,
    reports_to_json,
)
from .errors import ConfigError, ContractError, DegenerateEnsembleError, LISError, NumericalError
from .gram import GramAccumulator, GramKind, estimate_H0_reference, estimate_H1_chain, estimate_H1_weighted
from .model import LinearGaussianModel, write_synthetic_csv
from .samplers import MHConfig, run_adaptive_lis, run_lis_mcmc, run_smc_lis
from .marginalize import SurrogateDensity
from .subspace import leading_eigs, residual, spectrum_report, truncate_by_tail


def sub_seed(seed, *tags):
    """Deterministic 63-bit seed derived from the master seed and string tags."""
    key = [int(seed) & 0xFFFFFFFF, int(seed) >> 32] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(key).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Output directory bookkeeping for one subcommand invocation."""

    def __init__(self, cfg, command, threads=1):
        self.cfg = cfg
        self.command = command
        self.threads = max(int(threads), 1)
        self.out = cfg.out
        self.files = []
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def write_matrix(self, name, X, prefix="x"):
        X = np.atleast_2d(X)
        header = ["index"] + [f"{prefix}{j}" for j in range(X.shape[1])]
        self.write_csv(name, header, ([i, *row] for i, row in enumerate(X)))

    def write_json(self, name, text):
        with open(self.path(name), "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
        self.files.append(name)

    def pmap(self, fn, items):
        items = list(items)
        if self.threads == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def finish(self, extra=None):
        entries = []
        for name in self.files:
            with open(self.path(name), "rb") as fh:
                data = fh.read()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": int(self.cfg.seed),
            "config": self.cfg.to_dict(),
            "files": entries,
        }
        if extra:
            manifest.update(extra)
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_fmt)
            fh.write("\n")
        return manifest


def _model(cfg):
    return build_problem(cfg.model).model


def _oracle(cfg, model):
    return cfg.diagnostics.oracle and isinstance(model, LinearGaussianModel)


def _target_samples(cfg, model, n=None):
    n = n or cfg.diagnostics.n_target
    d = cfg.diagnostics
    return posterior_samples(model, n, sub_seed(cfg.seed, "target"), n_particles=d.smc_particles,
                             d_r=min(max(cfg.subspace.d_r), model.dim) or 1, thin=d.thin)


def _grams(cfg, model, X):
    out = {}
    if "H0" in cfg.gram.kinds:
        out["H0"] = estimate_H0_reference(model, cfg.gram.m, sub_seed(cfg.seed, "H0", cfg.gram.seed))
    if "H1" in cfg.gram.kinds:
        out["H1"] = estimate_H1_chain(model, X, GramKind.WEIGHTED_IS)
    return out


def _d_r_list(cfg, H=None):
    ds = list(cfg.subspace.d_r)
    if cfg.subspace.tail_tol is not None and H is not None:
        ds = sorted(set(ds) | {truncate_by_tail(H, cfg.subspace.tail_tol)})
    return ds


# --------------------------------------------------------------------------
# Subcommands


def cmd_spectrum(cfg, run):
    model = _model(cfg)
    X = _target_samples(cfg, model)
    grams = _grams(cfg, model, X)
    for name, H in grams.items():
        rep = spectrum_report(H.matrix)
        run.write_csv(f"spectrum_{name}.csv", ["r", "eigenvalue", "gap", "tail_sum"], rep.rows())
    if _oracle(cfg, model) and {"H0", "H1"} <= set(grams):
        reports = linear_bounds_report(model, grams["H0"], grams["H1"], m_variance=cfg.gram.m,
                                  seed=sub_seed(cfg.seed, "linear_bounds"))
        run.write_json("bounds.json", reports_to_json(reports))


def cmd_approx_error(cfg, run):
    model = _model(cfg)
    X = _target_samples(cfg, model)
    grams = _grams(cfg, model, X)
    rows = []
    for gname, H in grams.items():
        for d_r in _d_r_list(cfg, H.matrix):
            S = leading_eigs(H.matrix, d_r)
            for kind in cfg.surrogate.kinds:
                for M in cfg.surrogate.M:
                    est = divergence_from_samples(model, S, X, kind, M, sub_seed(cfg.seed, "bank", gname, d_r, kind, M),
                                                  measure="hellinger")
                    rows.append([d_r, str(kind).upper(), gname, M, est.value, est.std_err])
    run.write_csv("approx_error.csv", ["d_r", "kind", "gram_kind", "M", "value", "std_err"], rows)


def cmd_mc_error(cfg, run):
    model = _model(cfg)
    X = _target_samples(cfg, model)
    grams = _grams(cfg, model, X)
    reps = cfg.diagnostics.replications
    rows = []
    for gname, H in grams.items():
        for d_r in _d_r_list(cfg, H.matrix):
            S = leading_eigs(H.matrix, d_r)
            for kind in cfg.surrogate.kinds:
                for M in cfg.surrogate.M_sweep:
                    def one(k, kind=kind, M=M):
                        seed = sub_seed(cfg.seed, "mc", gname, d_r, kind, M, k)
                        return divergence_from_samples(model, S, X, kind, M, seed, measure="hellinger").value
                    vals = np.array(run.pmap(one, range(reps)))
                    se = vals.std(ddof=1) / np.sqrt(reps) if reps > 1 else 0.0
                    rows.append([d_r, str(kind).upper(), gname, M, vals.mean(), se])
    run.write_csv("mc_error.csv", ["d_r", "kind", "gram_kind", "M", "value", "std_err"], rows)


def cmd_subspace_stability(cfg, run):
    model = _model(cfg)
    d = model.dim
    oracle = _oracle(cfg, model)
    m_ref = cfg.gram.m_reference
    qs = cfg.diagnostics.quantiles

    def gram_sample(name, m, seed):
        rng = np.random.default_rng(seed)
        Xr = rng.standard_normal((m, d))
        logf, G = model.log_likelihood_and_grad(Xr)
        if name == "H0":
            return GramAccumulator(d).add(G).estimate(GramKind.REFERENCE_MC).matrix
        return estimate_H1_weighted(G, logf, GramKind.WEIGHTED_IS).matrix

    rows = []
    for name in cfg.gram.kinds:
        if oracle:
            H_true = exact_H0(model) if name == "H0" else exact_H1(model)
        else:
            H_true = gram_sample(name, m_ref, sub_seed(cfg.seed, "stability-ref", name))
        tails = spectrum_report(H_true).tail_sums
        for m in cfg.gram.m_values:
            seeds = [sub_seed(cfg.seed, "stability", name, m, k) for k in range(cfg.diagnostics.replications)]
            mats = run.pmap(lambda s, name=name, m=m: gram_sample(name, m, s), seeds)
            for d_r in _d_r_list(cfg, H_true):
                R = np.array([residual(leading_eigs(Hh, d_r), H_true) for Hh in mats])
                rows.append([name, m, d_r, *np.quantile(R, qs), R.mean(), tails[d_r]])
    header = ["gram_kind", "m", "d_r"] + [f"q{q:g}" for q in qs] + ["mean", "optimal_tail"]
    run.write_csv("subspace_stability.csv", header, rows)


def _mh_config(sc):
    return MHConfig(sc.step_size, sc.proposal, sc.rho)


def cmd_mcmc(cfg, run):
    model = _model(cfg)
    sc = cfg.sampler
    seed = sub_seed(cfg.seed, "mcmc")
    if sc.algorithm == "adaptive":
        res = run_adaptive_lis(model, sc.epochs, sc.t, sc.K_star, sc.d_r, _mh_config(sc), seed, sc.kind, sc.M)
        chain, S = res.chain, res.subspace
    else:
        H0 = estimate_H0_reference(model, cfg.gram.m, sub_seed(cfg.seed, "H0", cfg.gram.seed))
        S = leading_eigs(H0.matrix, sc.d_r)
        rng = np.random.default_rng(seed)
        sur = SurrogateDensity(model, S, sc.kind, sc.M, seed=sub_seed(cfg.seed, "bank"))
        chain = run_lis_mcmc(model, sur, rng.standard_normal(model.dim), sc.t, _mh_config(sc), rng)
    run.write_matrix("chain.csv", chain.states)
    run.write_csv("acceptance.csv", ["accept_rate_r", "accept_rate_perp", "mean_alpha"],
                  [[chain.accept_rate_r, chain.accept_rate_perp, chain.mean_alpha]])
    run.write_csv("subspace.csv", ["component"] + [f"v{j}" for j in range(S.rank)],
                  ([i, *row] for i, row in enumerate(S.basis)))
    return {"accept_rate_r": chain.accept_rate_r, "accept_rate_perp": chain.accept_rate_perp}


def cmd_smc(cfg, run):
    model = _model(cfg)
    sc = cfg.sampler
    res = run_smc_lis(model, sc.n_particles, sc.d_r, sc.tau, sc.betas, sc.t_k, _mh_config(sc),
                      sub_seed(cfg.seed, "smc"), sc.kind, sc.M, resampling=sc.resampling)
    run.write_matrix("particles.csv", res.particles)
    run.write_csv("levels.csv", ["level", "beta", "ess_before", "accept_rate_r", "accept_rate_perp"],
                  ([k, lv.beta, lv.ess_before, lv.accept_rate_r, lv.accept_rate_perp]
                   for k, lv in enumerate(res.levels, 1)))
    return {"betas": res.betas, "accept_rates": [[lv.accept_rate_r, lv.accept_rate_perp] for lv in res.levels]}


def cmd_synth_data(cfg, run):
    problem = build_problem(cfg.model)
    write_synthetic_csv(problem, run.path("data.csv"), run.path("truth.csv"))
    run.files += ["data.csv", "truth.csv"]


COMMANDS = {
    "spectrum": cmd_spectrum,
    "approx-error": cmd_approx_error,
    "mc-error": cmd_mc_error,
    "subspace-stability": cmd_subspace_stability,
    "mcmc": cmd_mcmc,
    "smc": cmd_smc,
    "synth-data": cmd_synth_data,
}


def build_parser():
    p = argparse.ArgumentParser(prog="lisbayes", description="Likelihood-informed subspace experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for replication loops")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides={"seed": args.seed, "out": args.out})
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, args.command, args.threads)
    try:
        extra = COMMANDS[args.command](cfg, run)
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, DegenerateEnsembleError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except LISError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    run.finish(extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
