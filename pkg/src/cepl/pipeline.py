"""Pipeline stages construct -> stats -> asip -> report with persisted artifacts.

Every stage writes its outputs under ``output_dir`` and a ``<stage>.json``
summary; later stages reload earlier outputs from disk, so stages can be run
one at a time.  Wall-clock times go to ``timings.json``, the only output that
is not reproducible.
"""

import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import asip, io, partition, stats
from .config import STAGES, config_hash, prepare_output
from .errors import CeplError, ConfigError, MissingStage, StageFailure

def derived_seed(master, tag):
    """64-bit seed for one consumer of randomness, derived from the master seed."""
    ss = np.random.SeedSequence([int(master), sum(ord(c) << (8 * i) for i, c in enumerate(tag))])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class StatReport:
    run_id: str
    config_hash: str
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    output_dir: str = ""

    def to_dict(self):
        return {"run_id": self.run_id, "config_hash": self.config_hash,
                "stages": [s for s in STAGES if s in self.artifacts],
                "artifacts": self.artifacts, "summary": self.summary}


class Context:
    """Config, output location and objects shared between stages of one run."""

    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = max(int(threads), 1)
        self.out = prepare_output(cfg)
        self.hash = config_hash(cfg)
        self.partition = None
        self.table = None
        self.stats_summary = None

    def path(self, name):
        return os.path.join(self.out, name)

    def write_csv(self, name, header, rows):
        io.write_csv(self.path(name), header, rows, self.hash)
        return name

    def write_jsonl(self, name, records):
        io.write_jsonl(self.path(name), records, self.hash)
        return name

    def write_json(self, name, obj):
        io.write_json(self.path(name), obj, self.hash)
        return name

    def check_hash(self, name):
        h = io.embedded_hash(self.path(name))
        if h != self.hash:
            raise MissingStage(f"{name} was produced by config {h}, not {self.hash}")

    # ---- loading earlier stages

    def load_partition(self):
        if self.partition is None:
            name = "partition.jsonl"
            if not os.path.exists(self.path(name)):
                raise MissingStage("construct stage output not found")
            self.check_hash(name)
            cc = self.cfg.construction
            ivs = [partition.interval_from_dict(r, cc.a_star) for r in io.read_jsonl(self.path(name))]
            levels = partition.levels_from_intervals(ivs, cc)
            summ = io.read_json(self.path("construct.json"))
            self.partition = partition.Partition(cc, levels, ivs, summ.get("nu1"),
                                                 summ.get("small_constant", math.nan))
        return self.partition

    def load_table(self):
        if self.table is None:
            name = "normalization.csv"
            if not os.path.exists(self.path(name)):
                raise MissingStage("stats stage output not found")
            self.check_hash(name)
            _, rows = io.read_csv(self.path(name))
            grid = np.array([float(r["a"]) for r in rows])
            means = np.array([float(r["mean"]) for r in rows])
            sig = np.array([float(r["sigma"]) for r in rows])
            self.table = stats.NormalizationTable(self.cfg.observable, grid, means, sig)
            self.stats_summary = io.read_json(self.path("stats.json"))
        return self.table


# ------------------------------------------------------------------ construct


def stage_construct(ctx):
    cc = ctx.cfg.construction
    part = partition.build_partition(cc)
    ctx.partition = part
    files = [ctx.write_jsonl("partition.jsonl", (iv.to_dict() for iv in part.intervals))]
    rows = partition.measure_report(part.levels, cc)
    files.append(ctx.write_csv("measure_report.csv", ["level", "retained", "excluded", "e_j", "bound_ok"],
                               rows))
    deep = part.deepest
    small = [partition.no_small_image_check(lev, cc) for lev in part.levels if lev.level >= cc.n1]
    margins = [iv.ce_margin for iv in deep.intervals if not math.isnan(iv.ce_margin)]
    counts = Counter(f"{iv.status}/{iv.reason}" if iv.reason else iv.status for iv in part.intervals)
    summary = {
        "nu1": part.nu1,
        "retained_fraction": part.retained_fraction(),
        "retained_measure": deep.retained_measure,
        "active_intervals": len(deep.intervals),
        "total_intervals": len(part.intervals),
        "conservation_error": partition.conservation_error(part),
        "small_constant": part.small_constant,
        "min_ce_margin": min(margins) if margins else math.nan,
        "small_image_violations": sum(len(r.violations) for r in small),
        "status_counts": dict(sorted(counts.items())),
    }
    files.append(ctx.write_json("construct.json", summary))
    return files, summary


# ------------------------------------------------------------------ stats


def stage_stats(ctx):
    cfg, ss = ctx.cfg, ctx.cfg.stats
    part = ctx.load_partition()
    a0 = cfg.construction.a_star
    deep = part.deepest.intervals
    lo = min(iv.lo for iv in deep)
    hi = max(iv.hi for iv in deep)
    grid = a0 + np.linspace(lo, hi, ss.grid_points)
    seed = derived_seed(cfg.master_seed, "stats")
    table = stats.normalization_table(cfg.observable, grid, ss.k_max, ss.orbit_length, ss.burn_in,
                                      seed, ss.sigma_floor, ss.bins, ctx.threads, ss.method, ss.block)
    ctx.table = table
    files = [ctx.write_csv("normalization.csv", ["a", "mean", "sigma", "sigma2", "stderr", "flag"],
                           [(a, m, s, e.sigma2, e.stderr, e.flag or "")
                            for a, m, s, e in zip(table.grid, table.means, table.sigmas,
                                                  table.estimates)])]
    files.append(ctx.write_csv("variance.csv", ["a", "sigma2", "k_max", "tail_bound", "rho_fit"],
                               [(e.a, e.sigma2, e.k_max, e.tail_bound, e.rho_fit)
                                for e in table.estimates]))
    dec = stats.decorrelation_fit(a0, cfg.observable, cfg.observable, ss.decorrelation_n_max,
                                  ss.decorrelation_length, ss.burn_in,
                                  derived_seed(cfg.master_seed, "decorrelation"))
    files.append(ctx.write_csv("correlations.csv", ["k", "C_k"], list(enumerate(dec.correlations))))
    theta = cfg.harness.theta
    theta_src = "config"
    if theta is None:
        theta = stats.sigma_holder_fit(table.grid, cfg.observable, sigmas=table.sigmas).exponent
        theta_src = "sigma_holder_fit"
    summary = {
        "grid": [float(a) for a in table.grid],
        "sigma_min": float(table.sigmas.min()),
        "sigma_max": float(table.sigmas.max()),
        "sigma2_mean": float(np.mean(table.sigmas ** 2)),
        "mean_min": float(table.means.min()),
        "mean_max": float(table.means.max()),
        "rho": dec.rho,
        "rho_band": list(dec.band),
        "rho_r2": dec.r2,
        "rho_flag": dec.flag,
        "theta": theta,
        "theta_source": theta_src,
        "method": ss.method,
        "epsilon_phi": stats.restriction_halfwidth(cfg.construction.epsilon, table, a0,
                                                   ss.sigma_floor),
    }
    ctx.stats_summary = summary
    files.append(ctx.write_json("stats.json", summary))
    return files, summary


# ------------------------------------------------------------------ asip


def harness_config(ctx):
    hs = ctx.cfg.harness
    ctx.load_table()
    ss = ctx.stats_summary
    rho = hs.rho if hs.rho is not None else ss["rho"]
    return asip.HarnessConfig(theta=ss["theta"], rho=rho, lambda_ce=ctx.cfg.construction.lambda_ce,
                              M0=hs.M0)


def stage_asip(ctx):
    cfg, hs = ctx.cfg, ctx.cfg.harness
    part = ctx.load_partition()
    table = ctx.load_table()
    hc = harness_config(ctx)
    scheme = asip.BlockScheme(hs.gamma, hs.delta)
    a0 = cfg.construction.a_star
    files = []
    files.append(ctx.write_csv("blocks.csv", ["j", "start", "end"],
                               [(j, scheme.block(j)[0], scheme.block(j)[-1])
                                for j in range(1, hs.J + hs.K_u + 1)]))

    # martingale approximation on the cells
    tree = asip.build_cell_tree(part.levels, a0, hs.n_nodes)
    res = asip.run_harness(tree, table, scheme, hs.J, hs.K_u,
                           chi_dump_max=cfg.construction.max_depth, check=False)
    seq = res.seq
    w = seq.weights
    unorm = np.sqrt(np.average(seq.u ** 2, axis=1, weights=w))
    rows = []
    for j in range(1, hs.J + 1):
        rows.append((j, int(seq.labels[j - 1].max()) + 1,
                     math.sqrt(np.average(seq.y[j - 1] ** 2, weights=w)),
                     math.sqrt(np.average(seq.Y[j - 1] ** 2, weights=w)),
                     unorm[j - 1], seq.tail[j - 1], res.node_mean[j - 1], res.node_se[j - 1],
                     res.martingale_z[j - 1], j in res.truncation))
    files.append(ctx.write_csv("martingale.csv",
                               ["j", "cells", "y_norm", "Y_norm", "u_norm", "u_tail", "cond_mean",
                                "cond_se", "z", "truncation_flag"], rows))
    files.append(ctx.write_jsonl("chi.jsonl", res.chi_records))

    # CLT and LLN at sampled kept parameters
    Ns = sorted(hs.clt_N)
    Nmax = Ns[-1]
    pars = asip.sample_parameters(tree, hs.clt_params, derived_seed(cfg.master_seed, "clt"))
    xis = asip.xi_matrix(a0, pars, table, 1, Nmax)
    clt = [asip.clt_test(xis[:N].sum(axis=0), N) for N in Ns]
    files.append(ctx.write_csv("clt.csv", ["N", "KS", "p_value"], [(c.N, c.ks, c.p_value) for c in clt]))
    files.append(ctx.write_csv("clt_values.csv", ["index", "a", "z"],
                               [(i, a0 + d, z) for i, (d, z) in enumerate(zip(pars, clt[-1].values))]))
    nb = scheme.block_of(Nmax) - 1
    wsum = asip.block_sums_from_xis(xis, scheme, nb)
    nend = scheme.block(nb)[-1]
    Ngrid = np.unique(np.geomspace(100, nend, 12).astype(np.int64))
    lln = asip.lln_check(wsum, scheme, Ngrid)
    files.append(ctx.write_csv("lln.csv", ["a", "fitted_lln_exponent"],
                               [(a0 + d, e) for d, e in zip(pars, lln)]))

    # LIL trajectories at the first sampled parameters
    lil_rows, lil_final = [], []
    for q in range(min(hs.lil_params, len(pars))):
        n, v, rm = asip.lil_diagnostic(pars[q], hs.lil_N_max, lambda x, d=pars[q]: table.apply(a0 + d, x),
                                       a0=a0)
        keep = np.unique(np.geomspace(1, len(n), 200).astype(np.int64) - 1)
        lil_rows.extend((q, a0 + pars[q], int(n[k]), v[k], rm[k]) for k in keep)
        lil_final.append(float(rm[-1]))
    files.append(ctx.write_csv("lil.csv", ["index", "a", "n", "value", "running_max"], lil_rows))

    # variance linearity at fixed k over the admissible window and a fixed one
    vl_rows, vl = [], {}
    vpars = asip.sample_parameters(tree, hs.vl_params, derived_seed(cfg.master_seed, "vl"))
    for k in hs.vl_k:
        nwin = hc.max_n(k)
        ntot = max(nwin, hs.vl_n_supp)
        xk = asip.xi_matrix(a0, vpars, table, k, k + ntot - 1)
        scan = asip.variance_linearity_scan(k, xk, ntot, seed=derived_seed(cfg.master_seed, "boot"))
        for n, d, s in zip(scan.ns, scan.deviation, scan.stderr):
            vl_rows.append((k, int(n), d, s, bool(n <= nwin)))
        if nwin >= 2:
            win = asip.variance_linearity_scan(k, xk, nwin, seed=derived_seed(cfg.master_seed, "boot"))
            wslope, wci = win.slope, list(win.slope_ci)
        else:
            wslope, wci = math.nan, [math.nan, math.nan]
        supp = asip.variance_linearity_scan(k, xk, hs.vl_n_supp,
                                            seed=derived_seed(cfg.master_seed, "boot"))
        vl[str(k)] = {"window_n_max": nwin, "slope": wslope, "slope_ci": wci,
                      "supplementary_n_max": hs.vl_n_supp, "supplementary_slope": supp.slope,
                      "supplementary_slope_ci": list(supp.slope_ci)}
    files.append(ctx.write_csv("variance_linearity.csv", ["k", "n", "deviation", "stderr", "in_window"],
                               vl_rows))

    summary = {
        "lambda0": hc.lambda0, "eta": hc.eta, "alpha": hc.alpha, "theta": hc.theta, "rho": hc.rho,
        "leaves": tree.n_leaves,
        "telescoping_error": asip.telescoping_error(seq),
        "martingale_max_z": float(np.max(res.martingale_z)),
        "martingale_ok": res.martingale_ok(),
        "martingale_failing_blocks": [int(j) + 1 for j in np.nonzero(res.martingale_z > 3)[0]],
        "truncation_flags": res.truncation,
        "u_growth_exponent": res.u_growth_exponent(),
        "u_growth_bound": 5 * hs.delta / 3 + 0.2,
        "chi_decay_exponent": res.chi_decay(hs.delta),
        "ks": {str(c.N): c.ks for c in clt},
        "ks_p": {str(c.N): c.p_value for c in clt},
        "lln_fraction_below_1": float(np.mean(lln < 1)),
        "lln_median_exponent": float(np.median(lln)),
        "lil_final_running_max": lil_final,
        "variance_linearity": vl,
    }
    files.append(ctx.write_json("asip.json", summary))
    return files, summary


# ------------------------------------------------------------------ report


def _load_summary(ctx, stage):
    p = ctx.path(f"{stage}.json")
    if not os.path.exists(p):
        return None
    ctx.check_hash(f"{stage}.json")
    d = io.read_json(p)
    d.pop("config_hash", None)
    return d


def stage_report(ctx, report):
    for s in ("construct", "stats", "asip"):
        if s not in report.summary:
            d = _load_summary(ctx, s)
            if d is None:
                raise MissingStage(f"{s} stage output not found")
            report.summary[s] = d
            report.artifacts[s] = _stage_files(ctx, s)
    files = emit_plot_data(report)
    files.append("report.json")
    report.artifacts["report"] = files
    io.write_json(ctx.path("report.json"), report.to_dict())
    return files


def _stage_files(ctx, stage):
    names = {
        "construct": ["partition.jsonl", "measure_report.csv", "construct.json"],
        "stats": ["normalization.csv", "variance.csv", "correlations.csv", "stats.json"],
        "asip": ["blocks.csv", "martingale.csv", "chi.jsonl", "clt.csv", "clt_values.csv",
                 "lln.csv", "lil.csv", "variance_linearity.csv", "asip.json"],
    }[stage]
    return [n for n in names if os.path.exists(ctx.path(n))]


def emit_plot_data(report):
    """Plot-ready CSVs (under plots/) for every completed stage of a report.

    Files and headers:
      retention.csv            j, retained, retained_fraction, excluded, e_j
      ce_margin_hist.csv       bin_lo, bin_hi, count
      correlation_decay.csv    k, C_k, abs_C_k, fit
      clt_cdf.csv              z, empirical_cdf, normal_cdf
      lil.csv                  index, n, value, running_max
      variance_linearity.csv   k, n, deviation, stderr, in_window
    """
    done = [s for s in ("construct", "stats", "asip") if s in report.artifacts]
    if not done:
        raise MissingStage("report has no completed stages")
    out = report.output_dir
    pdir = os.path.join(out, "plots")
    os.makedirs(pdir, exist_ok=True)
    h = report.config_hash

    def src(name):
        p = os.path.join(out, name)
        if not os.path.exists(p):
            raise MissingStage(f"{name} not found")
        return io.read_csv(p)[1]

    files = []
    if "construct" in done:
        rows = src("measure_report.csv")
        total = float(rows[0]["retained"])
        io.write_csv(os.path.join(pdir, "retention.csv"),
                     ["j", "retained", "retained_fraction", "excluded", "e_j"],
                     [(int(r["level"]), float(r["retained"]), float(r["retained"]) / total,
                       float(r["excluded"]), float(r["e_j"])) for r in rows], h)
        recs = io.read_jsonl(os.path.join(out, "partition.jsonl"))
        m = np.array([r["ce_margin"] for r in recs
                      if r["status"] == partition.ACTIVE and r["ended"] is None
                      and math.isfinite(r["ce_margin"])])
        counts, edges = np.histogram(m, bins=40) if m.size else (np.zeros(0, int), np.zeros(1))
        io.write_csv(os.path.join(pdir, "ce_margin_hist.csv"), ["bin_lo", "bin_hi", "count"],
                     [(edges[i], edges[i + 1], int(c)) for i, c in enumerate(counts)], h)
        files += ["plots/retention.csv", "plots/ce_margin_hist.csv"]
    if "stats" in done:
        rows = src("correlations.csv")
        rho = report.summary["stats"]["rho"]
        c = np.array([float(r["C_k"]) for r in rows])
        io.write_csv(os.path.join(pdir, "correlation_decay.csv"), ["k", "C_k", "abs_C_k", "fit"],
                     [(k, c[k], abs(c[k]), abs(c[0]) * rho ** k) for k in range(len(c))], h)
        files.append("plots/correlation_decay.csv")
    if "asip" in done:
        z = np.sort(np.array([float(r["z"]) for r in src("clt_values.csv")]))
        emp = np.arange(1, len(z) + 1) / len(z)
        io.write_csv(os.path.join(pdir, "clt_cdf.csv"), ["z", "empirical_cdf", "normal_cdf"],
                     [(a, b, c) for a, b, c in zip(z, emp, sps.norm.cdf(z))], h)
        io.write_csv(os.path.join(pdir, "lil.csv"), ["index", "n", "value", "running_max"],
                     [(int(r["index"]), int(r["n"]), float(r["value"]), float(r["running_max"]))
                      for r in src("lil.csv")], h)
        io.write_csv(os.path.join(pdir, "variance_linearity.csv"),
                     ["k", "n", "deviation", "stderr", "in_window"],
                     [(int(r["k"]), int(r["n"]), float(r["deviation"]), float(r["stderr"]),
                       r["in_window"]) for r in src("variance_linearity.csv")], h)
        files += ["plots/clt_cdf.csv", "plots/lil.csv", "plots/variance_linearity.csv"]
    return files


# ------------------------------------------------------------------ driver

_RUNNERS = {"construct": stage_construct, "stats": stage_stats, "asip": stage_asip}


def run(cfg, threads=1, stages=None):
    """Execute the requested stages in order and return the StatReport.

    Module errors are re-raised as StageFailure naming the stage; files
    written by earlier stages are kept.
    """
    stages = tuple(cfg.stages if stages is None else stages)
    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}")
    ctx = Context(cfg, threads)
    report = StatReport(run_id=ctx.hash, config_hash=ctx.hash, output_dir=ctx.out)
    for s in stages:
        t = time.perf_counter()
        try:
            if s == "report":
                stage_report(ctx, report)
            else:
                files, summary = _RUNNERS[s](ctx)
                report.artifacts[s] = files
                report.summary[s] = summary
        except StageFailure:
            raise
        except (CeplError, ValueError, FloatingPointError) as e:
            raise StageFailure(s, e) from e
        finally:
            report.timings[s] = time.perf_counter() - t
            io.write_json(ctx.path("timings.json"), {"wall_clock_seconds": report.timings})
    return report
