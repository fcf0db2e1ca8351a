"""Command-line harness: temperature sweeps, plots, oracle reports and gradient checks.

    capmoe sweep --estimator sample,sample_skip_iw --taus 0.1,1,10 --out runs.csv
    capmoe plot runs.csv --out-dir plots
    capmoe oracle --out-dir oracle_reports
    capmoe gradcheck
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from capmoe import __version__
from capmoe import model as toy
from capmoe import oracle
from capmoe.core import RngStream, sample_gumbel
from capmoe.estimators import gating_grad, gating_objective
from capmoe.matching import conditional_values, solve_gumbel_matching
from capmoe.training import ESTIMATORS, RunRecord, RunSpec, train

DEFAULT_TAUS = (0.03, 0.1, 0.3, 1.0, 3.0, 10.0)
BALANCE_WEIGHTS = (0.0, 0.01, 0.03, 0.1)

CSV_COLUMNS = (
    "estimator", "tau", "seed", "balance_weight", "use_sinkhorn", "use_iw",
    "final_mse", "success", "max_iw", "mean_skip_fraction",
    "mean_sinkhorn_iters", "failed",
)

RECORDED_DECISIONS = {
    "batch": "full dataset each step (n=100, k=2, capacity 50)",
    "init": "router (0, 0); expert (w, b) ~ Normal(0, 0.5^2) per seed",
    "baseline": "scalar EMA, reset to 0 per run, updated after each step",
    "evaluation": "argmax routing; gating runs scale the expert output by its router probability",
    "plot_aggregate": "median over seeds with per-seed points",
}


@dataclass
class ExperimentConfig:
    estimator: list = field(default_factory=lambda: ["sample"])
    taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    seeds: list = field(default_factory=lambda: list(range(10)))
    steps: int = 10_000
    lr: float = 0.1
    balance_weight: list = field(default_factory=lambda: [0.0])
    use_sinkhorn: list = field(default_factory=lambda: [False])
    use_iw: list = field(default_factory=lambda: [True])
    baseline_decay: float = 0.99
    success_threshold: float = 0.02
    workers: int = 1

    def __post_init__(self):
        for name in self.estimator:
            if name not in ESTIMATORS:
                raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")
        if not self.taus or any(not t > 0 for t in self.taus):
            raise ValueError("temperatures must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if any(w < 0 for w in self.balance_weight):
            raise ValueError("balance weight must be non-negative")
        if not 0 < self.baseline_decay < 1:
            raise ValueError("baseline decay must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def cells(self) -> list[RunSpec]:
        """Grid cells in the fixed output order."""
        out = []
        for est, bw, sh, iw, tau, seed in product(self.estimator, self.balance_weight, self.use_sinkhorn,
                                                  self.use_iw, self.taus, self.seeds):
            out.append(RunSpec(est, float(tau), int(seed), steps=self.steps, lr=self.lr,
                               balance_weight=float(bw), use_sinkhorn=bool(sh), use_iw=bool(iw),
                               baseline_decay=self.baseline_decay,
                               success_threshold=self.success_threshold))
        return out


_LIST_KEYS = {"estimator": str, "taus": float, "seeds": int, "balance_weight": float,
              "use_sinkhorn": "bool", "use_iw": "bool"}
_SCALAR_KEYS = {"steps": int, "lr": float, "baseline_decay": float, "success_threshold": float,
                "workers": int}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str):
    if key in _LIST_KEYS:
        kind = _LIST_KEYS[key]
        items = [s.strip() for s in text.split(",") if s.strip()]
        if key == "seeds" and len(items) == 1 and "-" in items[0]:
            lo, hi = items[0].split("-")
            return list(range(int(lo), int(hi) + 1))
        return [_parse_bool(s) if kind == "bool" else kind(s) for s in items]
    if key in _SCALAR_KEYS:
        return _SCALAR_KEYS[key](text.strip())
    raise ValueError(f"unknown config key {key!r}")


def load_config_file(path) -> dict:
    """``key = value`` per line; ``#`` starts a comment; lists are comma-separated."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = _parse_value(key, text)
    return values


def _run_cell(spec: RunSpec) -> RunRecord:
    return train(spec)


def run_grid(config: ExperimentConfig, progress=None) -> list[RunRecord]:
    """One training run per cell; results come back in cell order whatever the worker count."""
    cells = config.cells()
    if config.workers == 1 or len(cells) == 1:
        records = []
        for spec in cells:
            records.append(train(spec))
            if progress:
                progress(records[-1])
        return records
    with get_context("spawn").Pool(config.workers) as pool:
        records = []
        for rec in pool.imap(_run_cell, cells, chunksize=1):
            records.append(rec)
            if progress:
                progress(rec)
    return records


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def record_row(rec: RunRecord) -> dict:
    s = rec.spec
    return {
        "estimator": s.estimator, "tau": s.tau, "seed": s.seed, "balance_weight": s.balance_weight,
        "use_sinkhorn": s.use_sinkhorn, "use_iw": s.use_iw, "final_mse": float(rec.final_mse),
        "success": bool(rec.success), "max_iw": float(rec.max_iw),
        "mean_skip_fraction": float(rec.mean_skip_fraction),
        "mean_sinkhorn_iters": float(rec.mean_sinkhorn_iters), "failed": bool(rec.failed),
    }


def write_csv(rows: list[dict], path, columns=None) -> None:
    columns = list(columns or rows[0].keys())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_records(records: list[RunRecord], path, config: ExperimentConfig | None = None) -> Path:
    """CSV plus a ``.meta.json`` sidecar; neither carries timestamps, so reruns are byte-identical."""
    path = Path(path)
    write_csv([record_row(r) for r in records], path, CSV_COLUMNS)
    meta = {"version": __version__, "columns": list(CSV_COLUMNS), "decisions": RECORDED_DECISIONS}
    if config is not None:
        meta["config"] = asdict(config)
    meta_path = path.with_name(path.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta_path


_CSV_TYPES = {"tau": float, "seed": int, "balance_weight": float, "use_sinkhorn": _parse_bool,
              "use_iw": _parse_bool, "final_mse": float, "success": _parse_bool, "max_iw": float,
              "mean_skip_fraction": float, "mean_sinkhorn_iters": float, "failed": _parse_bool}


def read_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: _CSV_TYPES.get(k, str)(v) for k, v in row.items()} for row in rows]


def variant_label(row: dict) -> str:
    label = row["estimator"]
    if row["balance_weight"]:
        label += f"_bw{row['balance_weight']:g}"
    if row["use_sinkhorn"]:
        label += "_sinkhorn"
    if not row["use_iw"]:
        label += "_noiw"
    return label


def emit_plots(rows: list[dict], out_dir, threshold: float = 0.02) -> list[Path]:
    """One SVG per estimator variant: per-seed final MSE and the median over seeds against tau."""
    if not rows:
        raise ValueError("no records to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "capmoe"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(variant_label(row), []).append(row)

    paths = []
    for label in sorted(groups):
        g = groups[label]
        taus = sorted({r["tau"] for r in g})
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        px = [r["tau"] for r in g if np.isfinite(r["final_mse"]) and r["final_mse"] > 0]
        py = [r["final_mse"] for r in g if np.isfinite(r["final_mse"]) and r["final_mse"] > 0]
        ax.scatter(px, py, s=10, alpha=0.5, color="tab:blue", label="seeds")
        med_t, med_v = [], []
        for t in taus:
            vals = [r["final_mse"] for r in g if r["tau"] == t and np.isfinite(r["final_mse"])]
            if vals:
                med_t.append(t)
                med_v.append(float(np.median(vals)))
        ax.plot(med_t, med_v, "o-", color="tab:orange", label="median")
        ax.axhline(threshold, color="black", linestyle="--", linewidth=1)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("temperature")
        ax.set_ylabel("final MSE")
        ax.set_title(label)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"mse_{label}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# oracle suite


@dataclass
class OracleSettings:
    solver_instances: int = 200
    unbiased_configs: int = 5
    unbiased_draws: int = 100_000
    unbiased_n: int = 8
    marginal_instances: int = 4
    marginal_samples: int = 20_000
    seed: int = 0
    inject_bias: bool = False
    min_within: float = 0.95


def _solver_rows(settings: OracleSettings) -> list[dict]:
    rng = RngStream(settings.seed, 101)
    sizes = [(n, k) for n in (2, 4, 6, 8) for k in sorted({2, n // 2})]
    rows = []
    for idx in range(settings.solver_instances):
        n, k = sizes[idx % len(sizes)]
        c = n // k
        logits = rng.normal(0.0, 1.0, (n, k))
        noise = sample_gumbel(rng, n, k)
        sol = solve_gumbel_matching(logits, noise, 1.0, c)
        scores = logits + noise
        best, _ = oracle.enumeration_optimum(scores, c)
        cond = conditional_values(sol, scores)
        cond_ref = oracle.constrained_optima(scores, c)
        val_err = abs(sol.value - best)
        cond_err = float(np.abs(cond - cond_ref).max())
        rows.append({"instance": idx, "n": n, "k": k, "solver_value": sol.value, "enum_value": best,
                     "value_err": val_err, "conditional_err": cond_err,
                     "ok": bool(val_err <= 1e-9 and cond_err <= 1e-9)})
    return rows


def _unbiased_rows(settings: OracleSettings) -> list[dict]:
    rows = []
    for cfg in range(settings.unbiased_configs):
        theta = oracle.random_params(RngStream(settings.seed + cfg, 102))
        data = toy.gen_dataset(settings.seed + cfg, n=settings.unbiased_n)
        for e, name in enumerate(oracle.UNBIASED_ESTIMATORS):
            inject = settings.inject_bias and name == "sample_skip_iw"
            rep = oracle.check_unbiased(name, theta, data, 1.0, settings.unbiased_draws,
                                        RngStream(settings.seed + cfg, 200 + e), inject_bias=inject)
            for p in range(toy.NUM_PARAMS):
                rows.append({"config": cfg, "estimator": name, "component": p,
                             "exact": rep.exact[p], "mean": rep.mean[p], "stderr": rep.stderr[p],
                             "zscore": float(rep.zscores[p]), "within_3se": bool(rep.within[p])})
    return rows


def _marginal_rows(settings: OracleSettings) -> tuple[list[dict], list[dict]]:
    rng = RngStream(settings.seed, 103)
    table, summary = [], []
    sizes = [(4, 2), (6, 2), (6, 3), (8, 2)]
    for idx in range(settings.marginal_instances):
        n, k = sizes[idx % len(sizes)]
        logits = rng.normal(0.0, 1.0, (n, k))
        rep = oracle.compare_marginals(logits, 1.0, n // k, settings.marginal_samples,
                                       RngStream(settings.seed + idx, 104))
        for i, j, gib, gm, se, sh, sm in rep.rows():
            table.append({"instance": idx, "i": i, "j": j, "gibbs": gib, "gumbel_matching": gm,
                          "gm_stderr": se, "sinkhorn": sh, "softmax": sm})
        summary.append({"instance": idx, "n": n, "k": k, "tau": 1.0,
                        **rep.max_abs, "tv_gibbs_vs_gm_joint": rep.tv_joint})
    return table, summary


def run_oracle_suite(out_dir, settings: OracleSettings | None = None, log=print) -> bool:
    """Writes solver, unbiasedness and marginal reports; returns False if a hard check fails."""
    settings = settings or OracleSettings()
    out_dir = Path(out_dir)
    ok = True

    solver = _solver_rows(settings)
    write_csv(solver, out_dir / "solver.csv")
    bad = sum(not r["ok"] for r in solver)
    log(f"solver: {len(solver) - bad}/{len(solver)} instances exact")
    ok &= bad == 0

    unbiased = _unbiased_rows(settings)
    write_csv(unbiased, out_dir / "unbiased.csv")
    for name in oracle.UNBIASED_ESTIMATORS:
        flags = [r["within_3se"] for r in unbiased if r["estimator"] == name]
        frac = float(np.mean(flags))
        passed = frac >= settings.min_within
        log(f"unbiased {name}: {frac:.3f} of components within 3 SE {'PASS' if passed else 'FAIL'}")
        ok &= passed

    table, summary = _marginal_rows(settings)
    write_csv(table, out_dir / "marginals.csv")
    write_csv(summary, out_dir / "marginal_summary.csv")
    for row in summary:
        log(f"marginals instance {row['instance']} (n={row['n']}, k={row['k']}): "
            f"gibbs-gm {row['gibbs_vs_gm']:.4f}  sinkhorn-gm {row['sinkhorn_vs_gm']:.4f}  "
            f"softmax-gm {row['softmax_vs_gm']:.4f}  joint TV {row['tv_gibbs_vs_gm_joint']:.4f}")
    return bool(ok)


# ---------------------------------------------------------------------------
# gradient check


def run_gradcheck(num_configs: int = 100, seed: int = 0, n: int = 10, h: float = 1e-5) -> list[float]:
    """Worst relative error per random configuration over score, expert and gating gradients."""
    rng = RngStream(seed, 105)
    worst = []
    for _ in range(num_configs):
        theta = rng.normal(0.0, 1.0, toy.NUM_PARAMS)
        x = 2.0 * rng.uniform_open(n) - 1.0
        y = rng.normal(0.0, 1.0, n)
        z = (rng.uniform_open(n) < 0.5).astype(np.int64)
        iw = rng.uniform_open(n) + 0.5
        e_score, e_f = toy.check_analytic_grads(theta, x, y, z, h)
        data = toy.ToyDataset(x, y)
        num = toy.numeric_grad(lambda t: gating_objective(t, data, z, iw), theta, h)
        e_gate = toy.relative_error(gating_grad(theta, data, z, iw).flat(), num)
        worst.append(max(e_score, e_f, e_gate))
    return worst


# ---------------------------------------------------------------------------
# argument handling


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags given here override it")
    p.add_argument("--estimator", help=f"comma-separated, from: {', '.join(ESTIMATORS)}")
    p.add_argument("--taus", help="comma-separated temperatures")
    p.add_argument("--seeds", help="comma-separated seeds or a range like 0-9")
    p.add_argument("--steps", help="Adam steps per run")
    p.add_argument("--lr")
    p.add_argument("--balance-weight", dest="balance_weight", help="comma-separated")
    p.add_argument("--use-sinkhorn", dest="use_sinkhorn", help="comma-separated booleans")
    p.add_argument("--use-iw", dest="use_iw", help="comma-separated booleans")
    p.add_argument("--baseline-decay", dest="baseline_decay")
    p.add_argument("--success-threshold", dest="success_threshold")
    p.add_argument("--workers")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config_file(args.config) if args.config else {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = _parse_value(f.name, raw)
    return ExperimentConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="train every grid cell and write a CSV")
    _add_grid_flags(sweep)
    sweep.add_argument("--out", default="runs.csv")
    sweep.add_argument("--plot-dir", help="also write plots here")
    sweep.add_argument("--quiet", action="store_true")

    plot = sub.add_parser("plot", help="plots from a sweep CSV")
    plot.add_argument("csv")
    plot.add_argument("--out-dir", default="plots")
    plot.add_argument("--threshold", type=float, default=0.02)

    orc = sub.add_parser("oracle", help="brute-force checks of solver, estimators and marginals")
    orc.add_argument("--out-dir", default="oracle_reports")
    defaults = OracleSettings()
    for f in fields(OracleSettings):
        if f.name == "inject_bias":
            orc.add_argument("--inject-bias", action="store_true",
                             help="drop the skip reweighting factor (deliberate fault)")
        else:
            orc.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                             type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))

    gc = sub.add_parser("gradcheck", help="analytic gradients against central differences")
    gc.add_argument("--configs", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "sweep":
        try:
            config = config_from_args(args)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

        def progress(rec: RunRecord) -> None:
            if not args.quiet:
                s = rec.spec
                status = "FAILED " + rec.error if rec.failed else f"mse={rec.final_mse:.5f}"
                print(f"{s.estimator} tau={s.tau:g} seed={s.seed} {status}", flush=True)

        records = run_grid(config, progress)
        write_records(records, args.out, config)
        wins = sum(r.success for r in records)
        print(f"wrote {args.out}: {len(records)} runs, {wins} successes")
        if args.plot_dir:
            rows = [record_row(r) for r in records]
            for path in emit_plots(rows, args.plot_dir, config.success_threshold):
                print(f"wrote {path}")
        return 0
    if args.command == "plot":
        for path in emit_plots(read_records(args.csv), args.out_dir, args.threshold):
            print(f"wrote {path}")
        return 0
    if args.command == "oracle":
        settings = OracleSettings(**{f.name: getattr(args, f.name) for f in fields(OracleSettings)})
        ok = run_oracle_suite(args.out_dir, settings)
        print("oracle suite " + ("passed" if ok else "FAILED"))
        return 0 if ok else 1
    if args.command == "gradcheck":
        worst = run_gradcheck(args.configs, args.seed)
        bad = sum(e >= args.tol for e in worst)
        print(f"gradcheck: {len(worst) - bad}/{len(worst)} configurations below {args.tol:g}, "
              f"worst {max(worst):.2e}")
        return 0 if bad == 0 else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
