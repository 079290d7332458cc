"""Command-line interface.

Every command takes one or more JSON config files (``-c``; later files
override earlier ones section by section) and writes into a fresh output
directory together with ``manifest.json``. The manifest stores the resolved
config, input file hashes and the content hash of every output, so
``mlndlm rerun <manifest>`` can repeat the run and check the outputs match.

Config sections
---------------
model
    Either a full model (``F, G, W, gamma, M0, C0, Xi0, nu0``) or a builtin:
    ``{"builtin": "random_walk", "w": 0.45}`` or ``{"builtin":
    "local_trend", "w_theta": .., "w_alpha": .., "damping": ..}``; builtins
    also accept ``Xi0, nu0, M0, C0``. Defaults to the random walk with
    ``w = 0.45``.
hyperprior
    ``{"a": [...], "b": [...]}``, inverse-gamma shape and rate per state
    component (gibbs only).
optimizer
    ``max_iters, grad_tol, rel_obj_tol, history_size, init_mode``.
dmdb
    ``alpha, num_samples, seed``.
gibbs
    ``iters, seed, alpha, point_mode, burn_in``.
simulation
    Simulation settings (see :class:`mlndlm.simulator.SimConfig`).
bench
    ``D, T`` (lists), ``reps, seed, n_total, w, missing_fraction``.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure or
non-convergence (outputs are still written), 4 file-system errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import __version__
from .compositional import alr_to_clr
from .fileio import (canonical_json, content_hash, load_dataset, read_json,
                     sha256_bytes, sha256_file, write_dataset, write_json,
                     write_matrix, write_table)
from .model import (HyperPrior, ModelSpec, ValidationError, Violation,
                    builtin_local_trend, builtin_random_walk, check, dumps_config,
                    loads_config)
from .optimize import OptimizerConfig, map_estimate
from .samplers import (DMDBConfig, GibbsError, PipelineError, cu_pipeline,
                       ess_report, gibbs_chain, interval_summary)
from .simulator import SimConfig, simulate, sparsity_report

log = logging.getLogger("mlndlm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SECTIONS = ("model", "hyperprior", "optimizer", "dmdb", "gibbs", "simulation", "bench")
# columns that hold wall-clock measurements and are left out of content hashes
TIMING_COLUMNS = {
    "trajectory.csv": ("seconds",),
    "bench.csv": ("sec_per_iter", "total_sec"),
    "bench_summary.csv": ("sec_per_iter_mean", "sec_per_iter_sd", "total_sec_mean", "total_sec_sd"),
}
GIBBS_DEFAULTS = {"iters": 3000, "seed": 0, "alpha": 0.5, "point_mode": False, "burn_in": 0}
BENCH_DEFAULTS = {"D": [3, 10, 30], "T": [100, 300, 600], "reps": 10, "seed": 0,
                  "n_total": 500, "w": 0.45, "missing_fraction": 0.0}


# config handling

def load_config(paths):
    """Merge JSON config files; every problem in every file is reported together."""
    merged = {}
    problems = []
    for path in paths or ():
        with open(path) as fh:
            text = fh.read()
        try:
            loads_config(text)  # structural checks of model/hyperprior
        except ValidationError as exc:
            problems.extend(Violation(f"{path}:{v.field}", v.message) for v in exc.violations)
        try:
            d = json.loads(text)
        except json.JSONDecodeError:
            continue
        if not isinstance(d, dict):
            continue
        for key in d:
            if key not in SECTIONS:
                problems.append(Violation(f"{path}:{key}", f"unknown section (expected one of {SECTIONS})"))
        merged.update(d)
    problems.extend(_section_problems(merged))
    if problems:
        raise ValidationError(problems)
    return merged


def _section_problems(config):
    problems = []
    for name, factory in (("optimizer", OptimizerConfig), ("dmdb", DMDBConfig), ("simulation", SimConfig)):
        if name in config:
            try:
                _section(config, name, factory)
            except ValidationError as exc:
                problems.extend(exc.violations)
    if "gibbs" in config:
        try:
            _check_gibbs(_section(config, "gibbs", None, GIBBS_DEFAULTS))
        except ValidationError as exc:
            problems.extend(exc.violations)
    if "bench" in config:
        unknown = set(config["bench"]) - set(BENCH_DEFAULTS)
        if unknown:
            problems.append(Violation("bench", f"unknown keys {sorted(unknown)}"))
    return problems


def _section(config, name, factory, defaults=None):
    raw = dict(defaults or {})
    raw.update(config.get(name, {}) or {})
    if factory is None:
        return raw
    try:
        return factory(**raw)
    except TypeError as exc:
        raise ValidationError([Violation(name, str(exc))]) from exc
    except ValueError as exc:
        raise ValidationError([Violation(name, str(exc))]) from exc


def resolve_model(config, data):
    raw = dict(config.get("model") or {"builtin": "random_walk", "w": 0.45})
    kind = raw.pop("builtin", None)
    try:
        if kind is None:
            return ModelSpec.from_dict(raw)
        if kind == "random_walk":
            return builtin_random_walk(data.D, data.T, **raw)
        if kind == "local_trend":
            return builtin_local_trend(data.D, data.T, **raw)
    except ValidationError as exc:
        raise ValidationError([Violation(f"model.{v.field}", v.message) for v in exc.violations]) from exc
    except (TypeError, ValueError) as exc:
        raise ValidationError([Violation("model", str(exc))]) from exc
    raise ValidationError([Violation("model.builtin", f"unknown builtin {kind!r}")])


def _check_gibbs(raw):
    problems = []
    unknown = set(raw) - set(GIBBS_DEFAULTS)
    if unknown:
        problems.append(Violation("gibbs", f"unknown keys {sorted(unknown)}"))
    if not (isinstance(raw["iters"], int) and raw["iters"] >= 1):
        problems.append(Violation("gibbs.iters", "must be a positive integer"))
    if not (isinstance(raw["burn_in"], int) and 0 <= raw["burn_in"] < max(raw["iters"], 1)):
        problems.append(Violation("gibbs.burn_in", "must be an integer in [0, iters)"))
    if problems:
        raise ValidationError(problems)
    return raw


# run bookkeeping

class Run:
    """Output directory, phase timings and the manifest."""

    def __init__(self, params, out_dir, force=False, threads=1):
        self.params = params
        self.out_dir = out_dir
        self.threads = threads
        self.timing = {}
        self.diagnostics = {}
        if os.path.exists(out_dir) and os.listdir(out_dir) and not force:
            raise FileExistsError(f"output directory {out_dir} is not empty (use --force)")
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timing[name] = self.timing.get(name, 0.0) + time.perf_counter() - t0

    def output_hashes(self):
        out = {}
        for name in sorted(os.listdir(self.out_dir)):
            if name == "manifest.json":
                continue
            drop = TIMING_COLUMNS.get(name, ())
            out[name] = {"sha256": content_hash(self.path(name), drop), "ignored_columns": list(drop)}
        return out

    def finish(self, status):
        config = self.params["config"]
        manifest = {
            "command": self.params["command"],
            "params": self.params,
            "config_hash": sha256_bytes(canonical_json(config).encode()),
            "data_hash": self.params.get("input_hashes", {}),
            "seed": self.params.get("seed"),
            "version": __version__,
            "threads": self.threads,
            "status": status,
            "timing": self.timing,
            "diagnostics": self.diagnostics,
            "outputs": self.output_hashes(),
        }
        write_json(self.path("manifest.json"), manifest)
        return manifest


def _load_inputs(params):
    inputs = params["inputs"]
    data, meta = load_dataset(inputs["counts"], inputs.get("metadata"))
    if params["options"].get("reclassify_empty"):
        data = data.reclassify_empty_as_missing()
    return data, meta


def _input_hashes(inputs):
    return {k: sha256_file(v) for k, v in inputs.items() if v is not None}


# writers

def _write_map(run, result, times):
    write_matrix(run.path("eta_hat.csv"), result.eta_hat, col_labels=times)
    traj = np.array(result.trajectory, dtype=float).reshape(-1, 4)
    write_table(run.path("trajectory.csv"), ["iter", "objective", "grad_norm", "seconds"],
                [traj[:, 0].astype(np.int64), traj[:, 1], traj[:, 2], traj[:, 3]])


def _summary_columns(name, summary, state_axis):
    """Long rows (variable, state, t, dim, mean, lower, upper) from a summary dict."""
    mean = summary["mean"]
    if not state_axis:
        mean = mean[None]
        lower, upper = summary["lower"][None], summary["upper"][None]
    else:
        lower, upper = summary["lower"], summary["upper"]
    Q, D, T = mean.shape
    q, d, t = np.meshgrid(np.arange(Q), np.arange(D), np.arange(T), indexing="ij")
    order = lambda x: np.moveaxis(x, 2, 0).ravel()  # t-major
    n = mean.size
    return [np.full(n, name, dtype=object), order(q), order(t), order(d),
            order(mean), order(lower), order(upper)]


def _write_summary(path, eta_summary, theta_summary):
    a = _summary_columns("eta", eta_summary, False)
    b = _summary_columns("theta", theta_summary, True)
    header = ["variable", "state", "t", "dim", "mean", "lower", "upper"]
    lines = [",".join(header)]
    cols = [np.concatenate([x, y]) for x, y in zip(a, b)]
    for row in zip(*cols):
        lines.append(f"{row[0]},{int(row[1])},{int(row[2])},{int(row[3])},"
                     f"{row[4]:.17g},{row[5]:.17g},{row[6]:.17g}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _to_coords(x, coords, axis):
    return alr_to_clr(x, axis=axis) if coords == "clr" else x


# commands

def cmd_simulate(params, run):
    config = params["config"]
    cfg = _section(config, "simulation", SimConfig)
    with run.phase("simulate"):
        data, truth = simulate(cfg)
    write_dataset(run.out_dir, data)
    write_matrix(run.path("truth_eta.csv"), truth["eta"])
    write_matrix(run.path("truth_sigma.csv"), truth["sigma"])
    np.save(run.path("truth_theta.npy"), truth["theta"])
    np.save(run.path("truth_theta0.npy"), truth["theta0"])
    with open(run.path("truth_model.json"), "w") as fh:
        fh.write(dumps_config(truth["spec"]) + "\n")
    run.diagnostics.update({"D": data.D, "T": data.T, "K": data.K,
                            "observed": int(data.observed.sum()),
                            "sparsity": sparsity_report(data)})
    return "ok"


def cmd_map(params, run):
    config = params["config"]
    data, meta = _load_inputs(params)
    spec = resolve_model(config, data)
    check(spec, data)
    opt = _section(config, "optimizer", OptimizerConfig)
    with run.phase("map"):
        result = map_estimate(spec, data, opt)
    _write_map(run, result, meta["times"])
    run.diagnostics.update(_map_diagnostics(result))
    return "ok" if result.converged else "not_converged"


def _map_diagnostics(result):
    return {"converged": bool(result.converged), "iterations": int(result.iterations),
            "objective": result.objective, "grad_norm": result.grad_norm,
            "message": result.message, "init_mode": result.init_mode}


def cmd_sample(params, run):
    config = params["config"]
    coords = params["options"].get("coords", "clr")
    data, meta = _load_inputs(params)
    spec = resolve_model(config, data)
    check(spec, data)
    opt = _section(config, "optimizer", OptimizerConfig)
    dmdb = _section(config, "dmdb", DMDBConfig)
    with run.phase("map"):
        result = map_estimate(spec, data, opt)
    _write_map(run, result, meta["times"])
    with run.phase("sample"):
        draws = cu_pipeline(spec, data, dmdb, map_result=result, threads=run.threads)
    S, p, T = draws.eta.shape
    s, d, t = np.meshgrid(np.arange(S), np.arange(p), np.arange(T), indexing="ij")
    perm = lambda x: np.moveaxis(x, 1, 2).ravel()  # draw, t, dim
    write_table(run.path("draws.csv"), ["draw", "t", "dim", "value"],
                [perm(s), perm(t), perm(d), perm(draws.eta)])
    for name in ("eta", "theta", "theta0", "sigma"):
        np.save(run.path(f"{name}_draws.npy"), getattr(draws, name))
    summ = draws.summary(coords=coords)
    _write_summary(run.path(f"summary_{coords}.csv"), summ["eta"], summ["theta"])
    diag = _map_diagnostics(result)
    diag.update({k: v for k, v in draws.metadata.items() if k != "seconds"})
    run.diagnostics.update(diag)
    return "ok" if result.converged else "not_converged"


def cmd_gibbs(params, run):
    config = params["config"]
    coords = params["options"].get("coords", "clr")
    data, meta = _load_inputs(params)
    spec = resolve_model(config, data)
    check(spec, data)
    if "hyperprior" not in config:
        raise ValidationError([Violation("hyperprior", "required for gibbs")])
    prior = HyperPrior.from_dict(config["hyperprior"])
    opt = _section(config, "optimizer", OptimizerConfig)
    g = _check_gibbs(_section(config, "gibbs", None, GIBBS_DEFAULTS))
    status = "ok"
    with run.phase("gibbs"):
        try:
            chain = gibbs_chain(spec, data, prior, g["iters"], seed=g["seed"], opt_config=opt,
                                alpha=g["alpha"], point_mode=g["point_mode"])
        except GibbsError as exc:
            chain, status = exc.chain, "failed"
            run.diagnostics["error"] = str(exc)
    n = chain.length
    Q = chain.w.shape[1]
    write_table(run.path("w_chain.csv"), ["iter"] + [f"w_{q}" for q in range(Q)] + ["map_iterations"],
                [np.arange(n, dtype=np.int64)] + [chain.w[:, q] for q in range(Q)] + [chain.map_iterations.astype(np.int64)])
    np.save(run.path("theta_chain.npy"), chain.theta)
    np.save(run.path("sigma_chain.npy"), chain.sigma)
    np.save(run.path("eta_chain.npy"), chain.eta)
    keep = slice(min(g["burn_in"], n), n)
    if n - keep.start >= 1:
        _write_summary(run.path(f"summary_{coords}.csv"),
                       interval_summary(_to_coords(chain.eta[keep], coords, 1)),
                       interval_summary(_to_coords(chain.theta[keep], coords, 2)))
    ess = {}
    if n - keep.start >= 10:
        params_ = {f"w_{q}": chain.w[keep, q] for q in range(Q)}
        p = chain.sigma.shape[1]
        for i in range(p):
            for j in range(i, p):
                params_[f"sigma_{i}_{j}"] = chain.sigma[keep, i, j]
        ess = {k: ess_report(v) for k, v in params_.items()}
    write_json(run.path("ess.json"), ess)
    seconds = run.timing.get("gibbs", float("nan"))
    run.diagnostics.update({
        "iterations": n,
        "w_mean": chain.w[keep].mean(axis=0).tolist() if n > keep.start else [],
        "neff_per_sec": {k: v["ess"] / seconds for k, v in ess.items()},
        "point_mode": bool(g["point_mode"]),
    })
    return status


def cmd_bench(params, run):
    config = params["config"]
    b = _section(config, "bench", None, BENCH_DEFAULTS)
    opt = _section(config, "optimizer", OptimizerConfig)
    rows, failures = [], []
    for D in b["D"]:
        for T in b["T"]:
            for rep in range(int(b["reps"])):
                seed = int(np.random.SeedSequence(b["seed"], spawn_key=(D, T, rep)).generate_state(1)[0])
                try:
                    cfg = SimConfig(D=D, T_total=T, series_length=T, w=b["w"], n_total=b["n_total"],
                                    missing_fraction=b["missing_fraction"], seed=seed)
                    data, truth = simulate(cfg)
                    t0 = time.perf_counter()
                    res = map_estimate(truth["spec"], data, opt)
                    total = time.perf_counter() - t0
                except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
                    failures.append({"D": D, "T": T, "rep": rep, "error": str(exc)})
                    log.warning("bench D=%d T=%d rep=%d failed: %s", D, T, rep, exc)
                    continue
                if not res.converged:
                    failures.append({"D": D, "T": T, "rep": rep, "error": res.message})
                rows.append((D, T, rep, res.iterations, total / max(res.iterations, 1), total))
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    ints = [arr[:, i].astype(np.int64) for i in range(4)]
    write_table(run.path("bench.csv"), ["D", "T", "rep", "iters", "sec_per_iter", "total_sec"],
                ints + [arr[:, 4], arr[:, 5]])
    summary = []
    for D in b["D"]:
        for T in b["T"]:
            sel = (arr[:, 0] == D) & (arr[:, 1] == T)
            x = arr[sel]
            sd = lambda v: float(np.std(v, ddof=1)) if v.size > 1 else 0.0
            m = lambda v: float(np.mean(v)) if v.size else float("nan")
            summary.append((D, T, int(sel.sum()), m(x[:, 3]), sd(x[:, 3]), m(x[:, 4]), sd(x[:, 4]),
                            m(x[:, 5]), sd(x[:, 5])))
    s = np.array(summary, dtype=float).reshape(-1, 9)
    write_table(run.path("bench_summary.csv"),
                ["D", "T", "n", "iters_mean", "iters_sd", "sec_per_iter_mean", "sec_per_iter_sd",
                 "total_sec_mean", "total_sec_sd"],
                [s[:, i].astype(np.int64) for i in range(3)] + [s[:, i] for i in range(3, 9)])
    run.diagnostics["failures"] = failures
    return "ok" if not failures else "partial"


COMMANDS = {"simulate": cmd_simulate, "map": cmd_map, "sample": cmd_sample,
            "gibbs": cmd_gibbs, "bench": cmd_bench}
SEED_KEYS = {"simulate": ("simulation", "seed"), "sample": ("dmdb", "seed"),
             "gibbs": ("gibbs", "seed"), "bench": ("bench", "seed")}


def execute(params, out_dir, force=False, threads=1):
    """Run a command from resolved parameters; returns (exit code, manifest)."""
    run = Run(params, out_dir, force=force, threads=threads)
    status = COMMANDS[params["command"]](params, run)
    manifest = run.finish(status)
    code = EXIT_OK if status == "ok" else EXIT_NUMERICAL
    return code, manifest


def build_params(args):
    config = load_config(args.config)
    if args.command == "gibbs":
        g = dict(config.get("gibbs", {}))
        if args.iters is not None:
            g["iters"] = args.iters
        if args.seed is not None:
            g["seed"] = args.seed
        config["gibbs"] = g
    elif args.command in SEED_KEYS and getattr(args, "seed", None) is not None:
        sec, key = SEED_KEYS[args.command]
        config[sec] = dict(config.get(sec, {}), **{key: args.seed})
    inputs = {}
    if getattr(args, "counts", None):
        inputs = {"counts": os.path.abspath(args.counts),
                  "metadata": os.path.abspath(args.metadata) if args.metadata else None}
    params = {
        "command": args.command,
        "config": config,
        "inputs": inputs,
        "options": {"reclassify_empty": bool(getattr(args, "reclassify_empty", False)),
                    "coords": getattr(args, "coords", "clr")},
    }
    params["input_hashes"] = _input_hashes(inputs)
    sec_key = SEED_KEYS.get(args.command)
    if sec_key:
        defaults = {"simulation": SimConfig().seed, "dmdb": DMDBConfig().seed,
                    "gibbs": GIBBS_DEFAULTS["seed"], "bench": BENCH_DEFAULTS["seed"]}
        params["seed"] = config.get(sec_key[0], {}).get(sec_key[1], defaults[sec_key[0]])
    return params


def rerun(manifest_path, out_dir, force=False, threads=1):
    """Repeat a run from its manifest and compare output content hashes."""
    old = read_json(manifest_path)
    params = old["params"]
    now = _input_hashes(params["inputs"])
    changed = [k for k, v in params.get("input_hashes", {}).items() if now.get(k) != v]
    if changed:
        raise ValidationError([Violation(k, "input file changed since the recorded run") for k in changed])
    code, manifest = execute(params, out_dir, force=force, threads=threads)
    mismatched = sorted(
        name for name in set(old["outputs"]) | set(manifest["outputs"])
        if old["outputs"].get(name, {}).get("sha256") != manifest["outputs"].get(name, {}).get("sha256")
    )
    return code, mismatched


def _parser():
    ap = argparse.ArgumentParser(prog="mlndlm", description="Multinomial logistic-normal dynamic linear models.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("-c", "--config", action="append", default=[], help="JSON config file (repeatable)")
        p.add_argument("-o", "--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="write into a non-empty directory")
        p.add_argument("--threads", type=int, default=1)
        if data:
            p.add_argument("--counts", required=True, help="counts CSV")
            p.add_argument("--metadata", help="metadata CSV (time_index, series_id, observed)")
            p.add_argument("--reclassify-empty", action="store_true",
                           help="treat observed columns with zero total count as missing")
            p.add_argument("--coords", choices=("clr", "alr"), default="clr")

    p = sub.add_parser("simulate", help="simulate a dataset with known truth")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    common(sub.add_parser("map", help="MAP estimate of eta"))
    p = sub.add_parser("sample", help="posterior draws by collapse-uncollapse")
    common(p)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("gibbs", help="Gibbs sampler over diagonal W")
    common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("bench", help="MAP timing sweep over (D, T)")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            code, mismatched = rerun(args.manifest, args.out, force=args.force, threads=args.threads)
            if mismatched:
                print("outputs differ: " + ", ".join(mismatched), file=sys.stderr)
                return EXIT_NUMERICAL
            print("outputs identical")
            return code
        code, manifest = execute(build_params(args), args.out, force=args.force, threads=args.threads)
        if code != EXIT_OK:
            print(f"{args.command}: {manifest['status']}", file=sys.stderr)
        return code
    except (ArithmeticError, np.linalg.LinAlgError, PipelineError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print("invalid input:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
