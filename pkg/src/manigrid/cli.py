"""Experiment runner: grid building, Laplacian sweeps, walk and SEP ensembles.

Outputs are machine readable and deterministic: the same config and seed
produce byte-identical files.  Every report carries the sha256 of the
effective config and the library version, never a timestamp.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

import manigrid
from manigrid.manifolds import make_manifold, test_function_library
from manigrid import grids, pde, sep, walk

EXIT_OK = 0
EXIT_GATE = 2
EXIT_CONFIG = 3

PROFILES = {
    "half-cosine": lambda m, p: (1.0 + np.cos(_angle_like(m, p))) / 2.0,
    "uniform-half": lambda m, p: np.full(np.asarray(p).shape[0], 0.5),
}


def _angle_like(m, p):
    p = np.asarray(p, dtype=float)
    if p.shape[1] == 1:
        return p[..., 0]
    if p.shape[1] == 3:
        return np.arccos(np.clip(p[..., 2], -1.0, 1.0))
    return 2.0 * math.pi * p[..., 0]


def _origin(m) -> np.ndarray:
    if m.point_dim == 3:
        return np.array([0.0, 0.0, 1.0])
    return np.zeros(m.point_dim)


@dataclass(frozen=True)
class ExperimentConfig:
    manifold: str
    sizes: tuple[int, ...]
    kernel: str = "triangle"
    seed: int = 0
    replicas: int = 1
    t_end: float = 1.0
    record_times: tuple[float, ...] = (0.0, 0.5, 1.0)
    observables: tuple[str, ...] = ()
    output_dir: str = "out"
    mode: str = "iid"
    profile: str = "half-cosine"
    dim: int = 0
    threads: int = 1
    epsilon_override: float | None = None

    def validate(self) -> None:
        make_manifold(self.manifold, self.dim or None)
        if not self.sizes:
            raise ValueError("sizes must be nonempty")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if any(n & (n - 1) for n in self.sizes):
            raise ValueError("sizes must be powers of two")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        rt = self.record_times
        if any(b <= a for a, b in zip(rt, rt[1:])) or (rt and (rt[0] < 0 or rt[-1] > self.t_end)):
            raise ValueError("record_times must be increasing within [0, t_end]")
        if self.mode not in ("iid", "regular-circle"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.kernel != "triangle":
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.epsilon_override is not None and self.epsilon_override <= 0:
            raise ValueError("epsilon_override must be positive")


def load_config(path: str, seed=None, out=None, threads=None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    if threads is not None:
        raw["threads"] = threads
    for key in ("sizes", "record_times", "observables"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = ExperimentConfig(**raw)
    cfg.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_sha256": config_hash(cfg), "version": manigrid.__version__}


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _csv_header(fh, cfg: ExperimentConfig) -> None:
    fh.write(f"# config={config_hash(cfg)} version={manigrid.__version__}\n")


def _resolve_observables(cfg: ExperimentConfig):
    m = make_manifold(cfg.manifold, cfg.dim or None)
    lib = {f.id: f for f in test_function_library(m)}
    missing = [fid for fid in cfg.observables if fid not in lib]
    if missing:
        raise ValueError(f"unknown observables {missing}; library has {sorted(lib)}")
    return m, [lib[fid] for fid in cfg.observables]


def _grid_paths(out: str, n: int) -> tuple[str, str, str]:
    return (
        os.path.join(out, f"cloud_N{n}.txt"),
        os.path.join(out, f"edges_N{n}.csv"),
        os.path.join(out, f"edges_N{n}.json"),
    )


def cmd_grid(cfg: ExperimentConfig) -> int:
    m = make_manifold(cfg.manifold, cfg.dim or None)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    all_connected = True
    if cfg.mode == "regular-circle":
        for n in cfg.sizes:
            cloud, g = grids.regular_circle_cloud(n)
            w1 = grids.wasserstein1(cloud)
            conn = grids.check_connected(g)
            all_connected &= conn.connected
            cpath, epath, spath = _grid_paths(out, n)
            grids.save_cloud(cloud, cpath)
            grids.save_grid(g, epath, spath)
            degree = g.weights.getnnz() / n
            rows.append(
                {"N": n, "W1": w1, "epsilon": g.epsilon, "a": g.a_scaling,
                 "C": g.limiting_constant, "connected": conn.connected,
                 "mean_degree": degree}
            )
    else:
        master = grids.sample_cloud(m, cfg.sizes[-1], cfg.seed)
        curve = grids.w1_curve(master, list(cfg.sizes))
        w1_map = dict(curve)
        for n in cfg.sizes:
            eps = (
                cfg.epsilon_override
                if cfg.epsilon_override is not None
                else grids.epsilon_schedule(curve, m.dim, n)
            )
            g = grids.normalize_grid(grids.build_weights(master.prefix(n), eps))
            conn = grids.check_connected(g)
            all_connected &= conn.connected
            cpath, epath, spath = _grid_paths(out, n)
            grids.save_cloud(g.cloud, cpath)
            grids.save_grid(g, epath, spath)
            degree = g.weights.getnnz() / n
            rows.append(
                {"N": n, "W1": w1_map[n], "epsilon": eps, "a": g.a_scaling,
                 "C": g.limiting_constant, "connected": conn.connected,
                 "mean_degree": degree}
            )
    _write_json(os.path.join(out, "grid_report.json"), {**_stamp(cfg), "rows": rows})
    return EXIT_OK if all_connected else EXIT_GATE


def _load_grid_for(cfg: ExperimentConfig, n: int) -> grids.WeightedGrid:
    cpath, epath, spath = _grid_paths(cfg.output_dir, n)
    for path in (cpath, epath, spath):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing grid file {path}; run the grid command first")
    cloud = grids.load_cloud(cpath)
    g = grids.load_grid(cloud, epath, spath)
    return g if g.normalized else grids.normalize_grid(g)


def cmd_laplacian(cfg: ExperimentConfig) -> int:
    m = make_manifold(cfg.manifold, cfg.dim or None)
    lib = test_function_library(m)
    out = cfg.output_dir
    errs: dict[str, list[float]] = {}
    lines = []
    for n in cfg.sizes:
        g = _load_grid_for(cfg, n)
        for f in lib:
            rep = grids.convergence_error(g, f)
            errs.setdefault(f.id, []).append(rep.mean_err)
            lines.append(f"{n},{f.id},{rep.mean_err:.17g},{rep.sup_err:.17g}\n")
    path = os.path.join(out, "laplacian_report.csv")
    with open(path, "w", encoding="utf-8") as fh:
        _csv_header(fh, cfg)
        fh.write("N,phi_id,mean_err,sup_err\n")
        fh.writelines(lines)
    decreasing = all(
        seq[-1] < seq[0] for seq in errs.values() if max(seq) > 1e-12
    )
    return EXIT_OK if decreasing else EXIT_GATE


def cmd_walk(cfg: ExperimentConfig) -> int:
    m, obs = _resolve_observables(cfg)
    if not obs:
        raise ValueError("walk needs at least one observable id")
    if cfg.replicas < 2:
        raise ValueError("walk needs at least 2 replicas")
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    mu = walk.uniform_sphere_step(m, math.sqrt(m.dim))
    p0 = m.as_point(_origin(m))
    times = [t for t in cfg.record_times if t > 0]
    rngs = sep.replica_rngs(cfg.seed, len(cfg.sizes))
    path = os.path.join(out, "walk_report.csv")
    with open(path, "w", encoding="utf-8") as fh:
        _csv_header(fh, cfg)
        fh.write("N,t,phi_id,observed,stderr,oracle,abs_gap\n")
        for idx, n in enumerate(cfg.sizes):
            for f in obs:
                field = pde.project(f, m, 64)
                est = walk.ensemble_expectation(
                    m, p0, n, mu, f, times, cfg.replicas, rngs[idx]
                )
                for t, e in zip(times, est):
                    oracle = float(pde.evolve(field, t, "half").reconstruct(p0[None])[0])
                    gap = abs(e.value - oracle)
                    fh.write(
                        f"{n},{t:.17g},{f.id},{e.value:.17g},{e.stderr:.17g},"
                        f"{oracle:.17g},{gap:.17g}\n"
                    )
    return EXIT_OK


def cmd_sep(cfg: ExperimentConfig) -> int:
    m, obs = _resolve_observables(cfg)
    if not obs:
        raise ValueError("sep needs at least one observable id")
    out = cfg.output_dir
    profile_fn = PROFILES[cfg.profile]
    rho0 = lambda p: profile_fn(m, p)
    field = pde.project(rho0, m, 64)
    if field.quadrature_residual > 1e-8:
        raise ValueError("initial profile is not resolved by the spectral oracle")
    rec = np.asarray(cfg.record_times, dtype=float)
    oracle = {
        f.id: np.array([pde.pair(pde.evolve(field, t, "one"), f) for t in rec])
        for f in obs
    }
    report_rows = []
    mart_reports = []
    for n in cfg.sizes:
        g = _load_grid_for(cfg, n)
        conn = grids.check_connected(g)
        if not conn.connected:
            print(f"grid N={n} is disconnected; refusing to run", file=sys.stderr)
            return EXIT_GATE
        table = sep.EdgeTable.from_grid(g)
        rngs = sep.replica_rngs(cfg.seed + n, cfg.replicas)
        acc = {f.id: np.zeros((cfg.replicas, rec.size)) for f in obs}
        terminal = np.empty(cfg.replicas)
        traces = []
        for r in range(cfg.replicas):
            c0 = sep.init_bernoulli(g, rho0, rngs[r])
            tr = sep.simulate(c0, g, cfg.t_end, rec, obs, rngs[r], journal=True, table=table)
            for f in obs:
                acc[f.id][r] = tr.values[f.id]
            terminal[r] = sep.dynkin_path(tr, obs[0], g)[-1]
            if r < 4:
                traces.append(tr)
        for f in obs:
            mean = acc[f.id].mean(axis=0)
            if cfg.replicas > 1:
                stderr = acc[f.id].std(axis=0, ddof=1) / math.sqrt(cfg.replicas)
            else:
                stderr = np.zeros(rec.size)
            for j, t in enumerate(rec):
                report_rows.append(
                    {"N": n, "t": float(t), "phi_id": f.id,
                     "mu_phi_mean": float(mean[j]), "mu_phi_stderr": float(stderr[j]),
                     "oracle_pair": float(oracle[f.id][j]),
                     "abs_gap": float(abs(mean[j] - oracle[f.id][j]))}
                )
        if cfg.replicas >= 2:
            mart_reports.append(sep.martingale_report(g, obs[0], cfg.t_end, terminal))
        sep.save_traces(os.path.join(out, f"traces_N{n}.csv"), traces)
    path = os.path.join(out, "sep_report.csv")
    with open(path, "w", encoding="utf-8") as fh:
        _csv_header(fh, cfg)
        fh.write("N,t,phi_id,mu_phi_mean,mu_phi_stderr,oracle_pair,abs_gap\n")
        for row in report_rows:
            fh.write(
                f"{row['N']},{row['t']:.17g},{row['phi_id']},{row['mu_phi_mean']:.17g},"
                f"{row['mu_phi_stderr']:.17g},{row['oracle_pair']:.17g},{row['abs_gap']:.17g}\n"
            )
    _write_json(
        os.path.join(out, "martingale_report.json"),
        {**_stamp(cfg), "rows": mart_reports},
    )
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir
    summary: dict = dict(_stamp(cfg))
    found = False
    gpath = os.path.join(out, "grid_report.json")
    if os.path.exists(gpath):
        with open(gpath, "r", encoding="utf-8") as fh:
            rows = json.load(fh)["rows"]
        summary["grids"] = {
            "count": len(rows),
            "all_connected": all(r["connected"] for r in rows),
        }
        found = True
    lpath = os.path.join(out, "laplacian_report.csv")
    if os.path.exists(lpath):
        with open(lpath, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln[0] not in "#N"]
        summary["laplacian"] = {"rows": len(lines)}
        found = True
    for name in ("walk_report.csv", "sep_report.csv"):
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()[2:]
            gaps = [float(ln.rsplit(",", 1)[1]) for ln in lines if ln.strip()]
            summary[name.split("_")[0]] = {
                "rows": len(gaps),
                "max_abs_gap": max(gaps) if gaps else None,
            }
            found = True
    mpath = os.path.join(out, "martingale_report.json")
    if os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as fh:
            rows = json.load(fh)["rows"]
        summary["martingale"] = {
            "count": len(rows),
            "var_within_qv": all(r["var_MT"] <= r["qv_bound"] for r in rows),
        }
        found = True
    if not found:
        print(f"no reports found under {out}", file=sys.stderr)
        return EXIT_CONFIG
    _write_json(os.path.join(out, "report.json"), summary)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


COMMANDS = {
    "grid": cmd_grid,
    "laplacian": cmd_laplacian,
    "walk": cmd_walk,
    "sep": cmd_sep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="manigrid",
        description="manifold grid, walk and exclusion-process experiments",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
