"""Batch driver: constants, hypotheses, jets, refinement, verification and gallery runs.

Every subcommand writes one JSON report (sorted keys, NaN/inf as strings) and
optional CSV bundles; the exit code is 0 iff every recorded check passed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import domain, gallery, refine, threebody
from .polyalg import GradedMapJet, grade

SYSTEMS = ("threebody", "toy", "lossdiff", "manufactured", "user-jet-file")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    system: str
    rho: float = 0.1
    delta: float = 1.0
    order: int | None = None
    budget: int = 2000
    seed: int = 0
    tol: float = 1e-9
    kappa_a: float | None = None
    kappa_b: float | None = None
    j_max: int = 10_000
    n_orbits: int = 40
    mu: float = 0.01
    e: float = 0.05
    a: float = 0.05
    b: float = 0.75
    n: int = 3
    m: int = 4
    nu: float = 0.5
    jet_file: str | None = None
    out: str | None = None
    stages: list = field(default_factory=lambda: ["constants", "jets", "refine", "verify"])

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise UsageError(f"unknown system {self.system!r}; choose from {', '.join(SYSTEMS)}")
        if self.system == "user-jet-file":
            if not self.jet_file or not Path(self.jet_file).is_file():
                raise UsageError("user-jet-file needs an existing jet_file")
        if not self.rho > 0:
            raise UsageError("rho must be positive")
        if self.order is None:
            self.order = 10 if self.system == "threebody" else 4

    @classmethod
    def from_mapping(cls, doc: dict) -> "RunConfig":
        if not doc or "system" not in doc:
            raise UsageError("configuration must name a system")
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise UsageError(f"unknown configuration keys: {sorted(extra)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


def _out_paths(out: str | None) -> tuple:
    """(report path, CSV directory) from --out: a .json file or a directory."""
    if out is None:
        return None, None
    p = Path(out)
    if p.suffix == ".json":
        return p, p.parent
    return p / "report.json", p


def write_csv(path: Path, header: list, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def export_plots(report: dict, out_dir) -> list:
    """Write the CSV bundles stored under report["plots"]; returns the written paths.

    residual_scan.csv  radius, residual (sorted by radius)
    envelope.csv       orbit, j, lower, actual, upper
    contraction.csv    iteration, step_norm
    toy_scan.csv       y0, exceeded_at, growth_slope, bounded
    lossdiff_scan.csv  x1, x2, quadrature, closed_form
    """
    out_dir = Path(out_dir)
    written = []
    for name, table in sorted(report.get("plots", {}).items()):
        rows = table["rows"]
        if name == "residual_scan":
            rows = sorted(rows, key=lambda r: r[0])
        path = out_dir / f"{name}.csv"
        write_csv(path, table["header"], rows)
        written.append(str(path))
    return written


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------

def build_system(cfg: RunConfig) -> tuple:
    """(p, q, cone, smoothness r) for the configured system."""
    if cfg.system == "threebody":
        p, q = threebody.leading_terms()
        return p, q, threebody.threebody_cone(), math.inf
    if cfg.system == "toy":
        prm = gallery.ToyModelParams(cfg.a, cfg.b)
        p, q = gallery.toy_jets(prm)
        return p, q, gallery.toy_cone(prm), math.inf
    if cfg.system == "lossdiff":
        prm = gallery.LossDiffParams(cfg.n, cfg.m, cfg.nu)
        p, q, _ = gallery.lossdiff_jets(prm)
        return p, q, gallery.lossdiff_cone(prm), math.inf
    if cfg.system == "manufactured":
        p = grade({(2, 0): [-1.0]}, 2, 1)
        q = grade({(1, 1): [1.0]}, 2, 1)
        return p, q, domain.ConeSpec.halfspaces([(1.0,)]), math.inf
    doc = json.loads(Path(cfg.jet_file).read_text())
    p = GradedMapJet.from_json(doc["p"])
    q = GradedMapJet.from_json(doc["q"]) if doc.get("q") else None
    cone = domain.ConeSpec.halfspaces(doc["cone_normals"])
    return p, q, cone, float(doc.get("r", math.inf))


def _kappas(cfg: RunConfig, c: domain.DomainConstants) -> tuple:
    ka = cfg.kappa_a if cfg.kappa_a is not None else 0.9 * c.a_p
    kb = cfg.kappa_b if cfg.kappa_b is not None else 1.1 * c.b_p
    return ka, kb


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_constants(cfg: RunConfig, report: dict, checks: dict) -> dict:
    p, q, cone, r = build_system(cfg)
    c = domain.compute_constants(p, q, cone, cfg.rho, budget=cfg.budget, seed=cfg.seed)
    hyp = domain.check_hypotheses(c, q, cone)
    ineq = domain.constant_inequalities(c)
    report["constants"] = c.as_dict()
    report["hypotheses"] = hyp.as_dict()
    report["constant_inequalities"] = ineq
    checks["constant inequalities"] = all(ineq.values())
    if cfg.system == "toy":
        checks["H1 and H2"] = hyp.H1 and hyp.H2
        if cfg.b + 3 * cfg.a <= 1:
            checks["H3 fails"] = not hyp.H3
    else:
        checks["H1"], checks["H2"] = hyp.H1, hyp.H2
        report["H3_margin"] = c.C1
    if c.a_p > 0:
        ka, kb = _kappas(cfg, c)
        B_hat = c.B_p + 0.1 * abs(c.B_p) + 1e-9
        reg = domain.regularity_report(c, r, ka, kb, B_hat)
        report["regularity"] = reg.as_dict()
    return {"p": p, "q": q, "cone": cone, "consts": c}


def _envelope_rows(R, dec: domain.OrbitDecomposition, samples: np.ndarray, j_max: int, n_rows: int = 6) -> list:
    rows = []
    js = np.unique(np.concatenate([[0], np.geomspace(1, j_max, 25).astype(int)]))
    for o, x0 in enumerate(samples[:n_rows]):
        x = np.array(x0[None], dtype=float)
        k0 = int(dec.ring_index(np.array([domain.vec_norm(x, dec.norm)[0]]))[0])
        jj = 0
        for j in js:
            while jj < j:
                x = R(x)
                jj += 1
            rows.append([o, int(j), float(dec.b_bar[k0 + j + 1]), float(domain.vec_norm(x, dec.norm)[0]),
                         float(dec.a_bar[k0 + j])])
    return rows


def stage_envelope(cfg: RunConfig, ctx: dict, report: dict, checks: dict) -> None:
    c, cone = ctx["consts"], ctx["cone"]
    p = ctx["p"]
    n = cone.n

    def R(x):
        X = np.zeros((len(x), p.n_in))
        X[:, :n] = x
        return x + p.evaluate(X)[:, :n]

    ka, kb = _kappas(cfg, c)
    samples = domain.sample_cone(cone, cfg.rho, cfg.n_orbits, seed=cfg.seed)
    dec = domain.orbit_decomposition(R, c, ka, kb, samples=samples, j_max=cfg.j_max, cone=cone)
    report["envelope"] = {"ok": dec.envelope_ok, "beta": dec.beta, "interleaved": dec.interleaved,
                          "u": dec.u, "worst": dec.worst}
    checks["orbit envelope"] = bool(dec.envelope_ok and dec.beta > 0.1)
    report.setdefault("plots", {})["envelope"] = {
        "header": ["orbit", "j", "lower", "actual", "upper"],
        "rows": _envelope_rows(R, dec, samples, cfg.j_max)}


def stage_threebody(cfg: RunConfig, report: dict, checks: dict, out_dir: Path | None) -> None:
    prm = threebody.R3BPParams(mu=cfg.mu, e=cfg.e, order=cfg.order)
    jets = threebody.compute_jets(prm)
    st = threebody.structure_check(jets)
    report["steps"] = [{"j": s.j, "mode": s.mode, "lower_residual": s.lower_residual,
                        "polynomial": jets.polynomial[s.j]} for s in jets.steps]
    report["structure"] = {"checks": st.checks, "stray": st.stray, "tol": st.tol, "failures": st.failures()}
    report["Y_vanishes_above_7"] = all(v for k, v in st.checks.items() if k.startswith("Y^"))
    checks.update({f"structure: {k}": v for k, v in st.checks.items()})
    scan = threebody.invariance_residual(jets)
    report["invariance_residual"] = scan
    checks["residual slope"] = scan["slope"] >= scan["expected"] - 0.3
    report.setdefault("plots", {})["residual_scan"] = {
        "header": ["radius", "residual"], "rows": [list(t) for t in zip(scan["radii"], scan["values"])]}
    if out_dir is not None:
        tables = {}
        for j, (Kx, Ky) in jets.K.items():
            tables[f"K_x^{j}"] = GradedMapJet(2, 2, {j: Kx}).to_json()
            tables[f"K_y^{j}"] = GradedMapJet(2, 4, {j: Ky}).to_json()
        for d, Y in jets.Y.items():
            if Y is not None and Y.is_polynomial:
                tables[f"Y^{d}"] = GradedMapJet(2, 2, {d: Y}).to_json()
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "jets.json").write_text(dumps_report(tables))


def stage_refine(cfg: RunConfig, report: dict, checks: dict, out_dir: Path | None) -> refine.ManufacturedRun:
    run = refine.run_manufactured(rho=cfg.rho, k_order=cfg.order, tol=cfg.tol)
    rep = run.report
    report["refine"] = {k: v for k, v in rep.as_dict().items()}
    report["refine"]["exact_error"] = run.exact_error
    checks["refinement converged"] = rep.converged
    checks["weighted residual"] = rep.weighted_residual <= cfg.tol
    report.setdefault("plots", {})["contraction"] = {
        "header": ["iteration", "step_norm"], "rows": [[i + 1, h] for i, h in enumerate(rep.history)]}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        run.K.to_csv(out_dir / "refined_grid.csv")
    return run


def stage_verify(cfg: RunConfig, run: refine.ManufacturedRun, report: dict, checks: dict) -> None:
    ms = refine.ManufacturedSystem()
    sysm = run.system
    pts, vals = run.K.flat()
    act = run.K.active.reshape(-1)
    table = {tuple(np.round(p, 17)): v for p, v in zip(pts[act], vals[act])}
    sel = pts[act]

    def K(x):
        base = sysm.K_le.evaluate(x[:, :1])
        return base + np.array([table.get(tuple(np.round(p, 17)), np.zeros(2)) for p in x[:, :1]])

    # the image R(x) of a trusted point lies on the grid unless it is an orbit end
    inside = np.array([tuple(np.round(sysm.R.evaluate(p[None])[0], 17)) in table for p in sel])
    sel = sel[inside]
    v = refine.verify_invariance(ms.F_points, K, lambda x: sysm.R.evaluate(x), sel)
    r = np.linalg.norm(sel, axis=-1)
    weighted = float(np.max(v["residual"] / r ** sysm.weight_T))
    report["verify"] = {"max": v["max"], "weighted": weighted, "points": int(len(sel))}
    checks["direct invariance"] = weighted <= 1e3 * cfg.tol


def stage_gallery(cfg: RunConfig, report: dict, checks: dict) -> None:
    if cfg.system == "toy":
        prm = gallery.ToyModelParams(cfg.a, cfg.b)
        v = gallery.toy_verdict(prm)
        report["toy"] = {"b_plus_3a": prm.c, "no_stable_manifold": v.no_stable_manifold, "y_star": v.y_star,
                         "bounded_count": sum(v.bounded)}
        if prm.c <= 1:
            checks["every y diverges"] = v.no_stable_manifold
        else:
            idx = int(np.argmin(np.abs(v.y_grid - v.y_star)))
            checks["only y* bounded"] = sum(v.bounded) == 1 and v.bounded[idx]
        report.setdefault("plots", {})["toy_scan"] = {
            "header": ["y0", "exceeded_at", "growth_slope", "bounded"],
            "rows": [[y, -1 if e is None else e, s, int(b)]
                     for y, e, s, b in zip(v.y_grid, v.exceeded, v.slopes, v.bounded)]}
        return
    prm = gallery.LossDiffParams(cfg.n, cfg.m, cfg.nu)
    rng = np.random.default_rng(cfg.seed)
    lo = math.atan(prm.nu)
    rows = []
    for _ in range(100):
        th = rng.uniform(lo, math.pi - lo)
        rr = rng.uniform(0.1, 1.0) * cfg.rho
        x = (rr * math.cos(th), rr * math.sin(th))
        qd, cf = gallery.lossdiff_manifold(prm, x)
        rows.append([x[0], x[1], qd, cf])
    diff = max(abs(r[2] - r[3]) for r in rows)
    p_lo = gallery.differentiability_probe(prm, derivative_order=2 * prm.m - 2)
    p_hi = gallery.differentiability_probe(prm, derivative_order=2 * prm.m - 1)
    rays = gallery.invariant_rays_check(prm)
    report["lossdiff"] = {"max_difference": diff, "invariant_rays": rays,
                          "probe_low": p_lo.__dict__, "probe_high": p_hi.__dict__}
    checks["quadrature vs closed form"] = diff <= 1e-8
    checks["h vanishes on invariant rays"] = rays <= 1e-12
    checks["order 2m-2 bounded"] = p_lo.bounded
    checks["order 2m-1 grows"] = p_hi.increasing and p_hi.log_slope > 0
    report.setdefault("plots", {})["lossdiff_scan"] = {"header": ["x1", "x2", "quadrature", "closed_form"],
                                                       "rows": rows}


def run(cfg: RunConfig, stages: list | None = None) -> tuple:
    """Execute the stage chain; returns (exit status, report).

    A failing stage is recorded under "errors" and the remaining stages are skipped.
    """
    stages = list(cfg.stages if stages is None else stages)
    report = {"config": {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "out"}}
    checks: dict = {}
    report_path, out_dir = _out_paths(cfg.out)
    ctx, refined = {}, None
    try:
        for stage in stages:
            if stage == "constants":
                ctx = stage_constants(cfg, report, checks)
                if cfg.system in ("threebody", "manufactured") and report["constants"]["a_p"] > 0:
                    stage_envelope(cfg, ctx, report, checks)
            elif stage == "hypotheses":
                checks["H3"] = bool(report["hypotheses"]["H3"])
            elif stage == "jets":
                if cfg.system == "threebody":
                    stage_threebody(cfg, report, checks, out_dir)
            elif stage == "refine":
                if cfg.system == "manufactured":
                    reg = report.get("regularity")
                    if reg is not None and not cfg.order > reg["r0"]:
                        raise UsageError(f"order {cfg.order} must exceed r0 = {reg['r0']:.4g}")
                    refined = stage_refine(cfg, report, checks, out_dir)
            elif stage == "verify":
                if cfg.system == "manufactured" and refined is not None:
                    stage_verify(cfg, refined, report, checks)
                elif cfg.system in ("toy", "lossdiff"):
                    stage_gallery(cfg, report, checks)
            else:
                raise UsageError(f"unknown stage {stage!r}")
            report.setdefault("completed_stages", []).append(stage)
    except UsageError:
        raise
    except Exception as exc:  # recorded, later stages skipped
        report["errors"] = [f"{type(exc).__name__}: {exc}"]
        checks["all stages completed"] = False
    report["checks"] = checks
    report["passed"] = bool(checks) and all(checks.values())
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(dumps_report(report))
        report["csv"] = export_plots(report, out_dir)
    return (0 if report["passed"] else 1), report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(sp):
    sp.add_argument("--config", help="JSON file with RunConfig fields")
    sp.add_argument("--out", help="report .json path or output directory")
    sp.add_argument("--seed", type=int)


def _system_flags(sp, default_system=None, choices=SYSTEMS):
    sp.add_argument("--system", choices=choices, default=default_system)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--kappa-a", dest="kappa_a", type=float)
    sp.add_argument("--kappa-b", dest="kappa_b", type=float)
    sp.add_argument("--jet-file", dest="jet_file")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parabolic", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command")
    for name, stages in (("constants", ["constants"]), ("check", ["constants", "hypotheses"])):
        sp = sub.add_parser(name, help=f"{'domain constants' if name == 'constants' else 'hypotheses'} of a system")
        _common(sp)
        _system_flags(sp)
        sp.set_defaults(stages=stages)
    sp = sub.add_parser("jets", help="polynomial jets (three-body pipeline)")
    _common(sp)
    sp.add_argument("--order", type=int)
    sp.set_defaults(stages=["jets"], system="threebody")
    for name, stages in (("refine", ["constants", "refine"]), ("verify", ["constants", "refine", "verify"])):
        sp = sub.add_parser(name, help="fixed-point refinement of the manufactured system")
        _common(sp)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--order", type=int)
        sp.add_argument("--tol", type=float)
        sp.set_defaults(stages=stages, system="manufactured")
    sp = sub.add_parser("threebody", help="restricted three-body jets and residual scans")
    _common(sp)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--e", type=float)
    sp.add_argument("--order", type=int)
    sp.set_defaults(stages=["constants", "jets"], system="threebody")
    sp = sub.add_parser("gallery", help="counterexamples")
    gsub = sp.add_subparsers(dest="example")
    g = gsub.add_parser("toy")
    _common(g)
    g.add_argument("--a", type=float)
    g.add_argument("--b", type=float)
    g.set_defaults(stages=["constants", "verify"], system="toy")
    g = gsub.add_parser("lossdiff")
    _common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--m", type=int)
    g.add_argument("--nu", type=float)
    g.add_argument("--rho", type=float)
    g.set_defaults(stages=["constants", "verify"], system="lossdiff")
    sp = sub.add_parser("run", help="full stage chain from a configuration file")
    _common(sp)
    sp.set_defaults(stages=None, system=None)
    return ap


_NON_CONFIG = {"command", "example", "config", "stages"}


def config_from_args(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        text = path.read_text().strip()
        doc = json.loads(text) if text else {}
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
    for k, v in vars(args).items():
        if k in _NON_CONFIG or v is None:
            continue
        doc[k] = v
    if args.command == "run" and not getattr(args, "config", None):
        raise UsageError("run needs --config")
    if args.stages is not None:
        doc["stages"] = args.stages
    return RunConfig.from_mapping(doc)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command is None or (args.command == "gallery" and args.example is None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = config_from_args(args)
        status, report = run(cfg)
    except (UsageError, TypeError, json.JSONDecodeError) as exc:
        print(f"parabolic: error: {exc}", file=sys.stderr)
        return 2
    if cfg.out is None:
        sys.stdout.write(dumps_report(report))
    else:
        print(f"{'PASS' if report['passed'] else 'FAIL'}: report written to {_out_paths(cfg.out)[0]}")
    return status


if __name__ == "__main__":
    sys.exit(main())
