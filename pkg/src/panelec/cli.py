"""Command-line interface: ``panelec fit`` and ``panelec simulate``.

Exit codes: 0 success, 2 unreadable input (config or dataset syntax),
3 estimation failure, 4 schema violation (unknown keys, missing columns,
inconsistent settings).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import montecarlo as mc
from .errors import PanelError
from .panel import assign_strata, build_incidence, build_panel_index
from .projections import within_projector
from .single import Regime, estimate_single, identity_checks, que_moments
from .sur import (
    SurDesign,
    que_sur_components,
    que_sur_moments,
    sur_gls,
    sur_within_residuals,
    wb_moments,
    wb_sur_components,
)

EXIT_PARSE = 2
EXIT_ESTIMATION = 3
EXIT_SCHEMA = 4

ESTIMATES_HEADER = ("coefficient", "variant", "estimate", "se")
COMPONENTS_HEADER = ("variant", "stratum", "component", "m", "j", "value")
LOG_HEADER = ("lambda", "N", "run", "file") + ESTIMATES_HEADER

MODEL_KEYS = {"model", "regime", "procedure", "strata"}
SIM_KEYS = {
    "N", "T", "rotation", "lambda", "runs", "seed", "strata", "restricted",
    "regressor_clock", "omega_scale", "report_stratum", "beta",
    "sigma2_mu", "sigma2_nu", "sigma2_u", "threads",
}
SECTIONS = {"model", "equations", "restrictions", "simulation"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _parse_error(msg):
    return CliError(EXIT_PARSE, msg)


def _schema_error(msg):
    return CliError(EXIT_SCHEMA, msg)


def fmt(x) -> str:
    """Machine-file number format: 17 significant digits."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


# ---------------------------------------------------------------- config


@dataclass
class Settings:
    """Resolved run configuration (config file plus flag overrides)."""

    model: str = "single"
    regime: str = "all"
    procedure: str = "both"
    strata: str | None = None
    equations: dict = field(default_factory=dict)
    restrictions: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)

    def regimes(self):
        if self.regime == "all":
            return tuple(Regime)
        try:
            return tuple(Regime.parse(r.strip()) for r in self.regime.split(","))
        except ValueError as exc:
            raise _schema_error(str(exc)) from None

    def procedures(self):
        if self.procedure in ("both", "all"):
            return mc.PROCEDURES
        procs = tuple(p.strip() for p in self.procedure.split(","))
        bad = [p for p in procs if p not in mc.PROCEDURES]
        if bad:
            raise _schema_error(f"unknown procedure {bad[0]!r} (use que, wb or both)")
        return procs

    def canonical(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "regime": self.regime,
                "procedure": self.procedure,
                "strata": self.strata,
                "equations": self.equations,
                "restrictions": self.restrictions,
                "simulation": self.simulation,
            },
            sort_keys=True,
        )


def _parse_equation(dep, rhs):
    if "~" in rhs:
        lhs, rhs = rhs.split("~", 1)
        if lhs.strip() and lhs.strip() != dep:
            raise _schema_error(f"equation {dep!r}: left-hand side {lhs.strip()!r} does not match its key")
    regs = [r.strip() for r in rhs.split("+") if r.strip()]
    if not regs:
        raise _schema_error(f"equation {dep!r} has no regressors")
    if len(set(regs)) != len(regs):
        raise _schema_error(f"equation {dep!r} repeats a regressor")
    return regs


def _parse_restriction(name, text):
    members = []
    for item in text.split(","):
        item = item.strip()
        if item.count(":") != 1:
            raise _schema_error(f"restriction {name!r}: expected equation:regressor, got {item!r}")
        eq, var = (p.strip() for p in item.split(":"))
        members.append((eq, var))
    if len(members) < 2:
        raise _schema_error(f"restriction {name!r} needs at least two coefficients")
    return members


def load_config(path) -> Settings:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise _parse_error(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise _parse_error(f"config {path}: {exc}".replace("\n", " ")) from None
    unknown = set(cp.sections()) - SECTIONS
    if unknown:
        raise _schema_error(f"unknown config section [{sorted(unknown)[0]}]")
    s = Settings()
    if cp.has_section("model"):
        for key, val in cp.items("model"):
            if key not in MODEL_KEYS:
                raise _schema_error(f"unknown key {key!r} in [model]")
            setattr(s, key, val.strip())
    if cp.has_section("equations"):
        s.equations = {k: _parse_equation(k, v) for k, v in cp.items("equations")}
    if cp.has_section("restrictions"):
        s.restrictions = {k: _parse_restriction(k, v) for k, v in cp.items("restrictions")}
    if cp.has_section("simulation"):
        for key, val in cp.items("simulation"):
            if key not in SIM_KEYS:
                raise _schema_error(f"unknown key {key!r} in [simulation]")
            s.simulation[key] = val.strip()
    return s


def _apply_flags(s: Settings, args) -> Settings:
    for key in ("model", "regime", "procedure", "strata"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(s, key, v)
    for key in ("seed", "runs"):
        v = getattr(args, key, None)
        if v is not None:
            s.simulation[key] = str(v)
    return s


def _check_model(s: Settings, allow_list=False):
    models = [m.strip() for m in s.model.split(",")]
    for m in models:
        if m not in ("single", "sur"):
            raise _schema_error(f"model must be single or sur, got {m!r}")
    if len(models) > 1 and not allow_list:
        raise _schema_error("fit takes a single model")
    return models


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    columns: dict
    ids: list
    periods: list
    strata: list | None


def _maybe_int(values):
    try:
        return [int(v) for v in values]
    except ValueError:
        return list(values)


def read_dataset(path, needed) -> Dataset:
    """Read a long-format CSV; ``needed`` lists the numeric columns used."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise _parse_error(f"cannot read dataset {path}: {exc}") from None
    except csv.Error as exc:
        raise _parse_error(f"dataset {path}: {exc}") from None
    if not rows:
        raise _parse_error(f"dataset {path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    for ln, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise _parse_error(f"dataset line {ln}: expected {len(header)} fields, found {len(r)}")
    for col in ("id", "t") + tuple(needed):
        if col not in header:
            raise _schema_error(f"dataset is missing column {col!r}")
    if len(set(header)) != len(header):
        raise _schema_error("dataset has duplicate column names")
    pos = {h: k for k, h in enumerate(header)}
    cols = {}
    for col in needed:
        vals = []
        for ln, r in enumerate(body, start=2):
            cell = r[pos[col]].strip()
            if cell == "":
                raise _schema_error(f"dataset line {ln}: missing value in column {col!r}")
            try:
                vals.append(float(cell))
            except ValueError:
                raise _parse_error(f"dataset line {ln}: column {col!r} is not numeric ({cell!r})") from None
        arr = np.array(vals)
        if not np.all(np.isfinite(arr)):
            raise _schema_error(f"column {col!r} has non-finite values")
        cols[col] = arr
    for key in ("id", "t"):
        if any(r[pos[key]].strip() == "" for r in body):
            raise _schema_error(f"dataset has an empty {key!r} cell")
    ids = _maybe_int([r[pos["id"]].strip() for r in body])
    periods = _maybe_int([r[pos["t"]].strip() for r in body])
    strata = None
    if "stratum" in pos:
        strata = _maybe_int([r[pos["stratum"]].strip() for r in body])
    return Dataset(cols, ids, periods, strata)


def _dataset_columns(ds_header_path):
    with open(ds_header_path, newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _default_equations(path, model):
    try:
        header = _dataset_columns(path)
    except OSError as exc:
        raise _parse_error(f"cannot read dataset {path}: {exc}") from None
    ys = [h for h in header if h.startswith("y")]
    xs = [h for h in header if h not in ("id", "t", "stratum") and not h.startswith("y")]
    if not ys or not xs:
        raise _schema_error("no [equations] given and the dataset has no y*/regressor columns")
    if model == "single":
        return {ys[0]: xs}
    return {y: xs for y in ys}


def _strata_for(spec, ds: Dataset, index, order):
    if spec is None:
        spec = "column" if ds.strata is not None else "single"
    if spec == "single":
        return assign_strata(index, {i: 1 for i in index.ids})
    if spec == "column":
        if ds.strata is None:
            raise _schema_error("dataset is missing column 'stratum'")
        mapping = {}
        for i, a in zip(ds.ids, ds.strata):
            if mapping.setdefault(i, a) != a:
                raise _schema_error(f"stratum is not constant within individual {i!r}")
        return assign_strata(index, mapping)
    parts = spec.split(":")
    if parts[0] in ("deciles", "quantiles"):
        count = 10
        if parts[0] == "deciles" and len(parts) != 2:
            raise _schema_error("strata rule deciles:<column> expected")
        if parts[0] == "quantiles":
            if len(parts) != 3:
                raise _schema_error("strata rule quantiles:<column>:<count> expected")
            try:
                count = int(parts[2])
            except ValueError:
                raise _schema_error(f"bad quantile count {parts[2]!r}") from None
        var = parts[1]
        if var not in ds.columns:
            raise _schema_error(f"dataset is missing column {var!r}")
        v = ds.columns[var][order]
        means = np.bincount(index.ind, weights=v, minlength=index.N) / index.T_i
        if not 1 <= count <= index.N:
            raise _schema_error(f"quantile count must lie in 1..{index.N}")
        return assign_strata(index, values=means, count=count)
    raise _schema_error(f"unknown strata rule {spec!r}")


# ---------------------------------------------------------------- fit


def _identity_lines(identities, prefix=""):
    lines = []
    for name, (lhs, rhs, scale) in identities.items():
        ok = abs(lhs - rhs) <= 1e-9 * scale
        lines.append(f"{prefix}{name} lhs={fmt(lhs)} rhs={fmt(rhs)} ok={'yes' if ok else 'NO'}")
    return lines


def fit_single(X, y, inc, regimes, names):
    """Estimates, components and diagnostics rows for one equation."""
    res = estimate_single(X, y, inc, regimes, names=names)
    est = []
    w = res.within
    for variant, se in (
        ("within", w.se),
        ("within_robust_individual", np.sqrt(np.diag(res.robust_individual))),
        ("within_robust_stratum", np.sqrt(np.diag(res.robust_stratum))),
    ):
        est += [(n, variant, b, s) for n, b, s in zip(w.names, w.beta, se)]
    comp = []
    labels = inc.strata.labels
    diag = []
    for r, fit in res.gls.items():
        v = f"gls_{r.value}"
        est += [(n, v, b, s) for n, b, s in zip(fit.names, fit.beta, fit.se)]
        vc = res.components[r]
        for key in ("sigma2_u", "sigma2_mu", "sigma2_nu"):
            comp.append((r.value, "all", key, "", "", getattr(vc, key)))
        A = inc.strata.A
        for a, lab in enumerate(labels):
            comp.append((r.value, lab, "psi2", "", "", vc.psi_by_stratum(A)[a]))
            comp.append((r.value, lab, "phi2", "", "", vc.phi_by_stratum(A)[a]))
        diag.append(f"clipped[{r.value}]=" + (",".join(vc.clipped) if vc.clipped else "none"))
    return est, comp, _identity_lines(res.identities) + diag


def fit_sur(design: SurDesign, Y, inc, regimes, procedures):
    proj = within_projector(inc)
    states, F = sur_within_residuals(design, Y, proj)
    est, comp, diag = [], [], []
    for eq, st in zip(design.equation_names, states):
        s2 = st.q_n / (proj.trace - st.k1)
        se = np.sqrt(s2 * np.diag(st.A))
        est += [(f"{eq}:{n}", "within", b, s) for n, b, s in zip(st.names, st.beta, se)]
        diag += _identity_lines(identity_checks(st, que_moments(st, st)), prefix=f"{eq}.")
    moms = {"que": que_sur_moments(states), "wb": wb_moments(F, inc)}
    eqs = design.equation_names
    labels = inc.strata.labels
    for proc in procedures:
        for r in regimes:
            if proc == "que":
                c = que_sur_components(design, Y, proj, regime=r, moments=moms["que"])
            else:
                c = wb_sur_components(design, Y, proj, regime=r, moments=moms["wb"])
            fit = sur_gls(design, Y, c, inc=inc)
            v = f"{proc}_{r.value}"
            est += [(n, f"gls_{v}", b, s) for n, b, s in zip(fit.names, fit.beta, fit.se)]
            M, A = design.M, inc.strata.A
            mats = [("Sigma_u", "all", c.Sigma_u), ("Sigma_mu", "all", c.Sigma_mu), ("Sigma_nu", "all", c.Sigma_nu)]
            for a, lab in enumerate(labels):
                mats.append(("Psi", lab, c.psi_stack(A)[a]))
                mats.append(("Phi", lab, c.phi_stack(A)[a]))
            for name, lab, S in mats:
                for m in range(M):
                    for j in range(m, M):
                        comp.append((v, lab, name, eqs[m], eqs[j], S[m, j]))
            diag.append(f"repaired[{v}]=" + (",".join(c.repaired) if c.repaired else "none"))
    return est, comp, diag


def run_fit(dataset, settings: Settings, out: Path):
    models = _check_model(settings)
    model = models[0]
    eqs = settings.equations or _default_equations(dataset, model)
    if model == "single" and len(eqs) != 1:
        raise _schema_error("a single-equation model takes exactly one equation")
    if model == "single" and settings.restrictions:
        raise _schema_error("restrictions need model = sur")
    needed = []
    for dep, regs in eqs.items():
        for c in [dep] + regs:
            if c not in needed:
                needed.append(c)
    strata_var = None
    if settings.strata and settings.strata.split(":")[0] in ("deciles", "quantiles"):
        strata_var = settings.strata.split(":")[1] if ":" in settings.strata else None
        if strata_var and strata_var not in needed:
            needed.append(strata_var)
    ds = read_dataset(dataset, needed)
    try:
        index = build_panel_index(zip(ds.ids, ds.periods))
    except PanelError as exc:
        raise _schema_error(str(exc)) from None
    order = index.source_order
    strata = _strata_for(settings.strata, ds, index, order)
    inc = build_incidence(index, strata)
    regimes = settings.regimes()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if model == "single":
            (dep, regs), = eqs.items()
            X = np.column_stack([ds.columns[c][order] for c in regs])
            est, comp, diag = fit_single(X, ds.columns[dep][order], inc, regimes, regs)
        else:
            Xs = [np.column_stack([ds.columns[c][order] for c in regs]) for regs in eqs.values()]
            Y = np.column_stack([ds.columns[d][order] for d in eqs])
            try:
                design = SurDesign.build(Xs, list(eqs.values()), list(eqs), settings.restrictions or None)
            except ValueError as exc:
                raise _schema_error(str(exc)) from None
            est, comp, diag = fit_sur(design, Y, inc, regimes, settings.procedures())
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "estimates.csv", ESTIMATES_HEADER, est)
    _write_csv(out / "components.csv", COMPONENTS_HEADER, comp)
    head = [
        f"model={model}",
        f"n={index.n} N={index.N} T={index.T} A={strata.A}",
        f"connected={'yes' if within_projector(inc).connected else 'no'}",
    ]
    head += [f"warning={w.message}" for w in caught]
    (out / "diagnostics.txt").write_text("\n".join(head + diag) + "\n", encoding="utf-8")
    return est


# ---------------------------------------------------------------- simulate


def _floats(text, what):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise _schema_error(f"{what}: expected numbers, got {text!r}") from None


def _ints(text, what):
    vals = _floats(text, what)
    if any(v != int(v) for v in vals):
        raise _schema_error(f"{what}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def _bool(text, what):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise _schema_error(f"{what}: expected a boolean, got {text!r}")


def sim_configs(settings: Settings):
    """Expand the [simulation] block into one DgpConfig per grid cell."""
    sim = settings.simulation
    base = {}
    for key, conv in (("T", _ints), ("runs", _ints), ("seed", _ints), ("strata", _ints), ("report_stratum", _ints)):
        if key in sim:
            base[key] = conv(sim[key], key)[0]
    for key in ("rotation", "omega_scale", "sigma2_mu", "sigma2_nu", "sigma2_u"):
        if key in sim:
            base[key] = _floats(sim[key], key)[0]
    if "beta" in sim:
        base["beta"] = tuple(_floats(sim["beta"], "beta"))
        if len(base["beta"]) != 4:
            raise _schema_error("beta needs four values (const, x1, x2, x3)")
    if "restricted" in sim:
        base["restricted"] = _bool(sim["restricted"], "restricted")
    if "regressor_clock" in sim:
        base["regressor_clock"] = sim["regressor_clock"]
    Ns = _ints(sim.get("N", "250"), "N")
    lams = _floats(sim.get("lambda", "0, 1, 2"), "lambda")
    out = []
    for model in _check_model(settings, allow_list=True):
        for N in Ns:
            for lam in lams:
                try:
                    out.append(mc.DgpConfig(model=model, N=N, lam=lam, **base))
                except ValueError as exc:
                    raise _schema_error(str(exc)) from None
    return out


def _threads(args, settings):
    if getattr(args, "threads", None) is not None:
        return args.threads
    if "threads" in settings.simulation:
        return _ints(settings.simulation["threads"], "threads")[0]
    env = os.environ.get("PANELEC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _schema_error(f"PANELEC_THREADS must be an integer, got {env!r}") from None
    return 1


def _log_rows(cfg, run_id, fname, rec, coef_names):
    rows = []
    if cfg.model == "single":
        variants = [("within", "fe_beta", "fe_se"), ("within_robust_individual", "fe_beta", "fe_robust_se"),
                    ("within_robust_stratum", "fe_beta", "fe_robust_stratum_se")]
        for v, bk, sk in variants:
            rows += [(cfg.lam, cfg.N, run_id, fname, n, v, b, s)
                     for n, b, s in zip(coef_names[1:], rec[bk], rec[sk])]
        for r in mc.REGIMES:
            rows += [(cfg.lam, cfg.N, run_id, fname, n, f"gls_{r.value}", b, s)
                     for n, b, s in zip(coef_names, rec[f"{r.value}_beta"], rec[f"{r.value}_se"])]
    else:
        for proc in mc.PROCEDURES:
            for r in mc.REGIMES:
                k = f"{proc}_{r.value}"
                rows += [(cfg.lam, cfg.N, run_id, fname, n, f"gls_{k}", b, s)
                         for n, b, s in zip(coef_names, rec[f"{k}_beta"], rec[f"{k}_se"])]
    return rows


def write_dataset(path: Path, cfg, data):
    idx = data.index
    ys = ["y"] if data.y.ndim == 1 else [f"y{m + 1}" for m in range(data.y.shape[1])]
    Y = data.y.reshape(idx.n, -1)
    labels = data.strata.labels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", "stratum"] + ys + ["x1", "x2", "x3"])
        for r in range(idx.n):
            w.writerow(
                [idx.ids[idx.ind[r]] + 1, idx.periods[idx.per[r]] + 1, labels[data.strata.of_row[r]]]
                + [fmt(v) for v in Y[r]]
                + [fmt(v) for v in data.X[r]]
            )


def _fit_config_text(cfg):
    if cfg.model == "single":
        return "[model]\nmodel = single\nstrata = column\n\n[equations]\ny = x1 + x2 + x3\n"
    text = "[model]\nmodel = sur\nstrata = column\n\n[equations]\ny1 = x1 + x2\ny2 = x1 + x2 + x3\ny3 = x2 + x3\n"
    if cfg.restricted:
        text += "\n[restrictions]\nb12 = y1:x2, y2:x1\nb23 = y2:x3, y3:x2\n"
    return text


def emit_data(cfg, out: Path, runs):
    """Write each run's dataset plus the estimates the simulation recorded."""
    cell = out / "data" / f"{cfg.model}_lambda{cfg.lam:g}_N{cfg.N}"
    cell.mkdir(parents=True, exist_ok=True)
    (cell / "fit.cfg").write_text(_fit_config_text(cfg), encoding="utf-8")
    rows = []
    for run_id in range(runs):
        data = mc.simulate_run(cfg, run_id)
        fname = f"run{run_id:04d}.csv"
        write_dataset(cell / fname, cfg, data)
        try:
            rec = mc.estimate_run(cfg, data)
        except PanelError:
            continue
        if cfg.model == "single":
            names = ("const", "x1", "x2", "x3")
        else:
            names = mc.sur_design(data.X[:1], cfg.restricted).coef_names
        rows += _log_rows(cfg, run_id, fname, rec, names)
    _write_csv(cell / "simulation_log.csv", LOG_HEADER, rows)


def _report(tabs) -> str:
    lines = ["Monte Carlo summary (SE columns are across-run means of estimated standard errors)", ""]
    for name, header in mc.TABLE_HEADERS.items():
        if name not in tabs:
            continue
        lines.append(f"== {name} ==")
        cells = [[str(h) for h in header]]
        for row in tabs[name]:
            cells.append([v if isinstance(v, str) else ("%d" % v if isinstance(v, (int, np.integer)) else "%.3f" % v)
                          for v in row])
        widths = [max(len(c[k]) for c in cells) for k in range(len(header))]
        for c in cells:
            lines.append("  ".join(s.rjust(w) for s, w in zip(c, widths)))
        lines.append("")
    return "\n".join(lines)


def run_simulate(settings: Settings, out: Path, threads: int, emit: bool):
    t0 = time.perf_counter()
    configs = sim_configs(settings)
    summaries = [mc.run_experiment(c, threads=threads) for c in configs]
    tabs = mc.tables(summaries)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in tabs.items():
        _write_csv(out / f"{name}.csv", mc.TABLE_HEADERS[name], rows)
    (out / "report.txt").write_text(_report(tabs), encoding="utf-8")
    if emit:
        for c in configs:
            emit_data(c, out, c.runs)
    runtime = time.perf_counter() - t0
    failures = sum(len(s.failures) for s in summaries)
    manifest = [
        f"config_sha256={hashlib.sha256(settings.canonical().encode()).hexdigest()}",
        f"seed={configs[0].seed if configs else ''}",
        f"runs={configs[0].runs if configs else 0}",
        f"cells={len(configs)}",
        f"failed_runs={failures}",
        f"threads={threads}",
        f"numpy={np.__version__}",
        f"runtime_seconds={runtime:.3f}",
    ]
    for s in summaries:
        for rid, err in s.failures:
            manifest.append(f"failure model={s.config.model} lambda={s.config.lam:g} N={s.config.N} run={rid}: {err}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return summaries


# ---------------------------------------------------------------- entry


def build_parser():
    p = argparse.ArgumentParser(prog="panelec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI configuration file")
        sp.add_argument("--output", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--model", choices=("single", "sur"))
        sp.add_argument("--regime", help="homoscedastic|u|mu|both|all or a comma list")
        sp.add_argument("--procedure", help="que|wb|both (SUR only)")
        sp.add_argument("--strata", help="column | deciles:<var> | quantiles:<var>:<A> | single")

    f = sub.add_parser("fit", help="estimate a model on a long-format CSV dataset")
    f.add_argument("dataset", type=Path)
    common(f)
    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--emit-data", action="store_true", help="also write per-run datasets and a run log")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else 0
    try:
        settings = load_config(args.config) if args.config else Settings()
        settings = _apply_flags(settings, args)
        if args.command == "fit":
            run_fit(args.dataset, settings, args.output)
        else:
            if getattr(args, "runs", None) is not None and args.runs < 1:
                raise _schema_error("--runs must be positive")
            run_simulate(settings, args.output, _threads(args, settings), args.emit_data)
    except CliError as exc:
        print(f"panelec: error: {exc}", file=sys.stderr)
        return exc.code
    except PanelError as exc:
        print(f"panelec: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except np.linalg.LinAlgError as exc:
        print(f"panelec: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
