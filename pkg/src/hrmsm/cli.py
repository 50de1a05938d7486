"""Command-line entry point.

Settings come from built-in defaults, then a JSON config document
(``--config``), then command-line flags; later sources win.  A run manifest
written next to the outputs holds the merged config under ``"config"`` and can
be passed back through ``--config`` to regenerate the same outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Failures print a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .errors import ConfigError, HRMSMError
from .estimator import PRESET_GROUPS, VCOV_NAMES, FitResult, availability_conditional_fit, solve_beta, wald
from .mr import CrossFitPlan, NuisanceSpec, solve_mr
from .msm import Feature, WorkingModel, build_design, dose_model, saturated_model
from .panel import ingest
from .regimes import ExpandedTable, enumerate_regimes, expand_panel
from .simulate import SimScenario, default_workers, run_replicates, simulate_panel

COMMANDS = ("fit", "fit-mr", "fit-conditional", "expand", "simulate", "contrast")

DEFAULTS: dict[str, Any] = {
    "input": None,
    "expanded": None,
    "fit_result": None,
    "schema": None,
    "sep": ",",
    "propensity": None,
    "baseline_columns": [],
    "epsilon": 0.01,
    "gamma": 2,
    "max_dose": None,
    "sequences": None,
    "model": "saturated",
    "link": "identity",
    "modifiers": [],
    "tol": 1e-9,
    "max_iter": 100,
    "vcov": list(VCOV_NAMES),
    "contrasts": [],
    "level": 0.95,
    "seed": 0,
    "threads": None,
    "out": None,
    # fit-mr
    "folds": 2,
    "nuisance": {},
    # simulate
    "kind": "ClosedLoopMain",
    "n": 100,
    "T": 50,
    "reps": 100,
    "alpha": [0.25, 2.0, 1.75, 0.5],
    "gamma_coef": [1.0, 0.5, 1.0, 0.5],
    "sigma": 1.0,
    "active_fraction": 0.5,
    "estimator": "ipw",
    "emit_panel": False,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrmsm", description="History-restricted MSM estimation for panels with availability.")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON config document (or a run manifest)")
        sp.add_argument("--out", "-o", default=S, help="output directory")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--threads", type=int, default=S, help="worker cap (else HRMSM_THREADS, else CPU count)")

    def data(sp):
        sp.add_argument("--input", "-i", default=S, help="panel file (delimited)")
        sp.add_argument("--schema", default=S, help='JSON column mapping, e.g. \'{"id": "subject"}\'')
        sp.add_argument("--sep", default=S)
        sp.add_argument("--propensity", type=float, default=S, help="constant design propensity when the file has no pi column")
        sp.add_argument("--baseline-columns", dest="baseline_columns", nargs="*", default=S)
        sp.add_argument("--epsilon", type=float, default=S)

    def model(sp):
        sp.add_argument("--gamma", type=int, default=S, help="window length")
        sp.add_argument("--max-dose", dest="max_dose", type=int, default=S)
        sp.add_argument("--sequences", nargs="*", default=S, help="explicit regime bit strings")
        sp.add_argument("--model", default=S, help="'saturated', 'dose' or a JSON model file")
        sp.add_argument("--link", default=S, choices=("identity", "logit", "log"))
        sp.add_argument("--modifiers", nargs="*", default=S)
        sp.add_argument("--tol", type=float, default=S)
        sp.add_argument("--max-iter", dest="max_iter", type=int, default=S)

    def report(sp):
        sp.add_argument("--vcov", nargs="*", default=S, choices=VCOV_NAMES)
        sp.add_argument("--contrast", dest="contrasts", action="append", default=S,
                        help="preset (blip, dissipation, dose) or NAME=TERM:COEF,TERM:COEF")
        sp.add_argument("--level", type=float, default=S)

    sp = sub.add_parser("fit", help="IPW fit of a working model")
    common(sp), data(sp), model(sp), report(sp)
    sp.add_argument("--expanded", default=S, help="fit from a previously expanded table instead of a panel")

    sp = sub.add_parser("fit-mr", help="cross-fitted multiply-robust fit (gamma = 2)")
    common(sp), data(sp), model(sp), report(sp)
    sp.add_argument("--folds", type=int, default=S)
    sp.add_argument("--nuisance", type=json.loads, default=S, help="JSON nuisance options")

    sp = sub.add_parser("fit-conditional", help="availability-conditional single-step effect")
    common(sp), data(sp), report(sp)
    sp.add_argument("--modifiers", nargs="*", default=S)
    sp.add_argument("--tol", type=float, default=S)

    sp = sub.add_parser("expand", help="write the regime-expanded table")
    common(sp), data(sp), model(sp)

    sp = sub.add_parser("simulate", help="replicate bias/coverage study")
    common(sp), model(sp), report(sp)
    sp.add_argument("--kind", choices=("ClosedLoopMain", "FeedbackCancel"), default=S)
    sp.add_argument("--n", type=int, default=S)
    sp.add_argument("--T", type=int, default=S)
    sp.add_argument("--reps", type=int, default=S)
    sp.add_argument("--alpha", type=float, nargs=4, default=S)
    sp.add_argument("--gamma-coef", dest="gamma_coef", type=float, nargs=4, default=S)
    sp.add_argument("--sigma", type=float, default=S)
    sp.add_argument("--active-fraction", dest="active_fraction", type=float, default=S)
    sp.add_argument("--estimator", choices=("ipw", "mr"), default=S)
    sp.add_argument("--nuisance", type=json.loads, default=S)
    sp.add_argument("--emit-panel", dest="emit_panel", action="store_true", default=S,
                    help="write a single simulated panel instead of running replicates")

    sp = sub.add_parser("contrast", help="Wald contrasts from a saved fit")
    common(sp), report(sp)
    sp.add_argument("--fit-result", dest="fit_result", default=S, help="fit.json from a previous fit")
    return p


def load_config(argv: Sequence[str] | None = None) -> dict:
    """Merge defaults, the config document and flags into one dict."""
    try:
        ns = _parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            raise
        raise ConfigError("invalid command line") from None
    flags = vars(ns)
    cfg = dict(DEFAULTS)
    path = flags.pop("config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
            doc = doc["config"]  # a run manifest
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(doc) - set(DEFAULTS) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        if doc.get("command") not in (None, flags["command"]):
            raise ConfigError(f"config is for command {doc['command']!r}, not {flags['command']!r}")
        cfg.update(doc)
    cfg.update(flags)
    if cfg["out"] is None:
        raise ConfigError("an output directory (--out) is required")
    for key in ("input", "expanded", "fit_result"):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise ConfigError(f"{key.replace('_', '-')} file not found: {cfg[key]}")
    if isinstance(cfg["model"], str) and cfg["model"] not in ("saturated", "dose") and not Path(cfg["model"]).exists():
        raise ConfigError(f"model file not found: {cfg['model']}")
    return cfg


def _threads(cfg) -> int:
    return int(cfg["threads"]) if cfg.get("threads") else default_workers()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _model(cfg) -> WorkingModel:
    spec = cfg["model"]
    if isinstance(spec, dict):
        return WorkingModel.from_dict(spec)
    if spec == "saturated":
        return saturated_model(cfg["gamma"], cfg["link"], cfg["modifiers"])
    if spec == "dose":
        return dose_model(cfg["gamma"], cfg["max_dose"], cfg["link"])
    return WorkingModel.from_json(Path(spec).read_text())


def _panel(cfg):
    if cfg["input"] is None:
        raise ConfigError("--input is required for this command")
    schema = cfg["schema"]
    if isinstance(schema, str):
        try:
            schema = json.loads(schema)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--schema is not valid JSON: {exc}") from None
    return ingest(cfg["input"], schema, sep=cfg["sep"], epsilon=cfg["epsilon"],
                  baseline_columns=cfg["baseline_columns"], propensity=cfg["propensity"])


def _parse_contrast(text: str):
    """``NAME=TERM:COEF,TERM:COEF`` -> (NAME, {TERM: COEF}); presets pass through."""
    if "=" not in text:
        return list(PRESET_GROUPS.get(text, (text,)))
    name, body = text.split("=", 1)
    terms = {}
    for part in body.split(","):
        term, _, coef = part.rpartition(":")
        try:
            terms[term] = float(coef)
        except ValueError:
            raise ConfigError(f"cannot parse contrast term {part!r}") from None
    return [(name, terms)]


def _contrasts(cfg) -> list:
    out = []
    for c in cfg["contrasts"]:
        if isinstance(c, str):
            out.extend(_parse_contrast(c))
        elif isinstance(c, dict) and "name" in c and "terms" in c:
            out.append((c["name"], c["terms"]))
        else:
            raise ConfigError(f"cannot interpret contrast {c!r}")
    return out


def _contrast_table(fit: FitResult, cfg) -> pd.DataFrame:
    rows = []
    for c in _contrasts(cfg):
        label, spec = (c, c) if isinstance(c, str) else c
        for v in cfg["vcov"]:
            w = wald(fit, spec, level=cfg["level"], vcov=v, name=label)
            rows.append({"contrast": label, "vcov": v, "estimate": w.estimate, "se": w.se, "ci_low": w.ci[0],
                         "ci_high": w.ci[1], "z": w.z, "p_value": w.p_value, "level": w.level})
    return pd.DataFrame(rows)


def _csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format="%.17g")


def _write_fit(fit: FitResult, cfg, out: Path) -> list[str]:
    table = fit.coef_table()
    table = table[["term", "estimate"] + [f"se_{v}" for v in cfg["vcov"]]]
    files = {"coefficients.csv": _csv(table), "fit.json": fit.to_json(indent=2)}
    if cfg["contrasts"]:
        files["contrasts.csv"] = _csv(_contrast_table(fit, cfg))
    for name, text in files.items():
        _atomic_write(out / name, text)
    return list(files)


def cmd_fit(cfg, out: Path) -> list[str]:
    model = _model(cfg)
    if cfg["expanded"]:
        table = ExpandedTable.read_csv(cfg["expanded"], sep=cfg["sep"])
    else:
        rset = enumerate_regimes(cfg["gamma"], cfg["max_dose"], cfg["sequences"])
        table = expand_panel(_panel(cfg), rset, model.modifiers)
    fit = solve_beta(build_design(table, model), model, tol=cfg["tol"], max_iter=cfg["max_iter"])
    return _write_fit(fit, cfg, out)


def cmd_fit_mr(cfg, out: Path) -> list[str]:
    model = _model(cfg)
    spec = NuisanceSpec.from_dict({"epsilon": cfg["epsilon"], **cfg["nuisance"]})
    rset = enumerate_regimes(cfg["gamma"], cfg["max_dose"], cfg["sequences"])
    res = solve_mr(_panel(cfg), model, CrossFitPlan(cfg["folds"], cfg["seed"]), spec, gamma=cfg["gamma"],
                   regime_set=rset, tol=cfg["tol"], max_iter=cfg["max_iter"])
    names = _write_fit(res.fit, cfg, out)
    _atomic_write(out / "nuisance.json", res.diagnostics_json(indent=2))
    return names + ["nuisance.json"]


def cmd_fit_conditional(cfg, out: Path) -> list[str]:
    feats = [Feature("intercept"), Feature("position", lag=0)]
    for m in cfg["modifiers"]:
        mf = Feature("modifier", modifier=m)
        feats += [mf, Feature("interaction", operands=("J[t]", m))]
    fit = availability_conditional_fit(_panel(cfg), WorkingModel(tuple(feats)), tol=cfg["tol"])
    return _write_fit(fit, cfg, out)


def cmd_expand(cfg, out: Path) -> list[str]:
    model = _model(cfg)
    rset = enumerate_regimes(cfg["gamma"], cfg["max_dose"], cfg["sequences"])
    table = expand_panel(_panel(cfg), rset, model.modifiers)
    _atomic_write(out / "expanded.csv", table.to_csv(sep=cfg["sep"]))
    return ["expanded.csv"]


def _scenario(cfg) -> SimScenario:
    return SimScenario(kind=cfg["kind"], n=cfg["n"], T=cfg["T"], seed=cfg["seed"], alpha=tuple(cfg["alpha"]),
                       gamma=tuple(cfg["gamma_coef"]), sigma=cfg["sigma"], active_fraction=cfg["active_fraction"])


def cmd_simulate(cfg, out: Path) -> list[str]:
    sc = _scenario(cfg)
    if cfg["emit_panel"]:
        _atomic_write(out / "panel.csv", simulate_panel(sc).serialize())
        return ["panel.csv"]
    contrasts = _contrasts(cfg) or ["blip", "dissipation", "dose"]
    mr_options = dict(cfg["nuisance"]) if cfg["estimator"] == "mr" else None
    if mr_options is not None:
        mr_options["folds"] = cfg["folds"]
    rep = run_replicates(sc, _model(cfg), cfg["estimator"], cfg["reps"], cfg["vcov"], contrasts,
                         workers=_threads(cfg), level=cfg["level"], mr_options=mr_options)
    files = {"replicates.csv": _csv(rep.replicates), "summary.csv": _csv(rep.summary), "long.csv": _csv(rep.long_table())}
    for name, text in files.items():
        _atomic_write(out / name, text)
    return list(files)


def cmd_contrast(cfg, out: Path) -> list[str]:
    if cfg["fit_result"] is None:
        raise ConfigError("--fit-result is required for the contrast command")
    fit = FitResult.from_json(Path(cfg["fit_result"]).read_text())
    if not cfg["contrasts"]:
        raise ConfigError("at least one --contrast is required")
    cfg = {**cfg, "vcov": [v for v in cfg["vcov"] if v in fit.vcov]}
    _atomic_write(out / "contrasts.csv", _csv(_contrast_table(fit, cfg)))
    return ["contrasts.csv"]


HANDLERS = {
    "fit": cmd_fit,
    "fit-mr": cmd_fit_mr,
    "fit-conditional": cmd_fit_conditional,
    "expand": cmd_expand,
    "simulate": cmd_simulate,
    "contrast": cmd_contrast,
}


def _manifest(cfg, outputs: list[str]) -> str:
    versions = {"hrmsm": __version__, "python": platform.python_version(), "numpy": np.__version__,
                "pandas": pd.__version__, "scipy": scipy.__version__}
    return json.dumps({"command": cfg["command"], "config": cfg, "seed": cfg["seed"], "versions": versions,
                       "outputs": outputs}, indent=2, default=str)


def run(cfg: dict) -> int:
    """Dispatch a merged config; returns the exit status."""
    out = Path(cfg["out"])
    outputs = HANDLERS[cfg["command"]](cfg, out)
    _atomic_write(out / "manifest.json", _manifest(cfg, outputs))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(load_config(argv))
    except HRMSMError as exc:
        err = {**exc.to_dict(), "exit_code": exc.exit_code}
    except OSError as exc:
        err = {"error": "IOError", "message": str(exc), "exit_code": 2}
    print(json.dumps(err), file=sys.stderr)
    return err["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
