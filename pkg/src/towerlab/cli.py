"""Command-line driver: one subcommand per experiment, CSV + manifest outputs.

Every run writes into a scratch directory next to ``--out`` and moves the
files into place only on success, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_csv, write_json
from .errors import ConfigError, TowerlabError

__all__ = ["ExperimentConfig", "load_config_file", "build_config", "run", "main"]


@dataclass(frozen=True)
class ExperimentConfig:
    gamma: float = 0.5
    degree: int = 2
    seed: int = 0
    orbit_len: int = 10**6
    ensemble: int = 8
    burn_in: int = 1000
    max_time: int = 256
    min_len: float = 1e-12
    n_max: int = 0  # 0: max_time
    k_max: int = 128
    observable: str = "cos2pix"
    observable2: str = ""  # empty: same as observable
    lag_min: int = 1
    lag_max: int = 256
    n_branches: int = 64
    zeta: float = 3.0
    tv_steps: int = 256
    n0: int = 0  # 0: computed from the model
    eps: float = 0.1
    i_max: int = 4
    horizon: int = 400
    pairs: int = 10**5
    checkpoints: str = "10000,100000,1000000"
    out: str = "out"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.degree < 2:
            raise ConfigError(f"degree must be >= 2, got {self.degree}")
        positive = ("orbit_len", "ensemble", "max_time", "k_max", "lag_min", "lag_max", "n_branches",
                    "tv_steps", "i_max", "horizon", "pairs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name.replace('_', '-')} must be positive, got {getattr(self, name)}")
        if self.burn_in < 0 or self.n0 < 0 or self.n_max < 0:
            raise ConfigError("burn-in, n0 and n-max must be nonnegative")
        if not 0 < self.eps <= 1:
            raise ConfigError(f"eps must lie in (0, 1], got {self.eps}")
        if self.lag_max < self.lag_min:
            raise ConfigError("lag-max must be >= lag-min")
        if not self.min_len > 0:
            raise ConfigError("min-len must be positive")

    @property
    def checkpoint_list(self) -> list[int]:
        try:
            out = sorted(int(c) for c in self.checkpoints.split(",") if c.strip())
        except ValueError:
            raise ConfigError(f"checkpoints must be comma-separated integers, got {self.checkpoints!r}") from None
        if not out or out[0] < 1:
            raise ConfigError("checkpoints must be positive")
        return out


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, raw):
    typ = type(ExperimentConfig.__dataclass_fields__[name].default)
    try:
        if typ is int:
            return int(float(raw)) if "e" in str(raw).lower() else int(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {typ.__name__}") from None


def load_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# subcommands; each writes into ``d`` and returns a small summary dict


def _circle(cfg):
    from .circle_map import CircleMapParams

    return CircleMapParams(cfg.gamma, cfg.degree)


def _solenoid(cfg):
    from .solenoid import SolenoidParams

    return SolenoidParams(_circle(cfg))


def _scheme(cfg):
    from . import induced_scheme as isc

    params = _circle(cfg)
    base = isc.build_base_partition(params, cfg.n_max or cfg.max_time)
    cells, tails = isc.build_rstar_partition(params, base, cfg.max_time, min_len=cfg.min_len)
    return params, base, cells, tails


def cmd_tails(cfg, d: Path):
    from . import induced_scheme as isc

    params, base, cells, tails = _scheme(cfg)
    isc.write_tails_csv(d / "tails.csv", tails)
    rep = isc.check_expansion_distortion(params, cells, max_cells=2000)
    summary = {
        "closed_cells": cells.n_closed,
        "cells": len(cells),
        "truncation_mass": tails.truncation_mass,
        "scheme": dataclasses.asdict(rep),
    }
    write_json(d / "report.json", summary)
    return summary


def cmd_diam(cfg, d: Path):
    from . import induced_scheme as isc

    params, base, cells, tails = _scheme(cfg)
    k_max = min(cfg.k_max, cfg.max_time - 1)
    series = isc.delta_k(params, cells, k_max)
    isc.write_delta_csv(d / "delta.csv", series)
    return {"k_max": k_max, "certified": int(series.certified.sum())}


def cmd_correlate(cfg, d: Path):
    from . import stats as st

    lags = st.log_lags(cfg.lag_min, cfg.lag_max)
    conf = st.CorrelationConfig(orbit_len=cfg.orbit_len, ensemble=cfg.ensemble, burn_in=cfg.burn_in, seed=cfg.seed)
    series = st.correlation(_solenoid(cfg), cfg.observable, cfg.observable2 or cfg.observable, lags, conf)
    st.write_correlation_csv(d / "correlation.csv", series)
    out = {"evaluations": series.evaluations}
    try:
        fit = st.fit_power_law(series)
        out["fit"] = dataclasses.asdict(fit)
    except TowerlabError as e:
        out["fit_error"] = str(e)
    return out


def cmd_clt(cfg, d: Path):
    from . import stats as st

    rep = st.clt_test(_solenoid(cfg), cfg.observable, cfg.ensemble, cfg.orbit_len, cfg.seed, burn_in=cfg.burn_in)
    st.write_clt_outputs(d, rep)
    return {"p_value": rep.p_value, "sigma2": rep.sigma2, "flags": rep.flags}


def cmd_tower_tv(cfg, d: Path):
    from . import tower as tw

    model = tw.power_law_model(cfg.n_branches, cfg.zeta)
    tv = tw.tv_decay(model, tw.DensityVector.ground(model), tw.invariant_density(model), cfg.tv_steps)
    tw.write_tower_csv(d / "tower.csv", model)
    tw.write_tv_csv(d / "tv.csv", tv)
    return {"tv_final": float(tv[-1])}


def _coupling_model(cfg):
    from . import tower as tw

    return tw.power_law_model(cfg.n_branches, cfg.zeta)


def cmd_couple(cfg, d: Path):
    from . import coupling as cp
    from . import tower as tw

    model = _coupling_model(cfg)
    n0 = cfg.n0 or tw.find_n0_gamma0(model)[0]
    lam = tw.DensityVector.ground(model)
    nu = tw.invariant_density(model)
    tail = cp.estimate_T_tail(model, lam, nu, n0, cfg.pairs, cfg.horizon, seed=cfg.seed)
    cp.write_coupling_tail_csv(d / "coupling_tail.csv", tail)
    tw.write_tower_csv(d / "tower.csv", model)
    return {"n0": n0, "censored": tail.censored}


def cmd_e3_audit(cfg, d: Path):
    from . import coupling as cp
    from . import tower as tw

    model = tw.bundled_model()
    n0 = cfg.n0 or tw.find_n0_gamma0(model)[0]
    lam = tw.DensityVector.ground(model)
    lam2 = tw.DensityVector.point_mass(model, tw.TowerStateIndex(model.n_branches - 1, int(model.R[-1]) - 1))
    horizon = min(cfg.horizon, 40)
    res = cp.run_extraction(model, lam, lam2, n0, cfg.eps, i_max=cfg.i_max, horizon=horizon,
                            tv_horizon=cfg.horizon)
    cp.write_e3_csv(d / "e3_check.csv", res)
    cp.write_extraction_csv(d / "extraction.csv", res)
    tw.write_tower_csv(d / "tower.csv", model)
    return {"n0": n0, "dominated": bool(res.dominated.all()), "eps1": res.eps1, "K1": res.K1,
            "K1_fit": res.K1_fit, "ledger_defect": res.ledger_defect}


def cmd_escape(cfg, d: Path):
    from . import solenoid as so

    cps = cfg.checkpoint_list
    avgs = so.escape_averages(_solenoid(cfg), cps, cfg.ensemble, cfg.seed, burn_in=cfg.burn_in)
    rows = [(k, n, float(v)) for k in range(avgs.shape[0]) for n, v in zip(cps, avgs[k])]
    write_csv(d / "escape.csv", ["member", "n", "average"], rows)
    mean = avgs.mean(axis=0)
    write_csv(d / "escape_mean.csv", ["n", "mean_average"], zip(cps, mean))
    return {"mean": mean.tolist(), "monotone": bool(np.all(np.diff(mean) < 0))}


COMMANDS = {
    "tails": cmd_tails,
    "diam": cmd_diam,
    "correlate": cmd_correlate,
    "clt": cmd_clt,
    "tower-tv": cmd_tower_tv,
    "couple": cmd_couple,
    "e3-audit": cmd_e3_audit,
    "escape": cmd_escape,
}


def _versions():
    import numba
    import scipy

    return {"towerlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run(subcommand: str, cfg: ExperimentConfig) -> dict:
    """Run one experiment; outputs land in ``cfg.out`` only if it succeeds."""
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".towerlab-", dir=out.parent))
    t0 = time.perf_counter()
    try:
        summary = COMMANDS[subcommand](cfg, scratch)
        files = sorted(p.name for p in scratch.iterdir())
        manifest = {
            "subcommand": subcommand,
            "config": dataclasses.asdict(cfg),
            "versions": _versions(),
            "wall_time_s": time.perf_counter() - t0,
            "outputs": files + ["manifest.json"],
            "summary": summary,
        }
        write_json(scratch / "manifest.json", manifest)
        out.mkdir(parents=True, exist_ok=True)
        for p in scratch.iterdir():
            shutil.move(str(p), out / p.name)
        return manifest
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; flags override it")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = type(f.default)
        common.add_argument(flag, dest=f.name, type=typ, default=None, help=f"(default {f.default})")
    p = argparse.ArgumentParser(prog="towerlab", description="Tower, coupling and statistics experiments.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    helps = {
        "tails": "first-return partition and tails.csv",
        "diam": "cylinder diameters delta_k (delta.csv)",
        "correlate": "lagged correlations (correlation.csv)",
        "clt": "CLT test (clt.csv, clt_report.json)",
        "tower-tv": "exact TV decay on a power-law tower (tv.csv)",
        "couple": "Monte Carlo tail of the simultaneous return time",
        "e3-audit": "extraction and the TV bound on the bundled model",
        "escape": "Birkhoff averages of the distance to the fixed point",
    }
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        manifest = run(args.subcommand, cfg)
    except (TowerlabError, NotImplementedError, OSError) as e:
        print(f"towerlab {args.subcommand}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps(manifest["summary"], sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
