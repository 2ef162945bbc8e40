"""Command-line harness: one subcommand per experiment, CSV out.

Settings come from built-in defaults, then an optional ``--config`` JSON file,
then explicit flags. The merged settings are echoed as canonical JSON in the
first (comment) line of every CSV file; a closing ``# summary`` line carries
the aggregate results.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import experiments as ex
from .lattice import parse_graph

log = logging.getLogger("ssmarw")

DEFAULTS = {
    "selfcheck": {"fast": False},
    "fixation-scan": {"mus": [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.5], "Ls": [10, 20, 40], "d": 1,
                      "trials": 1000, "cap": 10**7, "threshold": None},
    "torus-time": {"ns": [8, 12, 16, 20], "mu": 0.95, "d": 1, "trials": 200, "cap": 10**8},
    "weak-probe": {"L": 8, "d": 1, "mu": 0.8, "trials": 10000, "x": None, "cap": 10**7},
    "domination": {"graph": "cycle:n=6", "A": "all", "B": "0,2,4", "eta": "2,1,1,1,1,0",
                   "trials": 10000, "alpha": 0.01, "cap": 10**7},
    "confinement-probe": {"graph": "cycle:n=5", "A": "0,1", "eta": "1,0,0,0,0",
                          "h2": "1,1,0,0,0", "trials": 100000, "cap": 10**6},
    "hierarchy-check": {"instances": 100, "ns": [24, 32], "mus": [0.5, 0.7], "vs": [2, 4]},
    "parity-probe": {"steps": 4},
    "ghost-probe": {"L": 6, "d": 1, "mu": 0.8, "trials": 2000, "r": 1, "cap": 10**7},
    "lemma-checks": {"windows": 50},
}



@dataclass
class ExperimentConfig:
    subcommand: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"subcommand": self.subcommand, "seed": self.seed, **self.params}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        body = json.loads(text)
        sub = body.pop("subcommand")
        seed = body.pop("seed", 0)
        return cls(sub, seed, body)


def _int_list(text: str) -> list:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _float_list(text: str) -> list:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _site_list(g, text):
    if text is None or text == "all":
        return sorted(g.active_sites)
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return _int_list(text)


def _vector(g, text) -> np.ndarray:
    vals = text if isinstance(text, (list, tuple)) else _int_list(text)
    if len(vals) != g.n_sites:
        raise ValueError(f"expected {g.n_sites} values, got {len(vals)}")
    return np.array(vals, dtype=np.int64)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmarw", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="decimal 64-bit seed")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--config", help="JSON file of settings")
        sp.add_argument("--out", help="CSV path (default: stdout)")
        sp.add_argument("--no-timestamp", action="store_true", dest="no_timestamp")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("selfcheck", help="run the invariant suite")
    common(sp)
    sp.add_argument("--fast", action="store_true", default=None)

    sp = sub.add_parser("fixation-scan", help="activity fraction at the origin over (mu, L)")
    common(sp)
    sp.add_argument("--mus", type=_float_list)
    sp.add_argument("--Ls", type=_int_list)
    sp.add_argument("--d", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--cap", type=int)
    sp.add_argument("--threshold", type=int)

    sp = sub.add_parser("torus-time", help="half-topplings to stabilise on tori")
    common(sp)
    sp.add_argument("--ns", type=_int_list)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--d", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--cap", type=int)

    sp = sub.add_parser("weak-probe", help="occupation of B(x,1) vs zero odometer")
    common(sp)
    sp.add_argument("--L", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--x", type=_int_list, help="coordinates of x, comma separated")
    sp.add_argument("--cap", type=int)

    sp = sub.add_parser("domination", help="A-stabilisation size vs ARWD time")
    common(sp)
    sp.add_argument("--graph")
    sp.add_argument("--A")
    sp.add_argument("--B")
    sp.add_argument("--eta")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--cap", type=int)

    sp = sub.add_parser("confinement-probe", help="no-exit probability of half-stabilisation")
    common(sp)
    sp.add_argument("--graph")
    sp.add_argument("--A")
    sp.add_argument("--eta")
    sp.add_argument("--h2", help="doubled odometer per site")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--cap", type=int)

    sp = sub.add_parser("hierarchy-check", help="build and validate random hierarchies")
    common(sp)
    sp.add_argument("--instances", type=int)
    sp.add_argument("--ns", type=_int_list)
    sp.add_argument("--mus", type=_float_list)
    sp.add_argument("--vs", type=_int_list)

    sp = sub.add_parser("parity-probe", help="exact parity probabilities on tiny instances")
    common(sp)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("ghost-probe", help="particle plus ghost visits vs Green's function")
    common(sp)
    sp.add_argument("--L", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--r", type=int)
    sp.add_argument("--cap", type=int)

    sp = sub.add_parser("lemma-checks", help="deterministic identities and constants")
    common(sp)
    sp.add_argument("--windows", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    params = dict(DEFAULTS[args.subcommand])
    seed = 0
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        loaded.pop("subcommand", None)
        seed = int(loaded.pop("seed", seed))
        unknown = set(loaded) - set(params)
        if unknown:
            raise SystemExit(f"unknown config keys for {args.subcommand}: {sorted(unknown)}")
        params.update(loaded)
    for k, v in vars(args).items():
        if k in params and v is not None:
            params[k] = v
    if args.seed is not None:
        seed = args.seed
    return ExperimentConfig(args.subcommand, seed, params)


def run(cfg: ExperimentConfig, threads: int = 1) -> ex.ExperimentResult:
    p, seed = cfg.params, cfg.seed
    c = cfg.subcommand
    if c == "selfcheck":
        return ex.selfcheck(seed, fast=bool(p["fast"]))
    if c == "fixation-scan":
        return ex.fixation_scan(p["mus"], p["Ls"], p["trials"], seed, d=p["d"],
                                threshold=p["threshold"], cap=p["cap"], threads=threads)
    if c == "torus-time":
        return ex.torus_time(p["ns"], p["mu"], p["trials"], seed, d=p["d"], cap=p["cap"],
                             threads=threads)
    if c == "weak-probe":
        from .lattice import box
        x = box(p["L"], p["d"]).site(tuple(p["x"])) if p["x"] is not None else None
        return ex.weak_probe(p["L"], p["mu"], p["trials"], seed, d=p["d"], x=x, cap=p["cap"],
                             threads=threads)
    if c == "domination":
        g = parse_graph(p["graph"])
        return ex.domination(g, _site_list(g, p["A"]), _site_list(g, p["B"]), _vector(g, p["eta"]),
                             p["trials"], seed, alpha=p["alpha"], cap=p["cap"], threads=threads)
    if c == "confinement-probe":
        g = parse_graph(p["graph"])
        return ex.confinement_probe(g, _site_list(g, p["A"]), _vector(g, p["eta"]),
                                    _vector(g, p["h2"]), p["trials"], seed, cap=p["cap"],
                                    threads=threads)
    if c == "hierarchy-check":
        grid = [(n, mu, v) for n in p["ns"] for mu in p["mus"] for v in p["vs"]]
        return ex.hierarchy_check(p["instances"], seed, grid=grid, threads=threads)
    if c == "parity-probe":
        return ex.parity_probe(p["steps"])
    if c == "ghost-probe":
        return ex.ghost_probe(p["L"], p["mu"], p["trials"], seed, d=p["d"], r=p["r"], cap=p["cap"])
    if c == "lemma-checks":
        return ex.lemma_checks(seed, windows=p["windows"])
    raise ValueError(f"unknown subcommand {c!r}")


def _finite(o):
    """Replace non-finite floats by strings so the footer stays strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, (float, np.floating)) and not np.isfinite(o):
        return ex.fmt(o)
    return o


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return str(o)


def render_csv(cfg: ExperimentConfig, res: ex.ExperimentResult, timestamp: bool = False) -> str:
    """CSV text with a JSON config header and a JSON summary footer."""
    buf = io.StringIO()
    head = cfg.to_json()
    if timestamp:
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        head = json.dumps({"config": json.loads(head), "timestamp": stamp}, sort_keys=True,
                          separators=(",", ":"))
    buf.write(f"# {head}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(res.columns)
    for row in res.rows:
        w.writerow([ex.fmt(v) for v in row])
    summary = _finite(dict(res.summary, ok=bool(res.ok)))
    buf.write("# summary " + json.dumps(summary, sort_keys=True, default=_json_default,
                                        separators=(",", ":")) + "\n")
    return buf.getvalue()


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    try:
        res = run(cfg, threads=max(1, args.threads))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    text = render_csv(cfg, res, timestamp=not args.no_timestamp)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
        print(f"{cfg.subcommand}: {'PASS' if res.ok else 'FAIL'} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0 if res.ok else 1


if __name__ == "__main__":
    sys.exit(main())
