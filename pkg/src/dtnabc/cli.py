"""Command line runner: ``dtnabc run | dtn-build | report | schema``.

Exit status 0 on success, 1 for invalid configs, arguments or observable
files, 2 when a numerical stage fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DECAY_RTOL = 1e-3

log = logging.getLogger("dtnabc")


class _Usage(Exception):
    pass


def _set_threads(n: int | None) -> None:
    # must run before numpy is imported for the BLAS pools to honour it
    if n is not None:
        if n < 1:
            raise _Usage("--threads must be >= 1")
        for v in _THREAD_VARS:
            os.environ[v] = str(n)


def _load(cfg_arg: str):
    from .config import load_config

    if cfg_arg is None:
        raise _Usage("--config is required")
    text = str(cfg_arg)
    if not text.lstrip().startswith("{"):
        from .config import bundled_names

        if not Path(text).exists() and text not in bundled_names():
            raise _Usage(f"config {text!r} is neither a file nor a bundled name ({', '.join(bundled_names())})")
    return load_config(text)


# ---------------------------------------------------------------- commands
def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args.config)
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_json())
    res = run_experiment(cfg, out_dir=out, cache_dir=args.cache, force=args.force)
    ser = res.series
    print(f"{cfg.name}: {len(ser.times)} samples, N(T) = {ser.N[-1]:.6g}, max |N - N_ref| = {ser.max_error():.3e}")
    for f in res.files:
        print(f"  wrote {f}")
    return EXIT_OK


def cmd_dtn_build(args) -> int:
    from .experiment import build_domain, kernel_samples

    cfg = _load(args.config)
    if cfg.model == "tdhf":
        from .lattice import build_grid
        from .tdhf import TdhfModel
        from .experiment import Domain, _box

        grid = build_grid(3, _box(cfg), cfg.grid.h)
        faces = None if cfg.grid.open_faces is None else [tuple(f) for f in cfg.grid.open_faces]
        model = TdhfModel(grid, cfg.tdhf, cfg.stencil, faces)
        dom = Domain(grid, model.part, model.blocks)
    else:
        if cfg.bc.kind == "abc":
            dom = build_domain(cfg)
        else:
            # kernels always refer to the open-boundary partition
            dom = build_domain(cfg.model_copy(update={"bc": cfg.bc.model_copy(update={"kind": "abc"})}))
    nodes = args.nodes if args.nodes else list(cfg.bc.nodes)
    if not nodes:
        raise _Usage("no nodes: give --nodes or a config with bc.nodes")
    if any(not s > 0 for s in nodes):
        raise _Usage(f"nodes must be positive: {nodes}")
    cache = Path(args.out) if args.out else Path(cfg.dtn.cache_dir or "dtn_cache")
    derivative = args.derivative or cfg.bc.variant == "first_moment"
    before = {p.name for p in cache.glob("*.qdtn")} if cache.exists() else set()
    samples = kernel_samples(cfg, dom, nodes, derivative=derivative, cache_dir=cache, force=args.force)
    for smp in samples:
        name = f"{cfg.name}_s{float(smp.s)!r}.qdtn"
        state = "reused" if name in before and not args.force else "built"
        print(f"{state} {cache / name}  n_Gamma={smp.n_gamma}  hash={smp.fingerprint}")
    return EXIT_OK


def _find_observables(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("observables.csv")))
        elif p.exists():
            found.append(p)
        else:
            raise _Usage(f"{p}: no such file or directory")
    return found


def _summarise(path: Path) -> dict:
    import numpy as np

    from .propagate import ObservableSeries

    ser = ObservableSeries.from_csv(path)
    a = ser.arrays()
    row = {"run": path.parent.name or str(path), "bc": "", "eta": math.nan, "samples": len(ser.times)}
    cfg_path = path.parent / "config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        bc = cfg.get("bc", {})
        row["bc"] = bc.get("kind", "") if bc.get("kind") != "abc" else f"abc m={bc.get('order')} {bc.get('variant')}"
        if bc.get("kind") == "cap":
            row["eta"] = float(bc.get("eta"))
    if not ser.times:
        row.update(T=math.nan, N0=math.nan, N_final=math.nan, max_err=math.nan, final_err=math.nan, flags="empty")
        return row
    N = a["N"]
    err = a["err_N"]
    flags = []
    if N[-1] >= N[0] * (1 - DECAY_RTOL):
        flags.append("non-decaying N")
    W = a["W"]
    ok = np.isfinite(W)
    if ok.sum() > 1 and not np.array_equal(W[ok], N[ok]):
        w = W[ok]
        flags.append("W monotone" if np.all(np.diff(w) <= 1e-8 * abs(w[0])) else "W increases")
    has_err = np.isfinite(err).any()
    row.update(
        T=float(a["t"][-1]),
        N0=float(N[0]),
        N_final=float(N[-1]),
        max_err=float(np.nanmax(err)) if has_err else math.nan,
        final_err=float(err[-1]),
        flags="; ".join(flags),
    )
    return row


_COLUMNS = ["run", "bc", "samples", "T", "N0", "N_final", "max_err", "final_err", "flags"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.4g}"
    return str(v)


def _table(rows, cols) -> str:
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(x[i]) for x in cells]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(x.ljust(w) for x, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def cmd_report(args) -> int:
    files = _find_observables(args.paths)
    rows = [_summarise(f) for f in files]
    rows.sort(key=lambda r: (math.isnan(r["max_err"]) if isinstance(r["max_err"], float) else True, r["max_err"]))
    print(_table(rows, _COLUMNS))
    cap = sorted((r for r in rows if not math.isnan(r["eta"])), key=lambda r: r["eta"])
    for r in cap:
        r["accuracy"] = 1.0 - r["max_err"] / r["N0"] if r["N0"] else math.nan
    if cap:
        print("\ncomplex absorbing potential sweep")
        print(_table(cap, ["eta", "run", "max_err", "accuracy"]))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_COLUMNS + ["eta"], extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return EXIT_OK


def cmd_schema(args) -> int:
    from .config import bundled_names, config_schema

    if args.list:
        print("\n".join(bundled_names()))
    else:
        print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtnabc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file, bundled config name or inline JSON")
        p.add_argument("--force", action="store_true", help="rebuild kernels whose cache hash differs")
        p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")

    p = sub.add_parser("run", help="run one experiment and write observables and snapshots")
    common(p)
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.add_argument("--cache", help="kernel cache directory (default: config dtn.cache_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dtn-build", help="compute and cache DtN kernel samples")
    common(p)
    p.add_argument("--out", help="cache directory (default: config dtn.cache_dir or ./dtn_cache)")
    p.add_argument("--nodes", type=float, nargs="+", help="sample points s (default: config bc.nodes)")
    p.add_argument("--derivative", action="store_true", help="also store dK/ds")
    p.set_defaults(func=cmd_dtn_build)

    p = sub.add_parser("report", help="summarise observables.csv files or run directories")
    p.add_argument("paths", nargs="*")
    p.add_argument("--out", help="write the summary table as CSV")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.add_argument("--list", action="store_true", help="list bundled config names instead")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        from pydantic import ValidationError

        from .propagate import ObservableSchemaError

        try:
            return args.func(args)
        except ValidationError as exc:
            print(f"invalid config ({exc.error_count()} problem(s)):", file=sys.stderr)
            for e in exc.errors():
                loc = ".".join(str(x) for x in e["loc"]) or "<root>"
                print(f"  {loc}: {e['msg']}", file=sys.stderr)
            return EXIT_VALIDATION
        except ObservableSchemaError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    except _Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # numerical stages report their own context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
