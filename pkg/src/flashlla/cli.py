"""Command-line entry point: ``flashlla <command> [flags]``.

Settings are resolved as command defaults < ``--config`` file < flags. The
config file holds ``key = value`` lines using the long flag names without the
leading dashes (``block-rows = 32``); ``#`` starts a comment.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Iterable

import numpy as np

from . import experiments as ex
from .datagen import PiecewiseLinearTask, gen_sequence, write_binary, write_csv

COMMANDS = ("gen-data", "ttr", "ratio", "ratecheck", "equiv", "gradcheck", "bench-mem")

# per-command defaults, applied before the config file and the flags
DEFAULTS = {
    "gen-data": {"length": 1024, "segment": [256], "dim": [64], "reps": 1},
    "ttr": {"length": 1024, "segment": [256], "dim": [64], "reps": 100},
    "ratio": {"length": 1024, "segment": [256], "dim": [8, 16, 32, 64], "reps": 100},
    "ratecheck": {"noise": 0.5, "reps": 50, "sizes": [2 ** k for k in range(7, 14)]},
    "equiv": {"sizes": [16, 64], "dim": [4, 8], "lambda": 0.5, "cg-tol": 1e-10, "seeds": 3},
    "gradcheck": {"sizes": [6], "dim": [3], "lambda": 0.5, "seeds": 5},
    "bench-mem": {"dim": [32, 128], "block-rows": 64, "block-cols": 64, "cg-iters": 4},
}


def _ints(s: str) -> list[int]:
    return [int(x) for x in str(s).replace(",", " ").split()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in str(s).replace(",", " ").split()]


def _names(s: str) -> list[str]:
    return [x for x in str(s).replace(",", " ").split()]


# flag name -> (parser, help)
FLAGS = {
    "length": (int, "sequence length L"),
    "segment": (_ints, "segment size(s) S, comma separated"),
    "dim": (_ints, "dimension(s) d, comma separated"),
    "noise": (float, "value noise std"),
    "models": (_names, f"comma separated subset of {','.join(ex.MODELS)}"),
    "reps": (int, "replications (sequences / Monte-Carlo draws)"),
    "seed": (int, "base seed"),
    "bandwidth": (float, "fixed bandwidth h (default: bandwidth-scale * sqrt(d))"),
    "bandwidth-scale": (float, "h = scale * sqrt(d) when --bandwidth is not given (default 2)"),
    "lambda": (float, "ridge penalty for LLA (and local linear in ratecheck)"),
    "mesa-lambda": (float, "ridge penalty for MesaNet (default: --lambda)"),
    "kernel": (str, "exp or rbf"),
    "solver": (str, "cg or direct, for the blockwise LLA solves"),
    "cg-iters": (int, "CG iterations T"),
    "cg-tol": (float, "CG relative residual tolerance"),
    "block-rows": (int, "query block size"),
    "block-cols": (int, "key block size"),
    "sizes": (_ints, "n grid (ratecheck, equiv, gradcheck)"),
    "bandwidths": (_floats, "bandwidth grid for ratecheck"),
    "n-eval": (int, "Monte-Carlo integration points for ratecheck"),
    "blocks": (_ints, "block sizes for equiv (0 means n)"),
    "seeds": (int, "number of seeds for equiv/gradcheck"),
    "threads": (int, "worker threads (default: LLA_THREADS or cpu count)"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flashlla", description="Local linear attention experiments")
    p.add_argument("command", choices=COMMANDS)
    for name, (_, help_) in FLAGS.items():
        p.add_argument(f"--{name}", default=None, help=help_)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.add_argument("--format", choices=("csv", "json", "binary"), default="csv",
                   help="output format (binary only for gen-data)")
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    return p


def read_config(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.replace("_", "-")
            if key not in FLAGS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[args.command])
    raw = read_config(args.config) if args.config else {}
    raw.update({k: v for k, v in ((n, getattr(args, n.replace("-", "_"))) for n in FLAGS) if v is not None})
    for key, value in raw.items():
        settings[key] = FLAGS[key][0](value)
    return settings


def make_config(command: str, s: dict) -> ex.ExperimentConfig:
    kw = {"command": command}
    simple = {"length": "length", "noise": "noise", "reps": "reps", "seed": "seed",
              "bandwidth": "bandwidth", "bandwidth-scale": "bandwidth_scale", "lambda": "lam",
              "mesa-lambda": "mesa_lam", "kernel": "kernel", "solver": "solver",
              "cg-iters": "cg_iters", "cg-tol": "cg_tol", "block-rows": "block_rows",
              "block-cols": "block_cols", "n-eval": "n_eval", "seeds": "seeds", "threads": "threads"}
    for k, field in simple.items():
        if k in s:
            kw[field] = s[k]
    if command == "ratecheck" and "lam" in kw:
        kw["ll_ridge"] = kw.pop("lam")
    if "segment" in s:
        kw["segments"] = tuple(s["segment"])
    if "dim" in s:
        kw["dims"] = tuple(s["dim"])
    if "models" in s:
        kw["models"] = tuple(s["models"])
    if "sizes" in s:
        kw["sizes"] = tuple(s["sizes"])
    if "bandwidths" in s:
        kw["bandwidths"] = tuple(s["bandwidths"])
    if "blocks" in s:
        kw["blocks"] = tuple(None if b == 0 else b for b in s["blocks"])
    return ex.ExperimentConfig(**kw)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render(rows: Iterable[dict], fmt: str) -> str:
    rows = list(rows)
    cols = list(rows[0]) if rows else []
    if fmt == "json":
        def plain(v):
            return v.item() if isinstance(v, np.generic) else v
        return json.dumps({c: [plain(r[c]) for r in rows] for c in cols}) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


def emit(text, out: str) -> None:
    if out == "-":
        if isinstance(text, bytes):
            sys.stdout.buffer.write(text)
        else:
            sys.stdout.write(text)
        return
    mode = "wb" if isinstance(text, bytes) else "w"
    with open(out, mode) as fh:
        fh.write(text)


def _gen_data(cfg: ex.ExperimentConfig, fmt: str):
    task = PiecewiseLinearTask(L=cfg.length, S=cfg.segments[0], d=cfg.dims[0], noise=cfg.noise,
                               seed=cfg.seed)
    samples = [gen_sequence(task, r) for r in range(cfg.reps)]
    if fmt == "binary":
        buf = io.BytesIO()
        write_binary(samples, buf)
        return buf.getvalue()
    buf = io.StringIO()
    write_csv(samples, buf)
    if fmt == "csv":
        return buf.getvalue()
    buf.seek(0)
    rows = list(csv.DictReader(buf))
    return json.dumps({c: [float(r[c]) if c not in ("sample", "position", "segment") else int(r[c])
                           for r in rows] for c in rows[0]}) + "\n"


def note(msg: str) -> None:
    print(msg, file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        s = resolve(args)
        cfg = make_config(args.command, s)
    except (ValueError, OSError) as e:
        note(f"error: {e}")
        return 2
    if args.format == "binary" and args.command != "gen-data":
        note("error: --format binary is only available for gen-data")
        return 2

    try:
        return _dispatch(args, cfg)
    except ValueError as e:
        note(f"error: {e}")
        return 2


def _dispatch(args, cfg: ex.ExperimentConfig) -> int:
    status = 0
    if args.command == "gen-data":
        emit(_gen_data(cfg, args.format), args.out)
        return 0
    if args.command == "ttr":
        rows = []
        for d in cfg.dims:
            for S in cfg.segments:
                rows.extend(ex.run_ttr(cfg, d, S).rows())
    elif args.command == "ratio":
        rows = ex.run_ratio(cfg)
    elif args.command == "ratecheck":
        rows, slopes, levels = ex.run_ratecheck(cfg)
        verdicts = ex.rate_verdicts(slopes, levels)
        note("slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in slopes.items()))
        note("checks: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in verdicts.items()))
    elif args.command == "equiv":
        rows, ok = ex.run_equiv(cfg)
        worst = max(r["max_abs_dev"] for r in rows)
        note(f"equiv: max |blockwise - naive| = {worst:.3e} ({'ok' if ok else 'FAIL'})")
        status = 0 if ok else 1
    elif args.command == "gradcheck":
        rows, ok = ex.run_gradcheck(cfg)
        note(f"gradcheck: {'ok' if ok else 'FAIL'}")
        status = 0 if ok else 1
    else:
        rows, slopes = ex.run_benchmem(cfg)
        ok = True
        for (path, d), slope in slopes.items():
            lo, hi = (1.7, 2.3) if path == "naive" else (0.7, 1.3)
            good = lo <= slope <= hi
            ok &= good
            note(f"bench-mem: {path} d={d} slope={slope:.3f} ({'ok' if good else 'FAIL'})")
        status = 0 if ok else 1
    emit(render(rows, args.format), args.out)
    return status


if __name__ == "__main__":
    sys.exit(main())
