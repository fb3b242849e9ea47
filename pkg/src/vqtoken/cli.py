"""Command-line front end.

Subcommands: synth, compress, bench, tokdense, gradcheck.  Exit codes:
0 success, 1 check or benchmark failure, 2 usage error, 3 data/format error.
Settings resolve as command-line flags > ``--config`` JSON > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import harness
from .baselines import REDUCERS, ReducerSpec, reduce_grid
from .metrics import tok_dense
from .quantizer import QuantizerConfig, QuantizerError
from .tensor_ops import ContractError
from .token_grid import (
    MOTIONS,
    GridFormatError,
    read_grid,
    write_compressed,
    write_grid,
)
from .vq_core import VARIANTS, ParamsFormatError, VQAttnParams, compress_clip, load_params

log = logging.getLogger("vqtoken")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
CSV_HEADER = ["method", "budget", "avg_tokens", "accuracy", "tokdense", "module_flops", "llm_flops", "wall_ms"]
BENCH_METHODS = ("vq", "prune", "tome", "vidtome", "interp")

DEFAULTS: Dict[str, Dict[str, object]] = {
    "synth": {
        "clips": 200, "frames": 8, "grid": "6x6", "dim": 32, "seed": 0, "out": None,
        "noise": 0.15, "min_objects": 1, "max_objects": 3,
    },
    "compress": {
        "input": None, "out": None, "method": "vq", "mode": "fixed", "k": 32, "tau": 0.92, "kmin": 4,
        "kmax": 256, "params": None, "variant": "cluster-positional", "seed": 0, "budget": None,
    },
    "bench": {
        "data": None, "methods": ",".join(BENCH_METHODS), "budgets": "12,32,64", "adaptive": False,
        "ablation": False, "reference": False, "seed": 0, "report": "bench.jsonl", "figures": None,
        "timing": False, "epochs": 300, "lr": 0.003, "check": False, "clips": 200,
    },
    "tokdense": {"accuracy": None, "tokens": None},
    "gradcheck": {"seed": 0, "seeds": 1, "variant": "cluster-positional", "tol": 1e-5, "negative_control": False},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _grid_dims(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid must look like HxW, got {text!r}") from None
    return h, w


def _int_list(text: str, flag: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} must be a comma-separated list of integers") from None


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.4f}"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(o: dict) -> int:
    if o["out"] is None:
        raise UsageError("synth needs --out DIR")
    h, w = _grid_dims(o["grid"])
    for name, v in (("clips", o["clips"]), ("frames", o["frames"]), ("grid height", h), ("grid width", w),
                    ("dim", o["dim"])):
        if v < 1:
            raise UsageError(f"{name} must be >= 1, got {v}")
    try:
        cfg = harness.DatasetConfig(
            num_clips=o["clips"], frames=o["frames"], height=h, width=w, dim=o["dim"],
            min_objects=o["min_objects"], max_objects=o["max_objects"], noise_std=o["noise"], seed=o["seed"],
        )
        ds = harness.build_dataset(cfg)
    except (ContractError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for cid, grid, label in zip(ds.clip_ids, ds.grids, ds.labels):
        fname = f"{cid}.vqtk"
        write_grid(grid, out / fname)
        manifest.append({"clipId": cid, "file": fname, "classId": int(label)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    print(f"wrote {len(manifest)} clips to {out}; class counts " + " ".join(
        f"{MOTIONS[c]}={int(n)}" for c, n in enumerate(counts)))
    return EXIT_OK


def load_clip_dir(path):
    """Clips and labels from a ``synth`` output directory (without a split)."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise UsageError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
        entries = [(m["clipId"], m["file"], int(m["classId"])) for m in manifest]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {mpath}: {exc}") from exc
    grids = [read_grid(root / f) for _, f, _ in entries]
    return [e[0] for e in entries], grids, [e[2] for e in entries]


# ---------------------------------------------------------------------------
# compress


def cmd_compress(o: dict) -> int:
    if o["input"] is None or o["out"] is None:
        raise UsageError("compress needs --input and --out")
    src = Path(o["input"])
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    grid = read_grid(src)
    method = o["method"]
    if method != "vq":
        if method not in REDUCERS:
            raise UsageError(f"unknown method {method!r}; valid: vq, {', '.join(REDUCERS)}")
        try:
            seq = reduce_grid(grid, ReducerSpec(method, o["budget"]))
        except ContractError as exc:
            raise UsageError(str(exc)) from exc
        payload = seq.to_compressed(grid)
        write_compressed(payload.tokens, payload.index_map, o["out"])
        _print_count(seq.m, grid.n_tokens)
        return EXIT_OK
    if o["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {o['variant']!r}; valid: {', '.join(VARIANTS)}")
    try:
        if o["mode"] == "fixed":
            if not 1 <= o["k"] <= grid.n_tokens:
                raise UsageError(f"--k must lie in [1, N={grid.n_tokens}], got {o['k']}")
            qcfg = QuantizerConfig(mode="fixed", k=o["k"], seed=o["seed"])
        else:
            qcfg = QuantizerConfig(mode="adaptive", tau=o["tau"], k_min=o["kmin"], k_max=o["kmax"], seed=o["seed"])
            if o["kmin"] > grid.n_tokens:
                raise UsageError(f"--kmin exceeds N={grid.n_tokens}")
    except QuantizerError as exc:
        raise UsageError(str(exc)) from exc
    if o["params"] is not None:
        ppath = Path(o["params"])
        if not ppath.is_file():
            raise UsageError(f"params file not found: {ppath}")
        params = load_params(ppath)
    else:
        k = o["k"] if o["mode"] == "fixed" else None
        if o["variant"] == "literal-flat" and k is None:
            raise UsageError("literal-flat needs --mode fixed")
        shape = (grid.frames, grid.height, grid.width, k) if o["variant"] == "literal-flat" else None
        params = VQAttnParams.init(grid.dim, variant=o["variant"], seed=o["seed"], grid_shape=shape)
    if params.variant != o["variant"]:
        raise UsageError(f"params were saved for {params.variant!r}, not {o['variant']!r}")
    if params.dim != grid.dim:
        raise DataError(f"params dim {params.dim} does not match clip dim {grid.dim}")
    try:
        tokens, imap, _ = compress_clip(grid, qcfg, params)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    write_compressed(tokens.tokens, imap.ids, o["out"])
    _print_count(tokens.k, grid.n_tokens)
    return EXIT_OK


def _print_count(k: int, n: int) -> None:
    print(f"tokens: {k}")
    print(f"percent: {100.0 * k / n:.4f}")


# ---------------------------------------------------------------------------
# bench


def summary_rows(runs: Sequence[harness.BenchmarkRun]) -> List[List[str]]:
    rows = []
    for r in runs:
        budget = "adaptive" if r.budget is None else str(r.budget)
        rows.append([
            r.method, budget, _fmt(r.avg_tokens), _fmt(r.accuracy), _fmt(r.tok_dense),
            str(r.report.moduleFlops), str(r.report.llmFlops), _fmt(r.report.wallClockMs),
        ])
    return rows


def summary_csv(runs) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(summary_rows(runs))
    return buf.getvalue()


def summary_table(runs) -> str:
    rows = [CSV_HEADER] + summary_rows(runs)
    widths = [max(len(row[j]) for row in rows) for j in range(len(CSV_HEADER))]
    lines = []
    for i, row in enumerate(rows):
        cells = [c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def ordering_failures(runs: Sequence[harness.BenchmarkRun]) -> List[str]:
    """Desk-scale orderings that the VQ pipeline is expected to satisfy."""
    out = []
    fixed = {(r.method, r.budget): r for r in runs if r.subtask == "fixed"}
    for (method, b), r in fixed.items():
        vq = fixed.get(("vq-fixed", b))
        if vq is not None and method in ("prune", "tome", "vidtome") and vq.accuracy < r.accuracy:
            out.append(f"vq-fixed@{b} ({vq.accuracy:.2f}) < {method}@{b} ({r.accuracy:.2f})")
    adaptive = {r.method: r for r in runs if r.subtask == "adaptive"}
    if "vq-adaptive" in adaptive:
        a = adaptive["vq-adaptive"]
        if a.avg_tokens >= 32:
            out.append(f"vq-adaptive avg tokens {a.avg_tokens:.2f} >= 32")
        if "interp" in adaptive and not a.tok_dense > adaptive["interp"].tok_dense:
            out.append("vq-adaptive TokDense does not exceed interp")
    abl = {r.method.split(":", 1)[1]: r for r in runs if r.subtask == "ablation"}
    if "full" in abl:
        for name, r in abl.items():
            if name != "full" and abl["full"].accuracy < r.accuracy:
                out.append(f"ablation full ({abl['full'].accuracy:.2f}) < {name} ({r.accuracy:.2f})")
    return out


def cmd_bench(o: dict, threads: int) -> int:
    methods = [m.strip() for m in str(o["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in BENCH_METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {', '.join(bad) or '(none)'}; valid: {', '.join(BENCH_METHODS)}")
    budgets = _int_list(o["budgets"], "--budgets")
    if any(b < 1 for b in budgets):
        raise UsageError("budgets must be >= 1")
    if o["epochs"] < 0 or not o["lr"] > 0:
        raise UsageError("--epochs must be >= 0 and --lr > 0")
    if o["data"] is not None:
        ids, grids, labels = load_clip_dir(o["data"])
        try:
            ds = harness.dataset_from_clips(grids, labels, ids, seed=o["seed"], source=str(Path(o["data"]).name))
        except ContractError as exc:
            raise DataError(str(exc)) from exc
    else:
        ds = harness.build_dataset(harness.DatasetConfig(num_clips=o["clips"], seed=o["seed"]))
    N = ds.grids[0].n_tokens
    too_big = [b for b in budgets if b > N]
    if too_big:
        raise UsageError(f"budgets {too_big} exceed N={N}")
    train = harness.TrainConfig(epochs=o["epochs"], lr=o["lr"])
    fixed_methods = ["vq-fixed" if m == "vq" else m for m in methods]

    report = Path(o["report"])
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text("")
    runs: List[harness.BenchmarkRun] = []

    def record(new_runs):
        with open(report, "a", encoding="utf-8") as fh:
            for r in new_runs:
                fh.write(json.dumps(r.ledger_record()) + "\n")
        runs.extend(new_runs)

    record(harness.run_fixed_length(ds, budgets, fixed_methods, seed=o["seed"], train=train,
                                    timing=o["timing"], threads=threads))
    if o["adaptive"]:
        adaptive = [m for m in ("vq-adaptive", "interp") if m.replace("-adaptive", "") in methods]
        record(harness.run_adaptive_length(ds, adaptive, seed=o["seed"], train=train, timing=o["timing"],
                                           threads=threads))
    if o["ablation"]:
        record(harness.run_ablation(ds, seed=o["seed"], train=train, threads=threads))
    if o["reference"]:
        ref = harness.run_reference(ds, train)
        record([ref])
        over = harness.reference_ceiling_violations(runs, ref)
        if over:
            log.warning("%d run(s) beat the full-token probe (%.2f%%) by more than 2 points: %s", len(over),
                        ref.accuracy, ", ".join(f"{r.method}@{r.budget or 'adaptive'}" for r in over))

    stem = report.with_suffix("")
    csv_text = summary_csv(runs)
    Path(f"{stem}.csv").write_text(csv_text)
    table = summary_table(runs)
    Path(f"{stem}.txt").write_text(table)
    sys.stdout.write(table)
    fig_dir = Path(o["figures"]) if o["figures"] else Path(f"{stem}_figures")
    from .plotting import render_report

    for p in render_report(runs, fig_dir):
        log.info("figure: %s", p)
    if o["check"]:
        failures = ordering_failures(runs)
        for f in failures:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        if failures:
            return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# tokdense / gradcheck


def cmd_tokdense(o: dict) -> int:
    if o["accuracy"] is None or o["tokens"] is None:
        raise UsageError("tokdense needs --accuracy and --tokens")
    if not o["tokens"] > 0:
        raise UsageError(f"--tokens must be positive, got {o['tokens']}")
    print(f"{tok_dense(o['accuracy'], o['tokens']):.4f}")
    return EXIT_OK


def cmd_gradcheck(o: dict) -> int:
    if o["variant"] not in VARIANTS:
        raise UsageError(f"unknown variant {o['variant']!r}; valid: {', '.join(VARIANTS)}")
    if o["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    corrupt = "wq" if o["negative_control"] else None
    worst_err, worst = -1.0, None
    for s in range(o["seed"], o["seed"] + o["seeds"]):
        rep = harness.vq_gradcheck(s, o["variant"], corrupt=corrupt)
        print(f"# seed {s} variant {o['variant']}")
        print(rep.format())
        if rep.max_rel_error > worst_err:
            worst_err, worst = rep.max_rel_error, (s, rep.worst[0])
    if worst_err <= o["tol"]:
        print(f"PASS max rel error {worst_err:.3e} <= {o['tol']:.0e}")
        return EXIT_OK
    print(f"FAIL max rel error {worst_err:.3e} > {o['tol']:.0e} (worst: {worst[1]}, seed {worst[0]})")
    return EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON file of option defaults (flags override it)")
    p.add_argument("-v", "--verbose", action="store_true", help="print the effective configuration")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqtoken", description="Extreme token reduction for video token grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    def d(cmd, key):
        return f"(default: {DEFAULTS[cmd][key]})"

    p = sub.add_parser("synth", help="write synthetic clips (VQTK) plus a labels manifest")
    p.add_argument("--clips", type=int, help=f"number of clips {d('synth', 'clips')}")
    p.add_argument("--frames", type=int, help=f"frames T {d('synth', 'frames')}")
    p.add_argument("--grid", help=f"HxW cells per frame {d('synth', 'grid')}")
    p.add_argument("--dim", type=int, help=f"embedding dim D {d('synth', 'dim')}")
    p.add_argument("--noise", type=float, help=f"noise norm per token {d('synth', 'noise')}")
    p.add_argument("--min-objects", dest="min_objects", type=int, help=d("synth", "min_objects"))
    p.add_argument("--max-objects", dest="max_objects", type=int, help=d("synth", "max_objects"))
    p.add_argument("--seed", type=int, help=d("synth", "seed"))
    p.add_argument("--out", help="output directory; gets clipNNNN.vqtk files and manifest.json "
                   "([{clipId, file, classId}])")
    _common(p)

    p = sub.add_parser("compress", help="compress one VQTK clip into a VQTC file")
    p.add_argument("--input", help="VQTK clip file")
    p.add_argument("--out", help="VQTC output: K x D tokens then the T x H x W id map (sentinel id = K)")
    p.add_argument("--method", help=f"vq or a baseline ({', '.join(REDUCERS)}) {d('compress', 'method')}")
    p.add_argument("--budget", type=int, help="token budget for baseline methods")
    p.add_argument("--mode", choices=["fixed", "adaptive"], help=d("compress", "mode"))
    p.add_argument("--k", type=int, help=f"clusters in fixed mode {d('compress', 'k')}")
    p.add_argument("--tau", type=float, help=f"adaptive cohesion threshold {d('compress', 'tau')}")
    p.add_argument("--kmin", type=int, help=d("compress", "kmin"))
    p.add_argument("--kmax", type=int, help=d("compress", "kmax"))
    p.add_argument("--params", help="VQTP checkpoint (default: fresh params from --seed)")
    p.add_argument("--variant", help=f"encoder variant: {', '.join(VARIANTS)} {d('compress', 'variant')}")
    p.add_argument("--seed", type=int, help=d("compress", "seed"))
    _common(p)

    p = sub.add_parser("bench", help="run the fixed/adaptive/ablation benchmark")
    p.add_argument("--data", help="directory written by synth (default: synthesize in memory)")
    p.add_argument("--clips", type=int, help=f"clips when synthesizing in memory {d('bench', 'clips')}")
    p.add_argument("--methods", help=f"comma list from {', '.join(BENCH_METHODS)} {d('bench', 'methods')}")
    p.add_argument("--budgets", help=f"comma list of token budgets {d('bench', 'budgets')}")
    p.add_argument("--adaptive", action="store_const", const=True, help="also run the adaptive-length subtask")
    p.add_argument("--ablation", action="store_const", const=True, help="also run the VQ ablation rows")
    p.add_argument("--reference", action="store_const", const=True, help="also run the full-token probe")
    p.add_argument("--timing", action="store_const", const=True,
                   help="measure wall clock per method (makes outputs non-reproducible)")
    p.add_argument("--check", action="store_const", const=True,
                   help="exit 1 if the expected orderings between methods do not hold")
    p.add_argument("--epochs", type=int, help=f"VQ training epochs {d('bench', 'epochs')}")
    p.add_argument("--lr", type=float, help=f"VQ training learning rate {d('bench', 'lr')}")
    p.add_argument("--seed", type=int, help=d("bench", "seed"))
    p.add_argument("--report", help="JSON-lines run ledger; the CSV summary (.csv), text table (.txt) and "
                   f"figure directory (_figures/) are placed next to it {d('bench', 'report')}")
    p.add_argument("--figures", help="directory for PNG figures")
    _common(p)

    p = sub.add_parser("tokdense", help="accuracy per retained token")
    p.add_argument("--accuracy", type=float, help="accuracy in percent")
    p.add_argument("--tokens", type=float, help="retained token count (> 0)")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the VQ-Attention block")
    p.add_argument("--seed", type=int, help=f"first seed {d('gradcheck', 'seed')}")
    p.add_argument("--seeds", type=int, help=f"number of seeds {d('gradcheck', 'seeds')}")
    p.add_argument("--variant", help=f"{', '.join(VARIANTS)} {d('gradcheck', 'variant')}")
    p.add_argument("--tol", type=float, help=f"max relative error {d('gradcheck', 'tol')}")
    p.add_argument("--negative-control", dest="negative_control", action="store_const", const=True,
                   help="corrupt the W_Q gradient on purpose; the check must then fail")
    _common(p)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, the --config file and explicit flags (in rising priority)."""
    opts = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise DataError("config file must hold a JSON object")
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        opts.update(cfg)
    for key in opts:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    try:
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        opts = resolve_options(args)
        if args.verbose:
            print("# effective config: " + json.dumps({"command": args.command, **opts}, sort_keys=True),
                  file=sys.stderr)
        if args.command == "synth":
            return cmd_synth(opts)
        if args.command == "compress":
            return cmd_compress(opts)
        if args.command == "bench":
            return cmd_bench(opts, threads)
        if args.command == "tokdense":
            return cmd_tokdense(opts)
        return cmd_gradcheck(opts)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GridFormatError, ParamsFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
