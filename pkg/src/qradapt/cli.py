"""Command-line entry point.

Subcommands:

* ``decompose``   - factor a matrix file (binary container or CSV), write the
  factors, report the leading diagonal and the rank each policy would pick.
* ``rank-report`` - just the policy-vs-rank table, for named policies.
* ``run``         - run every adapter spec in a config file, write CSV/JSONL.
* ``sweep``       - threshold, training-size, or scope/projection sweeps.

Exit codes are a stable scripting contract: 0 success, 1 usage, 2 unreadable
or invalid input, 3 numerical failure (non-convergence, divergence, failed
verification).  Cell failures inside run/sweep are recorded as rows with an
error tag in the JSONL mirror and still exit 3.

``QR_ADAPT_THREADS`` caps the worker processes used for independent cells;
results are merged in canonical order, so the pool size never changes output.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import FULL_FT, QR_LORA, AdapterSpec
from .config import ConfigError, ExperimentConfig, load_config
from .linalg import ConvergenceError, qr_pivoted, reconstruct
from .matio import MatrixFormatError, load_matrix_any, save_matrix
from .rank import RankPolicy, select_rank
from .train import (
    CSV_HEADER,
    MetricsRecord,
    TrainingDiverged,
    default_scope_grid,
    records_to_csv,
    records_to_jsonl,
    run_experiment,
)

_DECOMPOSE_TAUS = (0.5, 0.7, 0.8)
_RATIO_POLICIES = ("energy", "abs", "relmag")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; our contract reserves 2 for input
    # parse failures, so usage problems must exit 1 instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_code_usage(message))

    def exit_code_usage(self, message: str) -> int:
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qradapt", description="Pivoted-QR low-rank adapters: factor, train, sweep.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decompose", help="factor a matrix file and report policy ranks")
    d.add_argument("input", help="matrix file (binary container or CSV)")
    d.add_argument("--out", default=None, help="directory for factor files (default: alongside input)")
    d.add_argument("--verify", action="store_true", help="check the factors reconstruct the input")

    r = sub.add_parser("rank-report", help="selected rank per policy for a matrix file")
    r.add_argument("input", help="matrix file (binary container or CSV)")
    r.add_argument("--policy", action="append", default=None, metavar="KIND:VALUE",
                   help="policy to evaluate (repeatable), e.g. energy:0.5 or fixed:2")

    for name, help_ in (("run", "train every spec in the config"), ("sweep", "sweep one experiment axis")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="experiment config file (YAML, schema 1)")
        s.add_argument("--seed", type=int, default=None, help="override model and training seeds")
        s.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        s.add_argument("--format", choices=("csv", "jsonl", "both"), default="both", help="which result files to write")
        if name == "sweep":
            s.add_argument("--axis", choices=("tau", "size", "scope"), required=True, help="sweep axis")
    return p


# ---- decompose / rank-report --------------------------------------------

def _policy_rank_table(diag: np.ndarray) -> list[str]:
    lines = ["policy ranks (rows: tau, cols: " + ", ".join(_RATIO_POLICIES) + ")"]
    for tau in _DECOMPOSE_TAUS:
        cells = []
        for kind in _RATIO_POLICIES:
            try:
                r = select_rank(diag, RankPolicy(kind=kind, tau=tau))
                cells.append(f"{kind}={r}")
            except ValueError:
                cells.append(f"{kind}=-")
        lines.append(f"  tau={tau:g}: " + "  ".join(cells))
    return lines


def _cmd_decompose(args) -> int:
    w = load_matrix_any(args.input)
    f = qr_pivoted(w)
    src = Path(args.input)
    out_dir = Path(args.out) if args.out else src.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = src.stem
    save_matrix(out_dir / f"{stem}.q.qrla", f.q)
    save_matrix(out_dir / f"{stem}.r.qrla", f.r)
    save_matrix(out_dir / f"{stem}.perm.qrla", f.perm.astype(float).reshape(1, -1))

    diag = np.abs(np.diagonal(f.r))
    head = ", ".join(f"{v:.6g}" for v in diag[:8])
    more = " ..." if diag.size > 8 else ""
    print(f"{src.name}: {w.shape[0]}x{w.shape[1]}, diag(R) head [{head}]{more}")
    for line in _policy_rank_table(diag):
        print(line)
    print(f"factors written to {out_dir}")

    if args.verify:
        back = reconstruct(f)
        tol = 1e-10 * (1.0 + np.abs(w).max())
        err = np.abs(back - w).max()
        ok = err <= tol
        print(f"verify: max reconstruction error {err:.3e} (tolerance {tol:.3e}) -> {'PASS' if ok else 'FAIL'}")
        if not ok:
            return 3
    return 0


def _cmd_rank_report(args) -> int:
    w = load_matrix_any(args.input)
    f = qr_pivoted(w)
    diag = np.abs(np.diagonal(f.r))
    spells = args.policy or ["energy:0.5", "abs:0.5", "relmag:0.5", "fixed:2"]
    policies = [RankPolicy.parse(s) for s in spells]
    print(f"{Path(args.input).name}: {w.shape[0]}x{w.shape[1]}, {diag.size} diagonal entries")
    for pol in policies:
        print(f"  {pol.spell():12s} -> r = {select_rank(diag, pol)}")
    return 0


# ---- run / sweep ---------------------------------------------------------

def _error_record(cfg: ExperimentConfig, spec: AdapterSpec, seed: int, exc: Exception) -> MetricsRecord:
    n_layers = cfg.model.n_layers
    tau = spec.policy.tau if (spec.method == QR_LORA and spec.policy is not None) else None
    return MetricsRecord(
        task=cfg.task.kind, method=spec.method, spec=spec.spell(n_layers), tau=tau,
        scope=spec.scope_label(n_layers), projections=spec.projections_label(),
        trainable_count=None, head_count=None, accuracy=None, f1=None,
        matched=None, mismatched=None, seed=seed, wall_time_s=None,
        error=f"{type(exc).__name__}: {exc}",
    )


def _cell_worker(payload):
    cfg, spec, n_rows, seed = payload
    try:
        return run_experiment(cfg.model, cfg.task, cfg.train, spec, n_train_rows=n_rows, seed=seed)
    except Exception as exc:  # cell failures become rows, not crashes
        return _error_record(cfg, spec, seed if seed is not None else cfg.train.seed, exc)


def _worker_count() -> int:
    raw = os.environ.get("QR_ADAPT_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QR_ADAPT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"QR_ADAPT_THREADS must be >= 1, got {n}")
    return n


def _run_cells(cells) -> list[MetricsRecord]:
    workers = _worker_count()
    if workers == 1 or len(cells) <= 1:
        return [_cell_worker(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(_cell_worker, cells))


def _write_results(records, out_dir: Path, fmt: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt in ("csv", "both"):
        path = out_dir / "results.csv"
        path.write_text(records_to_csv(records))
        print(f"wrote {path} ({len(records)} rows)")
    if fmt in ("jsonl", "both"):
        path = out_dir / "results.jsonl"
        path.write_text(records_to_jsonl(records))
        print(f"wrote {path} ({len(records)} rows)")


def _finish(cfg: ExperimentConfig, records, args) -> int:
    out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
    _write_results(records, out_dir, args.format)
    failed = [r for r in records if r.error is not None]
    for r in failed:
        print(f"cell failed: {r.method} seed={r.seed}: {r.error}", file=sys.stderr)
    return 3 if failed else 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    cells = [(cfg, spec, None, args.seed) for spec in cfg.specs]
    return _finish(cfg, _run_cells(cells), args)


def _first_spec(cfg: ExperimentConfig, where: str, want_qr: bool) -> AdapterSpec:
    for spec in cfg.specs:
        ok = spec.method == QR_LORA if want_qr else spec.method != FULL_FT
        if ok:
            return spec
    need = QR_LORA if want_qr else "adapter-method"
    raise ConfigError(f"{where}: this sweep needs a {need} spec in the config")


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if not cfg.specs:
        raise ConfigError(f"{args.config}: sweep needs at least one spec")

    if args.axis == "tau":
        base = _first_spec(cfg, args.config, want_qr=True)
        taus = cfg.sweep.get("taus", list(_DECOMPOSE_TAUS))
        cells = [
            (cfg, base.with_policy(base.policy.with_tau(float(t))), None, args.seed)
            for t in taus
        ]
    elif args.axis == "size":
        sizes = cfg.sweep.get("sizes")
        if not sizes:
            raise ConfigError(f"{args.config}: size sweep needs sweep.sizes in the config")
        cells = [(cfg, spec, int(size), args.seed) for size in sizes for spec in cfg.specs]
    else:
        base = _first_spec(cfg, args.config, want_qr=False)
        cells = [
            (cfg, replace(base, layer_scope=sc, projection_set=ps), None, args.seed)
            for sc, ps in default_scope_grid(cfg.model.n_layers)
        ]
    return _finish(cfg, _run_cells(cells), args)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "decompose":
            return _cmd_decompose(args)
        if args.command == "rank-report":
            return _cmd_rank_report(args)
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_sweep(args)
    except (ConfigError, MatrixFormatError, OSError) as exc:
        print(f"qradapt: {exc}", file=sys.stderr)
        return 2
    except (ConvergenceError, TrainingDiverged, FloatingPointError) as exc:
        print(f"qradapt: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"qradapt: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
