"""Command line entry point: ``tides {fading-flash,droprate,verify,bench}``.

Exit codes: 0 success, 1 validation error, 2 property failure, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Any, Callable


from . import autodiff as ad
from . import bench as bench_mod
from . import drop_harness as dh
from . import fading_flash as ff
from .config import ConfigError, config_snapshot, load_config, parse_config, serialize_config, set_value
from .manifest import RunManifest, load_manifest, write_csv, write_manifest
from .svg import emit_svg
from .verify import TOL as VERIFY_TOL
from .verify import run_properties

EXIT_OK, EXIT_VALIDATION, EXIT_PROPERTY, EXIT_RUNTIME = 0, 1, 2, 3
FAULTS = ("scan-order",)


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _say(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# subcommands; each returns (outputs, criteria, tolerances, metrics)

def cmd_fading_flash(cfg: dict, seed: int, out: Path):
    reports, decays, losses = {}, {}, {}
    for kind in ff.KINDS:
        t0 = time.perf_counter()
        res = ff.train_toy(kind, seed, cfg["steps"], cfg["batch"], cfg["lr"], cfg["states"], cfg["tides_hidden"], cfg["bc_rank"])
        reports[kind] = ff.evaluate_grid(res.model.predict, seed)
        decays[kind] = ff.decay_table(res.model.predict)
        losses[kind] = {"first_loss": float(res.losses[0]), "final_loss": float(res.losses[-100:].mean())}
        _say(f"{kind}: final loss {res.losses[-1]:.3g}, mean relative error {reports[kind].mean_rel_error:.2f}% ({time.perf_counter() - t0:.0f}s)")
    decays["generator"] = ff.decay_table(ff.analytic_predictor)
    grid = ff.DELTA_GRID
    write_csv(
        out / "fading_flash_report.csv",
        ["kind", "seed", "delta", "mse", "variance", "rel_error_pct"],
        [
            (kind, seed, d, float(rep.mse[i]), float(rep.variance[i]), float(rep.rel_error[i]))
            for kind, rep in reports.items()
            for i, d in enumerate(grid)
        ],
    )
    write_csv(
        out / "decay_probe.csv",
        ["kind", "zone_rate", "delta", "lambda_hat"],
        [(kind, float(ff.RATES[z]), d, v) for kind, tab in decays.items() for (z, d), v in sorted(tab.items())],
    )
    emit_svg(
        {kind: (grid, rep.rel_error) for kind, rep in reports.items()},
        "test delta", "relative error (%)", out / "fading_flash_error.svg", "Relative error vs delta", log_x=True,
    )
    emit_svg(
        {
            f"{kind} rate {ff.RATES[z]:g}": (grid, [decays[kind][(z, d)] for d in grid])
            for kind in (*ff.KINDS, "generator")
            for z in range(3)
        },
        "test delta", "effective decay", out / "fading_flash_decay.svg", "Effective decay vs delta", log_x=True,
    )
    criteria = ff.pattern_checks(reports, decays["generator"])
    tolerances = {"mamba_blowup": ff.MAMBA_BLOWUP, "tides_flat": ff.TIDES_FLAT, "probe_tol": ff.PROBE_TOL}
    metrics = {
        kind: {"mean_rel_error": rep.mean_rel_error, **losses[kind], **{str(d): float(e) for d, e in zip(grid, rep.rel_error)}}
        for kind, rep in reports.items()
    }
    outputs = ["fading_flash_report.csv", "decay_probe.csv", "fading_flash_error.svg", "fading_flash_decay.svg"]
    return outputs, criteria, tolerances, metrics


def _droprate_data(cfg: dict, seed: int):
    if cfg["dataset"] == "synthetic":
        rng = ad.rng_stream(seed, "droprate", "data")
        return dh.synth_classification(rng, cfg["n_train"], prefix="train"), dh.synth_classification(rng, cfg["n_test"], prefix="test")
    data = dh.ingest_csv(cfg["dataset"])
    return dh.split_dataset(data, cfg["test_fraction"], ad.rng_stream(seed, "droprate", "split"))


def cmd_droprate(cfg: dict, seed: int, out: Path):
    unknown = [s for s in cfg["specs"] if s not in dh.VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {', '.join(unknown)}; expected names from {', '.join(dh.VARIANTS)}")
    try:
        train, test = _droprate_data(cfg, seed)
    except (OSError, dh.IngestError) as exc:
        raise ValidationError(str(exc)) from None
    lengths = {len(s) for s in (*train, *test)}
    if len(lengths) != 1:
        raise ValidationError(f"the sweep needs equal-length series, found lengths {sorted(lengths)}")
    L = lengths.pop()
    for r in (cfg["r_train"], *cfg["r_test"]):
        if L < 4 or dh.kept_count(r, L) < 2:
            raise ValidationError(f"drop rate {r:g} leaves fewer than 2 of {L} steps")
    seeds = [seed + i for i in range(cfg["n_seeds"])]

    def progress(name, s, rows):
        _say(f"{name} seed {s}: " + ", ".join(f"r={r.r_test:g} acc={r.accuracy:.3f}" for r in rows))

    rows = dh.run_sweep(
        train, test, [dh.VARIANTS[s] for s in cfg["specs"]], cfg["r_train"], cfg["r_test"], seeds,
        cfg["epochs"], cfg["batch"], cfg["lr"], cfg["weight_decay"], progress, cfg["workers"],
    )
    write_csv(out / "droprate_table.csv", ["spec", "seed", "r_train", "r_test", "accuracy"],
              [(r.spec, r.seed, r.r_train, r.r_test, r.accuracy) for r in rows])
    summary = dh.summarize(rows)
    write_csv(out / "droprate_summary.csv", ["spec", "r_train", "r_test", "mean_accuracy"],
              [(s, cfg["r_train"], r, acc) for s, by_r in summary.items() for r, acc in sorted(by_r.items())])
    emit_svg({s: (sorted(by_r), [by_r[r] for r in sorted(by_r)]) for s, by_r in summary.items()},
             "r_test", "accuracy (mean over seeds)", out / "droprate.svg", "Accuracy vs test drop rate")
    criteria = dh.pattern_checks(summary, cfg["r_train"])
    tolerances = {"lti_flat": dh.LTI_FLAT, "tides_drop": dh.TIDES_DROP, "gate_drop": dh.GATE_DROP}
    metrics = {s: {str(r): a for r, a in sorted(by_r.items())} for s, by_r in summary.items()}
    return ["droprate_table.csv", "droprate_summary.csv", "droprate.svg"], criteria, tolerances, metrics


def cmd_verify(cfg: dict, seed: int, out: Path):
    results = run_properties(seed)
    for r in results:
        _say(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} [{r.seconds:.2f}s]")
    write_csv(out / "verify_report.csv", ["property", "passed", "detail"], [(r.name, r.passed, r.detail) for r in results])
    criteria = {r.name: r.passed for r in results}
    metrics = {r.name: {"seconds": r.seconds, "detail": r.detail} for r in results}
    return ["verify_report.csv"], criteria, dict(VERIFY_TOL), metrics


def cmd_bench(cfg: dict, seed: int, out: Path):
    rows = bench_mod.run_bench(cfg["lengths"], cfg["batch"], cfg["repeats"], seed)
    for L, ms in rows:
        _say(f"L={L}: {ms:.1f} ms")
    write_csv(out / "bench.csv", ["L", "time_ms"], rows)
    ratios = bench_mod.doubling_ratios(rows)
    lo, hi = bench_mod.DOUBLING_BAND
    criteria = {f"doubling_{a}_{b}": lo <= v <= hi for (a, b), v in ratios.items()}
    metrics = {"params": bench_mod.bench_param_count(), "ratios": {f"{a}->{b}": v for (a, b), v in ratios.items()}}
    return ["bench.csv"], criteria, {"ratio_lo": lo, "ratio_hi": hi}, metrics


COMMANDS: dict[str, Callable[[dict, int, Path], tuple[list[str], dict, dict, Any]]] = {
    "fading-flash": cmd_fading_flash,
    "droprate": cmd_droprate,
    "verify": cmd_verify,
    "bench": cmd_bench,
}
# properties whose failure turns into exit status 2 without --strict
ALWAYS_STRICT = {"verify"}


# --------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed for every random stream (default 0)")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out-dir", default=None, help="directory for outputs (default runs/<command>)")
    common.add_argument("--dry-run", action="store_true", help="print the effective config and exit")
    common.add_argument("--from-manifest", metavar="PATH", help="replay the config and seed recorded in a manifest")
    common.add_argument("--strict", action="store_true", help="exit 2 when an acceptance pattern fails")
    common.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)

    parser = _Parser(prog="tides", description="TIDES selective SSM experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("fading-flash", parents=[common], help="train and evaluate the three toy models")
    dr = sub.add_parser("droprate", parents=[common], help="random-drop sweep over the six variants")
    dr.add_argument("--specs", help="comma-separated variant names")
    dr.add_argument("--dataset", help="'synthetic' or a CSV file")
    sub.add_parser("verify", parents=[common], help="run the invariant suite")
    bn = sub.add_parser("bench", parents=[common], help="forward+backward timing across lengths")
    bn.add_argument("--lengths", help="comma-separated sequence lengths")
    return parser


def _resolve(args) -> tuple[dict, int]:
    if args.from_manifest:
        try:
            manifest = load_manifest(args.from_manifest)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot load manifest: {exc}") from None
        if manifest.command != args.command:
            raise ValidationError(f"manifest records command {manifest.command!r}, not {args.command!r}")
        text = "".join(f"{k} = {v}\n" for k, v in manifest.config.items())
        cfg = parse_config(args.command, text, str(args.from_manifest))
        seed = manifest.seed if args.seed is None else args.seed
    else:
        cfg = load_config(args.command, args.config)
        seed = 0 if args.seed is None else args.seed
    for key in ("specs", "dataset", "lengths"):
        raw = getattr(args, key, None)
        if raw is not None:
            set_value(args.command, cfg, key, raw, f"--{key}: ")
    return cfg, seed


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, seed = _resolve(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.dry_run:
        sys.stdout.write(f"# command: {args.command}\n# seed: {seed}\n" + serialize_config(cfg))
        return EXIT_OK

    out = Path(args.out_dir or Path("runs") / args.command)
    manifest = RunManifest(command=args.command, seed=seed, config=config_snapshot(cfg))
    if args.inject_fault == "scan-order":
        ad.SCAN_FAULT["swap_operands"] = True
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        outputs, criteria, tolerances, metrics = COMMANDS[args.command](cfg, seed, out)
        manifest.outputs, manifest.criteria = outputs, criteria
        manifest.tolerances, manifest.metrics = tolerances, metrics
        failed = [k for k, ok in criteria.items() if not ok]
        if args.command != "verify":  # verify already printed per-property lines
            for k, ok in criteria.items():
                _say(f"{'PASS' if ok else 'FAIL'} {k}")
        manifest.status = "ok"
        if failed and (args.strict or args.command in ALWAYS_STRICT):
            manifest.status = "failed"
            manifest.error = f"failed: {', '.join(failed)}"
            print(f"property failure: {', '.join(failed)}", file=sys.stderr)
            code = EXIT_PROPERTY
    except (ValidationError, ConfigError) as exc:
        manifest.status, manifest.error = "failed", str(exc)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except Exception as exc:
        manifest.status, manifest.error = "failed", f"{type(exc).__name__}: {exc}"
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    finally:
        ad.SCAN_FAULT["swap_operands"] = False
    manifest.wall_time_s = time.perf_counter() - t0
    write_manifest(out, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
