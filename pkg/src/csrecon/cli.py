"""Command-line interface: single-image reconstruction, benchmark sweeps, gradient traces."""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidSizeError
from .gradient import GradientSettings, reconstruct_gradient, write_trace
from .pipeline import (Algorithm, ReconConfig, load_grayscale, make_mask, partition_blocks,
                       reconstruct_image, save_image)
from .transforms import build_basis

log = logging.getLogger("csrecon")

CSV_COLUMNS = ["theta", "algorithm", "seed", "psnr_dB", "blocks_failed", "wall_time_s", "config_fingerprint"]
_SECTION = "benchmark"


class UsageError(ValueError):
    """Bad flag or configuration value; exit status 2."""


@dataclass(frozen=True)
class BenchmarkConfig:
    input: str = "data/coffee_200.bmp"
    thetas: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    algorithms: tuple = ("BP", "OMP", "TV", "GRADIENT")
    seeds: tuple = (1, 2, 3)
    output_dir: str = "results"
    recon: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        if not self.thetas or any(not 0 < t <= 1 for t in self.thetas):
            raise UsageError("theta must be in (0,1]")
        if not self.algorithms:
            raise UsageError("at least one algorithm is required")
        for a in self.algorithms:
            Algorithm.parse(a)
        if not self.seeds:
            raise UsageError("at least one seed is required")

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("recon")
        d.update(self.recon.as_dict())
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_LIST_KEYS = {"thetas": float, "algorithms": str, "seeds": int}


def _convert(key, raw):
    raw = raw.strip()
    if key in _LIST_KEYS:
        kind = _LIST_KEYS[key]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if kind is str:
            return tuple(Algorithm.parse(s).value for s in items)
        return tuple(kind(s) for s in items)
    if key in ("input", "output_dir"):
        return raw
    default = getattr(ReconConfig, key)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return type(default)(raw)


def parse_config(text: str, base: BenchmarkConfig | None = None) -> BenchmarkConfig:
    """Parse flat ``key = value`` lines; lists are comma separated."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config: {exc}") from None
    base = base or BenchmarkConfig()
    top = {f.name for f in fields(BenchmarkConfig)} - {"recon"}
    recon_keys = {f.name for f in fields(ReconConfig)}
    top_vals, recon_vals = {}, {}
    for key, raw in parser[_SECTION].items():
        if key not in top and key not in recon_keys:
            raise UsageError(f"unknown config key {key!r}")
        try:
            value = _convert(key, raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        (top_vals if key in top else recon_vals)[key] = value
    try:
        recon = replace(base.recon, **recon_vals)
        return replace(base, recon=recon, **top_vals)
    except (InvalidSizeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def load_config(path) -> BenchmarkConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def format_config(config: BenchmarkConfig) -> str:
    lines = []
    for key, value in config.as_dict().items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _fmt_float(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def report_row(report, theta: float) -> dict:
    return {
        "theta": repr(float(theta)),
        "algorithm": report.algorithm.value,
        "seed": report.seed,
        "psnr_dB": _fmt_float(report.psnr_db),
        "blocks_failed": report.blocks_failed,
        "wall_time_s": f"{report.wall_time_s:.3f}",
        "config_fingerprint": report.config_fingerprint,
    }


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def render_table(rows, thetas, algorithms) -> str:
    """Rows are theta values, columns algorithms, cells mean PSNR over seeds."""
    width = 10
    header = "theta".ljust(7) + "".join(a.rjust(width) for a in algorithms)
    lines = [header, "-" * len(header)]
    for theta in sorted(thetas):
        cells = []
        for a in algorithms:
            vals = [float(r["psnr_dB"]) for r in rows
                    if float(r["theta"]) == theta and r["algorithm"] == a]
            cells.append(("%.2f" % np.mean(vals)).rjust(width) if vals else "-".rjust(width))
        lines.append(f"{theta:<7g}" + "".join(cells))
    return "\n".join(lines) + "\n"


def _theta(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid theta {text!r}") from None
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("theta must be in (0,1]")
    return value


def _algorithm(text):
    try:
        return Algorithm.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _config_from_args(args) -> BenchmarkConfig:
    return load_config(args.config) if getattr(args, "config", None) else BenchmarkConfig()


def cmd_reconstruct(args) -> int:
    config = _config_from_args(args)
    image = load_grayscale(args.input)
    mask = make_mask(image.height, image.width, args.theta, args.seed)
    recon, report = reconstruct_image(image, mask, args.algo, config.recon, fingerprint=config.fingerprint())
    out = Path(args.out)
    save_image(recon, out, format=image.format)
    report_path = Path(args.report) if args.report else out.with_suffix(".csv")
    write_rows(report_path, [report_row(report, args.theta)])
    print(f"PSNR {report.algorithm.value} theta={args.theta:g} seed={args.seed}: "
          f"{_fmt_float(report.psnr_db) if math.isinf(report.psnr_db) else '%.2f' % report.psnr_db} dB")
    if report.blocks_failed:
        print(f"warning: {report.blocks_failed} block(s) failed and were mean-filled", file=sys.stderr)
    return 0


def run_benchmark(config: BenchmarkConfig, save_images: bool = False, workers: int | None = None):
    """Run every (theta, algorithm, seed) cell; returns the CSV rows."""
    image = load_grayscale(config.input)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = config.fingerprint()
    rows = []
    for theta in config.thetas:
        for alg in config.algorithms:
            for seed in config.seeds:
                mask = make_mask(image.height, image.width, theta, seed)
                recon, report = reconstruct_image(image, mask, alg, config.recon, workers, fp)
                rows.append(report_row(report, theta))
                log.info("theta=%g %s seed=%d psnr=%.2f dB failed=%d %.1fs", theta, report.algorithm.value,
                         seed, report.psnr_db, report.blocks_failed, report.wall_time_s)
                if save_images:
                    suffix = Path(config.input).suffix or ".bmp"
                    save_image(recon, out_dir / f"recon_{alg}_{theta:g}_{seed}{suffix}", format=image.format)
    return rows


def cmd_benchmark(args) -> int:
    config = _config_from_args(args)
    overrides = {}
    if args.input:
        overrides["input"] = args.input
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.thetas:
        overrides["thetas"] = tuple(args.thetas)
    if args.algos:
        overrides["algorithms"] = tuple(a.value for a in args.algos)
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    config = replace(config, **overrides)
    rows = run_benchmark(config, args.save_images)
    out_dir = Path(config.output_dir)
    write_rows(out_dir / "benchmark.csv", rows)
    table = render_table(rows, config.thetas, [Algorithm.parse(a).value for a in config.algorithms])
    (out_dir / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_trace(args) -> int:
    if args.algo is not Algorithm.GRADIENT:
        raise UsageError("trace is only available for --algo gradient")
    config = _config_from_args(args).recon
    image = load_grayscale(args.input)
    mask = make_mask(image.height, image.width, args.theta, args.seed)
    blocks = partition_blocks(image.pixels, config.block_size)
    if not 0 <= args.block < len(blocks):
        raise UsageError(f"block index must be in [0, {len(blocks) - 1}]")
    block = blocks[args.block].data
    avail = partition_blocks(mask.available, config.block_size)[args.block].data.ravel()
    max_it = args.max_iterations if args.max_iterations is not None else config.gradient_max_iterations
    settings = GradientSettings(config.gradient_step_reduction, math.radians(config.gradient_angle_threshold_deg),
                                config.gradient_target_db, max_it)
    result = reconstruct_gradient(block.ravel()[avail], avail, build_basis("dct", block.shape), settings)
    write_trace(result.trace, args.out)
    last = result.trace[-1].error_db if result.trace else float("nan")
    print(f"{len(result.trace)} iterations, {result.reductions} step reductions, final error {last:.2f} dB, "
          f"{'converged' if result.converged else 'not converged'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csrecon", description="Compressive-sensing image reconstruction.")
    p.add_argument("--print-default-config", action="store_true", help="print all default settings and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("reconstruct", help="reconstruct one image from a random subset of pixels")
    r.add_argument("--input", required=True)
    r.add_argument("--theta", type=_theta, required=True, help="fraction of available pixels, in (0,1]")
    r.add_argument("--algo", type=_algorithm, required=True, help="BP, OMP, TV or GRADIENT")
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--out", required=True, help="reconstructed image path")
    r.add_argument("--report", help="report CSV path (default: --out with .csv suffix)")
    r.add_argument("--config")
    r.set_defaults(func=cmd_reconstruct)

    b = sub.add_parser("benchmark", help="PSNR sweep over theta, algorithms and seeds")
    b.add_argument("--config")
    b.add_argument("--input")
    b.add_argument("--output-dir")
    b.add_argument("--thetas", type=_theta, nargs="+")
    b.add_argument("--algos", type=_algorithm, nargs="+")
    b.add_argument("--seeds", type=int, nargs="+")
    b.add_argument("--save-images", action="store_true")
    b.set_defaults(func=cmd_benchmark)

    t = sub.add_parser("trace", help="write the per-iteration gradient-solver trace for one block")
    t.add_argument("--input", required=True)
    t.add_argument("--algo", type=_algorithm, required=True)
    t.add_argument("--theta", type=_theta, required=True)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--block", type=int, default=0)
    t.add_argument("--max-iterations", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.print_default_config:
        print(format_config(BenchmarkConfig()), end="")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("csrecon: error: a command is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"csrecon: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"csrecon: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
