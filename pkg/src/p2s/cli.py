"""Command-line surface: noise synthesis, training, baselines, metrics, benchmarks.

Exit codes are a stable contract:

    0  success
    1  verification failure (gradcheck) or failed benchmark cells
    2  usage error (bad flag values, malformed config)
    3  missing or unreadable input file
    4  training aborted (non-finite loss); diagnostics are written

Every subcommand writes a ``manifest.json`` recording the resolved
configuration, inputs, outputs, and seed; re-running with the same manifest
inputs reproduces the primary outputs byte for byte.  All randomness flows
from one ``--seed`` through fixed per-purpose sub-streams (see ``rng``).
``P2S_THREADS`` caps benchmark parallelism.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .gradcheck import run_suite
from .imagecore import ImageError, ImageGrid, concentric_phantom, load_image, save_image
from .ista import dct_dictionary, make_problem, random_dictionary, run_ista
from .network import NetConfig
from .noise_metrics import MetricReport, NoiseSpec, evaluate, make_noisy, psnr, ssim
from .rng import derive_seed
from .trainer import TrainConfig, TrainingDiverged, trace_csv, train

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_TRAINING_ABORT = 4


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except Exception:
        pass
    return __version__


def _write_manifest(path: Path, subcommand: str, config: dict, inputs: dict,
                    outputs: dict, seed: int | None, started: str) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": _version_string(),
        "started_at": started,
        "finished_at": _timestamp(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        click.echo(f"error: config file not found: {p}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise click.UsageError(f"malformed TOML config {p}: {exc}")


def _resolve(defaults: dict, file_section: dict, flags: dict) -> dict:
    """Flag beats file beats default; unknown file keys are usage errors."""
    resolved = dict(defaults)
    for key, value in file_section.items():
        if key not in resolved:
            raise click.UsageError(f"unknown config key {key!r}")
        resolved[key] = value
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _load_input_image(path: str) -> ImageGrid:
    p = Path(path)
    if not p.exists():
        click.echo(f"error: input file not found: {p}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    try:
        return load_image(p)
    except ImageError as exc:
        raise click.UsageError(str(exc))


def _resolve_image_ref(ref: str) -> tuple[str, ImageGrid]:
    """A path, or the builtin 'phantom' / 'phantom:N' test image."""
    if ref == "phantom" or ref.startswith("phantom:"):
        size = int(ref.split(":", 1)[1]) if ":" in ref else 128
        return f"phantom{size}", concentric_phantom(size, size)
    return Path(ref).stem, _load_input_image(ref)


@click.group()
@click.version_option(version=__version__, prog_name="p2s")
def main():
    """Self-supervised single-image denoiser for event-count (shot) noise."""


@main.command("phantom")
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--output", type=str, default="phantom.png", show_default=True)
def cmd_phantom(size: int, output: str):
    """Write the deterministic concentric-ellipse test image."""
    if size < 16:
        raise click.UsageError("--size must be at least 16")
    started = _timestamp()
    img = concentric_phantom(size, size)
    out = Path(output)
    save_image(img, out, depth=16)
    _write_manifest(out.with_suffix(".manifest.json"), "phantom",
                    {"size": size}, {}, {"image": str(out)}, None, started)
    click.echo(f"wrote {out}")


@main.command("add-noise")
@click.option("--input", "input_path", required=True, type=str)
@click.option("--lambda", "lam", required=True, type=float,
              help="Peak expected event count; lower is noisier.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", required=True, type=str)
def cmd_add_noise(input_path: str, lam: float, seed: int, output: str):
    """Corrupt a clean image with seeded event-count noise."""
    if not lam > 0:
        raise click.UsageError("--lambda must be positive")
    started = _timestamp()
    name, clean = _resolve_image_ref(input_path)
    noisy = make_noisy(clean, NoiseSpec(peak_lambda=lam, seed=seed))
    out = Path(output)
    save_image(noisy, out, depth=16)
    _write_manifest(
        out.with_suffix(".manifest.json"), "add-noise",
        {"noise": {"peak_lambda": lam, "seed": seed}},
        {"input": input_path, "image_id": name},
        {"noisy": str(out)}, seed, started,
    )
    click.echo(f"wrote {out}")


_LOSS_PRESETS = {
    "full": {"use_poisson": True, "use_l1": True, "use_neighbor": True},
    "poisson": {"use_poisson": True, "use_l1": False, "use_neighbor": True},
    "l1": {"use_poisson": False, "use_l1": True, "use_neighbor": True},
}


def _build_configs(config_file: dict, seed: int | None, net_flags: dict,
                   train_flags: dict) -> tuple[NetConfig, TrainConfig, dict]:
    net_defaults = dataclasses.asdict(NetConfig())
    train_defaults = dataclasses.asdict(TrainConfig())
    if seed is not None:
        net_flags = {**net_flags, "weight_seed": seed}
        train_flags = {**train_flags, "seed": seed}
    net_resolved = _resolve(net_defaults, config_file.get("network", {}), net_flags)
    train_resolved = _resolve(train_defaults, config_file.get("train", {}), train_flags)
    try:
        net_cfg = NetConfig(**net_resolved)
        train_cfg = TrainConfig(**train_resolved)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc))
    return net_cfg, train_cfg, {"network": net_resolved, "train": train_resolved}


@main.command("denoise")
@click.option("--noisy", "noisy_path", required=True, type=str)
@click.option("--clean", "clean_path", type=str, default=None,
              help="Optional reference for metrics; never used in training.")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--output-dir", type=str, default=".", show_default=True)
@click.option("--iterations", type=int, default=None)
@click.option("--filters", type=int, default=None)
@click.option("--steps", type=int, default=None, help="Unrolled refinement steps.")
@click.option("--learning-rate", type=float, default=None)
@click.option("--mu-n", type=float, default=None)
@click.option("--loss", type=click.Choice(sorted(_LOSS_PRESETS)), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--exp-output/--raw-output", "exp_output", default=None,
              help="Image estimate is exp(decoder output) vs the raw output.")
def cmd_denoise(noisy_path, clean_path, config_path, output_dir, iterations,
                filters, steps, learning_rate, mu_n, loss, seed, eval_every,
                exp_output):
    """Train on one noisy image and write the denoised result."""
    started = _timestamp()
    noisy = _load_input_image(noisy_path)
    clean = _load_input_image(clean_path) if clean_path else None
    config_file = _load_toml(config_path)

    net_flags = {"num_filters": filters, "unroll_steps": steps, "exp_output": exp_output}
    train_flags = {"iterations": iterations, "learning_rate": learning_rate,
                   "mu_n": mu_n, "eval_every": eval_every}
    if loss is not None:
        train_flags.update(_LOSS_PRESETS[loss])
    net_cfg, train_cfg, resolved = _build_configs(config_file, seed, net_flags, train_flags)

    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.bin"
    try:
        report = train(noisy, clean, net_cfg, train_cfg, checkpoint_path=ckpt)
    except TrainingDiverged as exc:
        diag = out_dir / "diagnostics.txt"
        diag.write_text(f"{exc}\nlast good parameters: {ckpt}\n")
        click.echo(f"error: {exc} (diagnostics: {diag})", err=True)
        sys.exit(EXIT_TRAINING_ABORT)

    denoised_path = out_dir / "denoised.png"
    trace_path = out_dir / "loss_trace.csv"
    save_image(report.denoised, denoised_path, depth=16)
    trace_path.write_text(trace_csv(report.loss_trace))
    outputs = {"denoised": str(denoised_path), "loss_trace": str(trace_path),
               "checkpoint": str(ckpt)}
    if report.metrics is not None:
        metrics_path = out_dir / "metrics.csv"
        metrics_path.write_text(
            MetricReport.csv_header() + "\n"
            + f"{Path(noisy_path).stem},,{report.metrics.psnr_db!r},"
            + f"{report.metrics.ssim!r}\n"
        )
        outputs["metrics"] = str(metrics_path)
        click.echo(f"psnr_db={report.metrics.psnr_db!r} ssim={report.metrics.ssim!r}")
    _write_manifest(out_dir / "manifest.json", "denoise", resolved,
                    {"noisy": noisy_path, "clean": clean_path},
                    outputs, train_cfg.seed, started)
    click.echo(f"wrote {denoised_path} ({report.wall_time:.1f}s)")


@main.command("ista")
@click.option("--noisy", "noisy_path", required=True, type=str)
@click.option("--filters", type=int, default=8, show_default=True)
@click.option("--kernel-size", type=int, default=3, show_default=True)
@click.option("--lambda-s", type=float, default=0.05, show_default=True,
              help="Sparsity weight on the code.")
@click.option("--iters", type=int, default=200, show_default=True)
@click.option("--dict", "dict_kind", type=click.Choice(["random", "dct"]),
              default="random", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output-dir", type=str, default=".", show_default=True)
def cmd_ista(noisy_path, filters, kernel_size, lambda_s, iters, dict_kind,
             seed, output_dir):
    """Run the fixed-dictionary iterative solver (baseline, no learning)."""
    if lambda_s < 0:
        raise click.UsageError("--lambda-s must be nonnegative")
    if iters < 1:
        raise click.UsageError("--iters must be >= 1")
    started = _timestamp()
    noisy = _load_input_image(noisy_path)
    if dict_kind == "dct":
        weights = dct_dictionary(filters, kernel_size)
    else:
        weights = random_dictionary(filters, kernel_size, seed=seed)
    prob = make_problem(noisy, weights, lambda_s, max_iters=iters)
    result = run_ista(prob)

    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recon_path = out_dir / "reconstruction.png"
    trace_path = out_dir / "trace.csv"
    save_image(result.reconstruction, recon_path, depth=16)
    trace_path.write_text(result.trace_csv())
    _write_manifest(
        out_dir / "manifest.json", "ista",
        {"ista": {"filters": filters, "kernel_size": kernel_size,
                  "sparsity_weight": lambda_s, "max_iters": iters,
                  "dictionary": dict_kind, "step_size": prob.step_size}},
        {"noisy": noisy_path},
        {"reconstruction": str(recon_path), "trace": str(trace_path)},
        seed, started,
    )
    click.echo(f"wrote {recon_path} ({len(result.trace)} iterations)")


@main.command("metrics")
@click.option("--ref", "ref_path", required=True, type=str)
@click.option("--test", "test_path", required=True, type=str)
@click.option("--peak", type=float, default=1.0, show_default=True)
def cmd_metrics(ref_path, test_path, peak):
    """Print PSNR (dB) and SSIM between two images."""
    ref = _load_input_image(ref_path)
    test = _load_input_image(test_path)
    try:
        report = MetricReport(psnr_db=psnr(ref, test, peak), ssim=ssim(ref, test))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"psnr_db={report.psnr_db!r}")
    click.echo(f"ssim={report.ssim!r}")


@main.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_gradcheck(seed):
    """Run the finite-difference gradient suite; nonzero exit on any failure."""
    results = run_suite(seed)
    for res in results:
        click.echo(res.line())
    if not all(r.passed for r in results):
        sys.exit(EXIT_CHECK_FAILED)


def _bench_cell(args):
    """One (image, lambda, method) benchmark cell; returns a CSV row tuple."""
    (name, clean_data, lam, method, cell_seed, net_over, train_over, ista_over) = args
    clean = ImageGrid(clean_data)
    noisy = make_noisy(clean, NoiseSpec(peak_lambda=lam, seed=cell_seed))
    if method == "p2s":
        net_cfg = NetConfig(**{**dataclasses.asdict(NetConfig()), **net_over,
                               "weight_seed": cell_seed})
        train_cfg = TrainConfig(**{**dataclasses.asdict(TrainConfig()), **train_over,
                                   "seed": cell_seed})
        report = train(noisy, clean, net_cfg, train_cfg)
        rec = report.denoised
    elif method == "ista":
        opts = {"filters": 8, "kernel_size": 3, "sparsity_weight": 0.05,
                "max_iters": 200, **ista_over}
        weights = random_dictionary(opts["filters"], opts["kernel_size"], seed=cell_seed)
        prob = make_problem(noisy, weights, opts["sparsity_weight"],
                            max_iters=opts["max_iters"])
        rec = ImageGrid(np.clip(run_ista(prob).reconstruction.data, 0.0, 1.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    rep = evaluate(clean, rec)
    return (name, lam, method, rep.psnr_db, rep.ssim)


@main.command("bench")
@click.option("--spec", "spec_path", required=True, type=str,
              help="TOML matrix: [bench] images/lambdas/methods + overrides.")
@click.option("--output-dir", type=str, default=".", show_default=True)
def cmd_bench(spec_path, output_dir):
    """Run a (image x lambda x method) matrix and tabulate mean PSNR/SSIM."""
    started = _timestamp()
    spec = _load_toml(spec_path)
    bench = spec.get("bench", {})
    images = bench.get("images", ["phantom"])
    lambdas = [float(v) for v in bench.get("lambdas", [40.0, 20.0, 10.0])]
    methods = list(bench.get("methods", ["ista", "p2s"]))
    seed = int(bench.get("seed", 0))
    if not images or not lambdas or not methods:
        raise click.UsageError("bench spec needs nonempty images, lambdas, methods")
    for method in methods:
        if method not in ("ista", "p2s"):
            raise click.UsageError(f"unknown bench method {method!r}")

    cells = []
    idx = 0
    for ref in images:
        name, clean = _resolve_image_ref(ref)
        for lam in lambdas:
            if not lam > 0:
                raise click.UsageError("lambdas must be positive")
            for method in methods:
                cells.append((name, clean.data, lam, method,
                              derive_seed(seed, "bench", idx),
                              spec.get("network", {}), spec.get("train", {}),
                              spec.get("ista", {})))
                idx += 1

    workers = max(1, int(os.environ.get("P2S_THREADS", "1")))
    rows, failures = [], []
    if workers > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            futures = [pool.submit(_bench_cell, cell) for cell in cells]
            for cell, fut in zip(cells, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # cell failures recorded, run continues
                    failures.append((cell[0], cell[2], cell[3], str(exc)))
    else:
        for cell in cells:
            try:
                rows.append(_bench_cell(cell))
            except Exception as exc:  # cell failures recorded, run continues
                failures.append((cell[0], cell[2], cell[3], str(exc)))

    rows.sort(key=lambda r: (r[0], -r[1], r[2]))
    lines = ["dataset,lambda,method,psnr_db,ssim"]
    for name, lam, method, p, s in rows:
        lines.append(f"{name},{lam!r},{method},{p!r},{s!r}")
    for method in sorted(methods):
        m_rows = [r for r in rows if r[2] == method]
        if m_rows:
            lines.append(
                f"average,,{method},"
                f"{float(np.mean([r[3] for r in m_rows]))!r},"
                f"{float(np.mean([r[4] for r in m_rows]))!r}"
            )
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "bench.csv"
    table_path.write_text("\n".join(lines) + "\n")
    outputs = {"table": str(table_path)}
    if failures:
        fail_path = out_dir / "failures.txt"
        fail_path.write_text("".join(
            f"{name} lambda={lam} {method}: {msg}\n" for name, lam, method, msg in failures
        ))
        outputs["failures"] = str(fail_path)
    _write_manifest(out_dir / "manifest.json", "bench",
                    {"bench": {"images": images, "lambdas": lambdas,
                               "methods": methods, "seed": seed},
                     "network": spec.get("network", {}),
                     "train": spec.get("train", {}),
                     "ista": spec.get("ista", {})},
                    {"spec": spec_path}, outputs, seed, started)
    click.echo(f"wrote {table_path}")
    if failures:
        click.echo(f"{len(failures)} cell(s) failed; see failures.txt", err=True)
        sys.exit(EXIT_CHECK_FAILED)


if __name__ == "__main__":
    main()
