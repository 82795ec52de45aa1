"""Command-line front end: solve, simulate, oracle, beta, chart-error.

The solve pipeline consumes a JSON config pointing at four calibration
captures plus a target chart record, runs every solver stage, and writes the
bundle, a machine-readable report, per-variant chart CSVs, and comparison
PNGs into the output directory. Exit codes: 0 success, 1 solver failure
(including the soft N-unavailable fallback, which still writes all outputs),
2 input/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import (
    CalibrationBundle,
    CalibrationError,
    GamutCounter,
    build_sl,
    build_srl,
    chart_error,
    compute_black_level,
    condition_number,
    predict_lit_chart,
    q_objective,
    solve_m,
    solve_n,
    solve_q,
    transform_content,
)
from .geometry import (
    DEFAULT_BETA_RESOLUTION,
    DEFAULT_HALF_EXTENT,
    compute_beta,
    panel_form_factor_analytic,
    read_env_pfm,
    w_avg_from_env,
    w_avg_from_white,
)
from .imaging import (
    DEFAULT_INSET,
    DEFAULT_WHITE_INDEX,
    TRIM_FRACTION,
    ChartGridSpec,
    ChartSamples,
    LinearImage,
    extract_chart,
    read_chart_csv,
    read_pfm,
    render_comparison_chart,
    sample_roi,
    write_chart_csv,
    write_pfm,
    write_png16,
)
from .spectral import SCENARIOS, make_scene, oracle_calibration, write_scene

CHANNELS = ("red", "green", "blue")

LIT_VARIANTS = ("lit_m_only", "lit_m_q")
DISPLAYED_VARIANTS = ("displayed_no_black_level", "displayed_with_black_level")

ORACLE_PATCH_PIXELS = 16
ORACLE_PRIMARY_BLOCK = 32


class ConfigError(ValueError):
    """Bad or missing configuration / input files (exit code 2)."""


class StageError(RuntimeError):
    """A solver stage failed (exit code 1)."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage


@dataclass
class ChartSource:
    image: Path
    corners: np.ndarray
    inset: float = DEFAULT_INSET


@dataclass
class PipelineConfig:
    primaries_image: Path
    primary_rois: dict
    channel_charts: dict          # channel -> ChartSource
    targets_csv: Path | None
    targets_chart: ChartSource | None
    w_avg_mode: str               # "white_patch" | "env_map"
    w_avg_rgb: np.ndarray | None  # explicit white patch value, optional
    env_map: Path | None
    env_facing: np.ndarray | None
    white_reflectance: float
    half_extent: float
    beta_resolution: int
    cond_limit_sl: float
    cond_limit_q: float
    weights: np.ndarray | None
    black_level_image: Path | None
    black_level_roi: tuple | None
    white_index: int
    output_dir: Path


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


def _chart_source(doc: dict, base: Path, where: str) -> ChartSource:
    image = base / _require(doc, "image", where)
    corners = np.asarray(_require(doc, "corners", where), dtype=np.float64)
    return ChartSource(image=image, corners=corners, inset=float(doc.get("inset", DEFAULT_INSET)))


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Parse a pipeline config JSON; CLI flag overrides win over file values."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    base = path.parent

    primaries = _require(doc, "primaries", "config")
    rois = _require(primaries, "rois", "primaries")
    for channel in CHANNELS:
        if channel not in rois:
            raise ConfigError(f"primaries.rois: missing channel {channel!r}")

    charts_doc = _require(doc, "channel_charts", "config")
    channel_charts = {}
    for channel in CHANNELS:
        if channel not in charts_doc:
            raise ConfigError(f"channel_charts: missing channel {channel!r}")
        channel_charts[channel] = _chart_source(charts_doc[channel], base, f"channel_charts.{channel}")

    targets_doc = _require(doc, "targets", "config")
    targets_csv = targets_chart = None
    if "csv" in targets_doc:
        targets_csv = base / targets_doc["csv"]
    elif "image" in targets_doc:
        targets_chart = _chart_source(targets_doc, base, "targets")
    else:
        raise ConfigError("targets: need either 'csv' or 'image'")

    w_doc = doc.get("w_avg", {"mode": "white_patch"})
    mode = w_doc.get("mode")
    env_map = env_facing = w_rgb = None
    if mode == "env_map":
        env_map = base / _require(w_doc, "path", "w_avg")
        env_facing = np.asarray(_require(w_doc, "facing", "w_avg"), dtype=np.float64)
    elif mode == "white_patch":
        if "rgb" in w_doc:
            w_rgb = np.asarray(w_doc["rgb"], dtype=np.float64)
    else:
        raise ConfigError(f"w_avg.mode must be 'white_patch' or 'env_map', got {mode!r}")

    weights = doc.get("weights")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)

    black_doc = doc.get("black_level")
    black_image = black_roi = None
    if black_doc is not None:
        black_image = base / _require(black_doc, "image", "black_level")
        black_roi = tuple(_require(black_doc, "roi", "black_level"))

    output_dir = doc.get("output_dir", "out")
    output_dir = Path(output_dir)
    if not output_dir.is_absolute():
        output_dir = base / output_dir

    config = PipelineConfig(
        primaries_image=base / _require(primaries, "image", "primaries"),
        primary_rois={c: tuple(rois[c]) for c in CHANNELS},
        channel_charts=channel_charts,
        targets_csv=targets_csv,
        targets_chart=targets_chart,
        w_avg_mode=mode,
        w_avg_rgb=w_rgb,
        env_map=env_map,
        env_facing=env_facing,
        white_reflectance=float(doc.get("white_reflectance", 0.9)),
        half_extent=float(doc.get("half_extent", DEFAULT_HALF_EXTENT)),
        beta_resolution=int(doc.get("beta_resolution", DEFAULT_BETA_RESOLUTION)),
        cond_limit_sl=float(doc.get("cond_limit_sl", 1e6)),
        cond_limit_q=float(doc.get("cond_limit_q", 1e4)),
        weights=weights,
        black_level_image=black_image,
        black_level_roi=black_roi,
        white_index=int(doc.get("white_index", DEFAULT_WHITE_INDEX)),
        output_dir=output_dir,
    )
    _check_inputs_exist(config)
    return config


def _check_inputs_exist(config: PipelineConfig) -> None:
    paths = [("primaries", config.primaries_image)]
    paths += [(f"channel_charts.{c}", src.image) for c, src in config.channel_charts.items()]
    if config.targets_csv is not None:
        paths.append(("targets", config.targets_csv))
    if config.targets_chart is not None:
        paths.append(("targets", config.targets_chart.image))
    if config.env_map is not None:
        paths.append(("w_avg", config.env_map))
    if config.black_level_image is not None:
        paths.append(("black_level", config.black_level_image))
    for stage, p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"stage {stage}: input file not found: {p}")


def _read_image(path) -> LinearImage:
    return LinearImage(read_pfm(path))


def _extract(source: ChartSource, white_index: int) -> ChartSamples:
    grid = ChartGridSpec(source.corners, inset=source.inset)
    # scene-linear PFM has no encoding maximum, so no saturation check
    return extract_chart(_read_image(source.image), grid, white_index=white_index, saturation_level=None)


def _chart_from_array(values: np.ndarray, white_index: int) -> tuple[ChartSamples, int]:
    """Clamp negatives for emission; returns the chart and the clamp count."""
    clamped = int((values < 0).sum())
    return ChartSamples(np.maximum(values, 0.0), white_index=white_index), clamped


def lit_chart_variants(srl, m, q, w_avg, beta, white_index) -> tuple[dict, int]:
    """Simulated lit chart for both correction variants, negatives clamped."""
    predicted = predict_lit_chart(srl, m, w_avg, beta)
    charts = {}
    clamped = 0
    for name, values in (("lit_m_only", predicted), ("lit_m_q", predicted @ np.asarray(q).T)):
        charts[name], n = _chart_from_array(values, white_index)
        clamped += n
    return charts, clamped


def run_solve(config: PipelineConfig):
    """Execute every pipeline stage; returns (bundle, report, exit_code)."""

    def stage(name, fn):
        try:
            return fn()
        except (CalibrationError, ValueError) as exc:
            raise StageError(name, exc) from exc

    primaries_image = stage("primaries", lambda: _read_image(config.primaries_image))
    primary_rgb = {
        c: stage("primaries", lambda c=c: sample_roi(primaries_image, config.primary_rois[c]))
        for c in CHANNELS
    }
    sl = stage("build_sl", lambda: build_sl(*(primary_rgb[c] for c in CHANNELS)))
    m = stage("solve_m", lambda: solve_m(sl, config.cond_limit_sl))

    charts = {
        c: stage("channel_charts", lambda c=c: _extract(config.channel_charts[c], config.white_index))
        for c in CHANNELS
    }
    srl = stage("build_srl", lambda: build_srl(*(charts[c] for c in CHANNELS)))

    if config.targets_csv is not None:
        targets = stage("targets", lambda: read_chart_csv(config.targets_csv, config.white_index))
    else:
        targets = stage("targets", lambda: _extract(config.targets_chart, config.white_index))

    if config.w_avg_mode == "env_map":
        env = stage("w_avg", lambda: read_env_pfm(config.env_map))
        w_avg = stage("w_avg", lambda: w_avg_from_env(env, config.env_facing))
    else:
        white = config.w_avg_rgb if config.w_avg_rgb is not None else targets.white
        w_avg = stage("w_avg", lambda: w_avg_from_white(white, config.white_reflectance))

    beta = stage("beta", lambda: compute_beta(config.half_extent, config.beta_resolution))

    q = stage("solve_q", lambda: solve_q(srl, m, w_avg, targets, beta, config.weights))
    residual = q_objective(q, srl, m, w_avg, targets, beta, config.weights)
    n = stage("solve_n", lambda: solve_n(m, q, config.cond_limit_q))

    if config.black_level_image is not None:
        black_image = stage("black_level", lambda: _read_image(config.black_level_image))
        b_camera = stage("black_level", lambda: sample_roi(black_image, config.black_level_roi))
        w_camera = sl @ np.ones(3)  # camera's view of full white: sum of the primaries
        black_offset = stage("black_level", lambda: compute_black_level(b_camera, w_camera))
    else:
        b_camera = np.zeros(3)
        black_offset = np.zeros(3)

    # Simulated charts for the report.
    lit_charts, clamped = lit_chart_variants(srl, m, q, w_avg, beta, config.white_index)
    counter = GamutCounter()
    pipeline = CalibrationBundle(m=m, q=q, n=n, beta=beta, black_offset=black_offset)
    no_black = CalibrationBundle(m=m, q=q, n=n, beta=beta, black_offset=np.zeros(3))
    displayed = {}
    for name, bundle_variant, use_counter in (
        ("displayed_no_black_level", no_black, None),
        ("displayed_with_black_level", pipeline, counter),
    ):
        panel = transform_content(targets.patches, "in_frustum", bundle_variant, use_counter)
        recorded = panel @ sl.T + b_camera
        displayed[name], extra = _chart_from_array(recorded @ q.T, config.white_index)
        clamped += extra

    diagnostics = {
        "cond_SL": condition_number(sl),
        "cond_Q": condition_number(q),
        "residual": residual,
        "out_of_gamut_fraction": counter.fraction,
        "negative_clamped_components": clamped,
        "n_available": n is not None,
    }
    bundle = CalibrationBundle(
        m=m, q=q, n=n, beta=beta, black_offset=black_offset, diagnostics=diagnostics
    )

    all_charts = {**lit_charts, **displayed}
    errors = {
        name: dict(zip("rgb", chart_error(targets, chart).tolist()))
        for name, chart in all_charts.items()
    }
    report = {
        "errors": errors,
        "diagnostics": diagnostics,
        "beta": {
            "value": beta,
            "half_extent": config.half_extent,
            "resolution": config.beta_resolution,
            "analytic_form_factor": panel_form_factor_analytic(config.half_extent),
            "exact_1m_panel_half_extent": 0.5,
            "exact_1m_panel_form_factor": panel_form_factor_analytic(0.5),
            "note": (
                "default half_extent 0.6 reproduces the 54-of-90-pixel cube-face "
                "panel construction; a 1m x 1m panel at 1m distance is half_extent 0.5"
            ),
        },
        "metadata": {
            "patch_statistic": "trimmed_mean",
            "trim_fraction": TRIM_FRACTION,
            "white_index": config.white_index,
            "white_reflectance": config.white_reflectance,
            "w_avg_mode": config.w_avg_mode,
            "black_level_measured": config.black_level_image is not None,
        },
    }

    _write_outputs(config, bundle, report, targets, all_charts)
    return bundle, report, 0 if n is not None else 1


def _write_outputs(config, bundle, report, targets, charts) -> None:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "bundle.json").write_text(bundle.to_json())
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_chart_csv(out / "targets.csv", targets)
    for name, chart in charts.items():
        write_chart_csv(out / f"{name}.csv", chart)
        try:
            png = render_comparison_chart(targets, chart, normalize=True)
        except ValueError:
            # zero-green white patch (fully degenerate lighting): draw unscaled
            png = render_comparison_chart(targets, chart, normalize=False)
        write_png16(out / f"comparison_{name}.png", png)


def run_oracle(seed: int, scenario: str, outdir) -> Path:
    """Generate a deterministic synthetic fixture directory for cmd solve."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    scene = make_scene(seed, scenario)
    beta = compute_beta(DEFAULT_HALF_EXTENT, DEFAULT_BETA_RESOLUTION)
    calib = oracle_calibration(scene, beta)

    ps = ORACLE_PATCH_PIXELS
    block = ORACLE_PRIMARY_BLOCK
    primaries = np.zeros((block, 3 * block, 3))
    for c in range(3):
        primaries[:, c * block : (c + 1) * block] = calib.sl[:, c]
    write_pfm(outdir / "primaries.pfm", primaries)

    chart_h, chart_w = 4 * ps, 6 * ps
    for c, name in enumerate(CHANNELS):
        chart = np.zeros((chart_h, chart_w, 3))
        for j in range(24):
            r, col = divmod(j, 6)
            chart[r * ps : (r + 1) * ps, col * ps : (col + 1) * ps] = calib.srl.matrices[j][:, c]
        write_pfm(outdir / f"chart_{name}.pfm", chart)

    write_chart_csv(outdir / "targets.csv", calib.targets)

    # Bounce off the switched-off in-frustum panels: albedo times the camera's
    # view of the stage reproducing the environment.
    rng = np.random.default_rng([seed, 97])
    albedo = float(rng.uniform(0.04, 0.10))
    m = np.linalg.inv(calib.sl)
    b_camera = np.maximum(albedo * (calib.sl @ (m @ calib.w_avg)), 0.0)
    write_pfm(outdir / "black.pfm", np.broadcast_to(b_camera, (ps, ps, 3)).copy())

    write_scene(
        outdir / "scene",
        scene,
        extra_manifest={
            "seed": seed,
            "scenario": scenario,
            "beta": beta,
            "half_extent": DEFAULT_HALF_EXTENT,
            "beta_resolution": DEFAULT_BETA_RESOLUTION,
            "albedo": albedo,
        },
    )

    margin = (block - 24) // 2
    config = {
        "primaries": {
            "image": "primaries.pfm",
            "rois": {
                name: [c * block + margin, margin, 24, 24] for c, name in enumerate(CHANNELS)
            },
        },
        "channel_charts": {
            name: {
                "image": f"chart_{name}.pfm",
                "corners": [[0, 0], [chart_w, 0], [chart_w, chart_h], [0, chart_h]],
                "inset": DEFAULT_INSET,
            }
            for name in CHANNELS
        },
        "targets": {"csv": "targets.csv"},
        "w_avg": {"mode": "white_patch"},
        "white_reflectance": 0.9,
        "half_extent": DEFAULT_HALF_EXTENT,
        "beta_resolution": DEFAULT_BETA_RESOLUTION,
        "cond_limit_sl": 1e6,
        "cond_limit_q": 1e4,
        "black_level": {"image": "black.pfm", "roi": [0, 0, ps, ps]},
        "white_index": DEFAULT_WHITE_INDEX,
        "output_dir": "out",
    }
    (outdir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return outdir


def run_simulate(config: PipelineConfig, bundle_path, variant: str, outdir=None):
    """Re-predict the lit chart from a saved bundle; writes CSV and PNG."""
    bundle_path = Path(bundle_path)
    if not bundle_path.is_file():
        raise ConfigError(f"bundle file not found: {bundle_path}")
    try:
        bundle = CalibrationBundle.from_json(bundle_path.read_text())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid bundle {bundle_path}: {exc}") from exc

    charts = {c: _extract(config.channel_charts[c], config.white_index) for c in CHANNELS}
    srl = build_srl(*(charts[c] for c in CHANNELS))
    if config.targets_csv is not None:
        targets = read_chart_csv(config.targets_csv, config.white_index)
    else:
        targets = _extract(config.targets_chart, config.white_index)
    if config.w_avg_mode == "env_map":
        w_avg = w_avg_from_env(read_env_pfm(config.env_map), config.env_facing)
    else:
        white = config.w_avg_rgb if config.w_avg_rgb is not None else targets.white
        w_avg = w_avg_from_white(white, config.white_reflectance)

    name = {"m-only": "lit_m_only", "m-q": "lit_m_q"}[variant]
    lit, _ = lit_chart_variants(srl, bundle.m, bundle.q, w_avg, bundle.beta, config.white_index)
    chart = lit[name]

    outdir = Path(outdir) if outdir is not None else config.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"simulated_{name}.csv"
    png_path = outdir / f"comparison_simulated_{name}.png"
    write_chart_csv(csv_path, chart)
    try:
        png = render_comparison_chart(targets, chart, normalize=True)
    except ValueError:
        png = render_comparison_chart(targets, chart, normalize=False)
    write_png16(png_path, png)
    return chart, csv_path, png_path


def run_chart_error(target_csv, measured_csv, white_index: int = DEFAULT_WHITE_INDEX) -> dict:
    for p in (target_csv, measured_csv):
        if not Path(p).is_file():
            raise ConfigError(f"chart CSV not found: {p}")
    target = read_chart_csv(target_csv, white_index)
    measured = read_chart_csv(measured_csv, white_index)
    return dict(zip("rgb", chart_error(target, measured).tolist()))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagecal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the full calibration pipeline")
    solve.add_argument("--config", required=True)
    solve.add_argument("--output-dir", default=None)
    solve.add_argument("--half-extent", type=float, default=None)
    solve.add_argument("--beta-resolution", type=int, default=None)
    solve.add_argument("--cond-limit-sl", type=float, default=None)
    solve.add_argument("--cond-limit-q", type=float, default=None)
    solve.add_argument("--white-reflectance", type=float, default=None)
    solve.add_argument("--white-index", type=int, default=None)

    simulate = sub.add_parser("simulate", help="simulate the lit chart from a saved bundle")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--bundle", required=True)
    simulate.add_argument("--variant", choices=("m-only", "m-q"), default="m-q")
    simulate.add_argument("--output-dir", default=None)

    oracle = sub.add_parser("oracle", help="generate a synthetic calibration fixture")
    oracle.add_argument("--seed", type=int, required=True)
    oracle.add_argument("--scenario", choices=SCENARIOS, default="broad")
    oracle.add_argument("--outdir", required=True)

    beta = sub.add_parser("beta", help="print the panel scale factor")
    beta.add_argument("--half-extent", type=float, default=DEFAULT_HALF_EXTENT)
    beta.add_argument("--resolution", type=int, default=DEFAULT_BETA_RESOLUTION)

    err = sub.add_parser("chart-error", help="per-channel error between two chart CSVs")
    err.add_argument("--target", required=True)
    err.add_argument("--measured", required=True)
    err.add_argument("--white-index", type=int, default=DEFAULT_WHITE_INDEX)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "solve":
            overrides = {
                "output_dir": args.output_dir,
                "half_extent": args.half_extent,
                "beta_resolution": args.beta_resolution,
                "cond_limit_sl": args.cond_limit_sl,
                "cond_limit_q": args.cond_limit_q,
                "white_reflectance": args.white_reflectance,
                "white_index": args.white_index,
            }
            config = load_config(args.config, overrides)
            bundle, report, code = run_solve(config)
            if code != 0:
                print("warning: N unavailable, in-frustum fallback N := M", file=sys.stderr)
            print(f"wrote {config.output_dir}")
            return code
        if args.command == "simulate":
            config = load_config(args.config)
            _, csv_path, png_path = run_simulate(config, args.bundle, args.variant, args.output_dir)
            print(f"wrote {csv_path} and {png_path}")
            return 0
        if args.command == "oracle":
            outdir = run_oracle(args.seed, args.scenario, args.outdir)
            print(f"wrote {outdir}")
            return 0
        if args.command == "beta":
            print(repr(compute_beta(args.half_extent, args.resolution)))
            return 0
        if args.command == "chart-error":
            metrics = run_chart_error(args.target, args.measured, args.white_index)
            print(json.dumps(metrics, indent=2, sort_keys=True))
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
