"""Command-line entry point: ``splatprune {prune,sweep,describe,synth}``.

Exit codes: 0 ok, 2 parse, 3 config, 4 pipeline, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evidence as ev
from .errors import ConfigError, SplatPruneError
from .hsfh import DEFAULT_APPEARANCE_BINS
from .pruning import ABLATIONS, PruneConfig, run_pipeline, score_scene, threshold, voxel_evidence
from .report import emit_report, labels_json, synth_scene
from .spatial import DEFAULT_INTERP_M, DEFAULT_K_NEIGHBORS, DEFAULT_VOXEL_FRAC, bbox_of
from .splat_io import load_ply, save_ply

EXIT_OK, EXIT_PARSE, EXIT_CONFIG, EXIT_PIPELINE, EXIT_IO = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _ratio_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of ratios: {text!r}")


def _add_scoring(p, defaults):
    g = p.add_argument_group("scoring")
    g.add_argument("--gamma", type=float, default=defaults.get("gamma", ev.DEFAULT_GAMMA),
                   help="uncertainty weight of the optimistic score")
    g.add_argument("--voxel-frac", type=float, default=defaults.get("voxel_frac", DEFAULT_VOXEL_FRAC),
                   help="voxel size as a fraction of the bounding-box diagonal")
    g.add_argument("--k-neighbors", type=int, default=defaults.get("k_neighbors", DEFAULT_K_NEIGHBORS),
                   help="voxel neighbours per descriptor/evidence neighbourhood")
    g.add_argument("--interp-m", type=int, default=defaults.get("interp_m", DEFAULT_INTERP_M),
                   help="voxel representatives per splat interpolation")
    g.add_argument("--appearance-bins", type=int,
                   default=defaults.get("appearance_bins", DEFAULT_APPEARANCE_BINS),
                   help="bins of the appearance histogram")
    g.add_argument("--ablation", choices=ABLATIONS, default=defaults.get("ablation", "full"),
                   help="pipeline variant")
    g.add_argument("--score-mode", choices=ev.SCORE_MODES, default=defaults.get("score_mode", "optimistic"),
                   help="confidence score")
    g.add_argument("--score-basis", choices=ev.SCORE_BASES, default=defaults.get("score_basis", "retention"),
                   help="rank on retention confidence or pruning probability")
    g.add_argument("--stat-mode", choices=ev.STAT_MODES, default=defaults.get("stat_mode", "neighborhood"),
                   help="how s and l measure descriptor spread")
    g.add_argument("--z", type=float, default=defaults.get("z", ev.DEFAULT_Z),
                   help="z of the Gaussian lower confidence bound")
    g.add_argument("--q", type=float, default=defaults.get("q", ev.DEFAULT_Q),
                   help="quantile of the exact lower confidence bound")
    g.add_argument("--prior-a", type=float, default=defaults.get("prior_a", ev.DEFAULT_PRIOR[0]),
                   help="Beta prior retention pseudo-count")
    g.add_argument("--prior-b", type=float, default=defaults.get("prior_b", ev.DEFAULT_PRIOR[1]),
                   help="Beta prior pruning pseudo-count")
    g.add_argument("--cameras", default=defaults.get("cameras"),
                   help="optional JSON camera list [{center, forward}, ...]")
    g.add_argument("--with-view-features", action="store_true",
                   default=defaults.get("with_view_features", False),
                   help="append view features and grazing evidence (needs --cameras)")
    g.add_argument("--threads", type=int, default=defaults.get("threads"),
                   help="worker threads for neighbour queries; unset falls back to $SPLATPRUNE_THREADS, then all cores")


def build_parser(defaults: dict | None = None) -> argparse.ArgumentParser:
    d = defaults or {}
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="splatprune", formatter_class=fmt,
                                     description="Camera-agnostic one-shot pruning of 3DGS .ply assets.")
    parser.add_argument("--config", help="JSON file of flag values (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", formatter_class=fmt, help="prune one asset")
    p.add_argument("--input", default=d.get("input"), help="input .ply")
    p.add_argument("--output", default=d.get("output"), help="pruned .ply")
    p.add_argument("--report", default=d.get("report"), help="optional JSON report path")
    p.add_argument("--report-timing", action="store_true", default=d.get("report_timing", False),
                   help="include per-stage wall-clock timings in the report")
    p.add_argument("--ratio", type=float, default=d.get("ratio"), help="fraction of splats to remove")
    p.add_argument("--tau", type=float, default=d.get("tau"), help="raw score threshold")
    _add_scoring(p, d)

    s = sub.add_parser("sweep", formatter_class=fmt, help="score once, prune at several ratios")
    s.add_argument("--input", default=d.get("input"), help="input .ply")
    s.add_argument("--output", default=d.get("output"), help="output base path; _rXX is appended")
    s.add_argument("--report", default=d.get("report"), help="optional report base path")
    s.add_argument("--report-timing", action="store_true", default=d.get("report_timing", False),
                   help="include per-stage wall-clock timings in the reports")
    s.add_argument("--ratios", type=_ratio_list, default=d.get("ratios", "0.1,0.3,0.5,0.7"),
                   help="comma-separated removal ratios")
    _add_scoring(s, d)

    de = sub.add_parser("describe", formatter_class=fmt, help="per-voxel descriptors as JSON lines")
    de.add_argument("--input", default=d.get("input"), help="input .ply")
    de.add_argument("--output", default=d.get("output"), help="JSON-lines path (default: stdout)")
    _add_scoring(de, d)

    sy = sub.add_parser("synth", formatter_class=fmt, help="write the planted-redundancy test scene")
    sy.add_argument("--output", default=d.get("output"), help="output .ply")
    sy.add_argument("--labels", default=d.get("labels"), help="optional label sidecar JSON")
    sy.add_argument("--n-plane", type=int, default=d.get("n_plane", 8000), help="redundant plane splats")
    sy.add_argument("--n-rod", type=int, default=d.get("n_rod", 500), help="fine curve splats")
    sy.add_argument("--noise", type=float, default=d.get("noise", 0.002), help="position jitter (std)")
    sy.add_argument("--seed", type=int, default=d.get("seed", 0), help="RNG seed")
    return parser


def _workers(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SPLATPRUNE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"SPLATPRUNE_THREADS must be an integer, got {env!r}", EXIT_CONFIG)
    return os.cpu_count() or 1


def _config(args, ratio=None, tau=None) -> PruneConfig:
    return PruneConfig(
        target_ratio=ratio, tau=tau, ablation=args.ablation, voxel_frac=args.voxel_frac,
        k_neighbors=args.k_neighbors, interp_m=args.interp_m, appearance_bins=args.appearance_bins,
        gamma=args.gamma, score_mode=args.score_mode, score_basis=args.score_basis, z=args.z, q=args.q,
        prior_a=args.prior_a, prior_b=args.prior_b, with_view_features=args.with_view_features,
        stat_mode=args.stat_mode, workers=_workers(args))


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CliError(f"--{name.replace('_', '-')} is required", EXIT_CONFIG)


def _load_cameras(path):
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid camera JSON ({exc})", EXIT_PARSE)
    try:
        return [{"center": [float(v) for v in c["center"]], "forward": [float(v) for v in c["forward"]]}
                for c in raw]
    except (KeyError, TypeError, ValueError):
        raise CliError(f"{path}: cameras must be a list of {{center, forward}} objects", EXIT_PARSE)


def _suffixed(path, ratio):
    p = Path(path)
    return str(p.with_name(f"{p.stem}_r{int(round(ratio * 100)):02d}{p.suffix}"))


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_prune(args) -> int:
    if args.ratio is not None and args.tau is not None:
        raise CliError("--ratio and --tau are mutually exclusive", EXIT_CONFIG)
    if args.ratio is None and args.tau is None:
        raise CliError("one of --ratio or --tau is required", EXIT_CONFIG)
    config = _config(args, ratio=args.ratio, tau=args.tau)
    _require(args, "input", "output")
    cameras = _load_cameras(args.cameras)
    scene = load_ply(args.input)
    run = run_pipeline(scene, config, cameras)
    save_ply(run.pruned, args.output)
    if args.report:
        _write_text(args.report, emit_report(run.result, scene, run.pruned, config,
                                             run.state.splat_stats.summary(),
                                             run.timings if args.report_timing else None,
                                             workers=config.workers))
    return EXIT_OK


def cmd_sweep(args) -> int:
    ratios = args.ratios if isinstance(args.ratios, list) else _ratio_list(args.ratios)
    if not ratios:
        raise CliError("--ratios must list at least one ratio", EXIT_CONFIG)
    configs = [_config(args, ratio=r) for r in ratios]
    _require(args, "input", "output")
    cameras = _load_cameras(args.cameras)
    scene = load_ply(args.input)
    state = score_scene(scene, configs[0], cameras)
    for ratio, config in zip(ratios, configs):
        result = threshold(scene, state, ratio=ratio, basis=config.score_basis)
        pruned = scene.subset(result.kept_ids)
        save_ply(pruned, _suffixed(args.output, ratio))
        if args.report:
            _write_text(_suffixed(args.report, ratio),
                        emit_report(result, scene, pruned, config, state.splat_stats.summary(),
                                    state.timings if args.report_timing else None,
                                    workers=config.workers))
    return EXIT_OK


def describe_records(scene, config: PruneConfig, cameras=None):
    """Per-voxel descriptor, statistics and (A, B) dictionaries."""
    from .evidence import LocalStats, local_statistics
    from .hsfh import compute_descriptors
    from .spatial import kernel_scale, knn_graph, voxel_downsample

    mapping = voxel_downsample(scene, config.voxel_frac, config.interp_m, workers=config.workers)
    k = min(config.k_neighbors, mapping.n_voxels - 1)
    if k > 0:
        nbr_idx, nbr_dist = knn_graph(mapping.centroid, k, workers=config.workers)
    else:
        nbr_idx = np.zeros((mapping.n_voxels, 0), dtype=np.int64)
        nbr_dist = np.zeros((mapping.n_voxels, 0))
    use_cameras = bool(cameras) and config.with_view_features
    table = compute_descriptors(scene, mapping, nbr_idx, nbr_dist, appearance_bins=config.appearance_bins,
                                cameras=cameras if use_cameras else None,
                                diagonal=bbox_of(scene.positions).diagonal)
    if config.ablation in ("full", "no_beta"):
        stats = local_statistics(table, mapping.mean_opacity, nbr_idx, config.stat_mode)
    else:
        stats = LocalStats.neutral(mapping.mean_opacity)
    bandwidth = kernel_scale(scene.positions, config.voxel_frac)
    evid = voxel_evidence(stats, nbr_idx, nbr_dist, bandwidth, config.prior)
    for j in range(mapping.n_voxels):
        yield {
            "voxel": j,
            "centroid": mapping.centroid[j].tolist(),
            "member_count": int(mapping.member_count[j]),
            "normal": table.normals[j].tolist(),
            "geometric": table.geometric[j].tolist(),
            "power_spectrum": table.power_spectrum[j].tolist(),
            "appearance_hist": table.appearance_hist[j].tolist(),
            "view": None if table.view is None else table.view[j].tolist(),
            "s": float(stats.s[j]), "l": float(stats.l[j]), "o": float(stats.o[j]), "u": float(stats.u[j]),
            "A": float(evid.A[j]), "B": float(evid.B[j]),
        }


def cmd_describe(args) -> int:
    # describe never thresholds; a dummy ratio satisfies the config contract
    config = _config(args, ratio=0.5)
    _require(args, "input")
    cameras = _load_cameras(args.cameras)
    scene = load_ply(args.input)
    lines = "".join(json.dumps(rec) + "\n" for rec in describe_records(scene, config, cameras))
    if args.output:
        _write_text(args.output, lines)
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def cmd_synth(args) -> int:
    _require(args, "output")
    scene, labels = synth_scene(dict(n_plane=args.n_plane, n_rod=args.n_rod, noise=args.noise, seed=args.seed))
    save_ply(scene, args.output)
    if args.labels:
        _write_text(args.labels, labels_json(labels))
    return EXIT_OK


COMMANDS = {"prune": cmd_prune, "sweep": cmd_sweep, "describe": cmd_describe, "synth": cmd_synth}


def _read_config(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    with open(known.config, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{known.config}: invalid config JSON ({exc})", EXIT_PARSE)
    if not isinstance(raw, dict):
        raise CliError(f"{known.config}: config must be a JSON object", EXIT_CONFIG)
    return {k.replace("-", "_"): v for k, v in raw.items()}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # exclusivity is checked on the raw flags before anything touches the disk
    if any(a == "--ratio" or a.startswith("--ratio=") for a in argv) and \
            any(a == "--tau" or a.startswith("--tau=") for a in argv):
        print("splatprune: error: --ratio and --tau are mutually exclusive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        defaults = _read_config(argv)
        parser = build_parser(defaults)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        if defaults and ("ratio" in defaults or "tau" in defaults) and args.command == "prune":
            # a flag overrides the file's choice of the other mode
            if any(a.startswith("--ratio") for a in argv):
                args.tau = None
            elif any(a.startswith("--tau") for a in argv):
                args.ratio = None
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"splatprune: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"splatprune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplatPruneError as exc:
        print(f"splatprune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"splatprune: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
