"""Command-line entry point: ``migattn <subcommand> [flags]``.

Every run writes its artifacts plus ``manifest.json`` (config, versions,
seed and a sha256 per output file) into ``--out``.  Validation failures
exit 2, numeric check failures exit 3; both print an error JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attention import init_block, init_weights, initial_tokens, model_forward
from .compositor import LayerParams, composite, layering_order
from .masks import GROUPS, build_cla_mask, build_ica_mask, build_schedule, mask_stats
from .metrics import load_cases, miou, success_rates
from .positions import RotationSpec, assign_indices, table_rows
from .probes import grad_check, isolation_probe
from .rasters import color_preview, mask_image, ownership_image, write_pgm, write_ppm, write_tsv
from .rng import stream
from .scene import SceneError, build_token_sequence, load_scene

log = logging.getLogger("migattn")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3
PROBE_TRIALS = 5
SUBCOMMANDS = ("compose", "masks", "indices", "forward", "probe", "gradcheck", "metrics")


class NumericFailure(RuntimeError):
    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class RunConfig:
    subcommand: str
    out: str
    scene: str | None = None
    cases: str | None = None
    seed: int | None = None
    blocks: int = 57
    heads: int = 2
    head_dim: int = 64
    split: tuple[int, int, int] | None = None
    ica_groups: tuple[str, ...] = ("MID",)
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.0
    iou_threshold: float = 0.5
    eps: float = 1e-4
    tokens: int = 12
    figures: bool = False

    def rotation(self) -> RotationSpec:
        if self.split is None:
            return RotationSpec.for_head_dim(self.head_dim)
        return RotationSpec(self.head_dim, tuple(self.split))

    def require_seed(self) -> int:
        if self.seed is None:
            raise SceneError(f"{self.subcommand}: --seed is required")
        return self.seed

    def require_scene(self):
        if self.scene is None:
            raise SceneError(f"{self.subcommand}: --scene is required")
        return load_scene(self.scene)


def _dump_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _frac(x: Fraction) -> float:
    return float(x)


# -- subcommands ------------------------------------------------------------


def cmd_compose(cfg: RunConfig, out: Path) -> list[Path]:
    scene = cfg.require_scene()
    seed = cfg.require_seed() if cfg.lam > 0 else (cfg.seed or 0)
    params = LayerParams(cfg.alpha, cfg.beta, cfg.lam, seed)
    order = layering_order(scene, params)
    comp = composite(scene, order)
    files = [
        _dump_json(
            out / "order.json",
            {
                "order": list(order.order),
                "scores": {str(k): v for k, v in order.scores.items()},
                "constraints": [{"above": a, "below": b} for a, b in order.constraints],
                "params": asdict(params),
            },
        ),
        write_pgm(out / "ownership.pgm", ownership_image(comp.ownership, scene.n_instances)),
        write_tsv(
            out / "occlusion.tsv",
            ["id", "layer", "effective_cells", "visible_cells", "occlusion_ratio"],
            [
                (i, order.order.index(i), comp.effective[i], comp.visible[i], repr(comp.occlusion[i]))
                for i in range(1, scene.n_instances + 1)
            ],
        ),
        write_ppm(out / "preview.ppm", color_preview(comp.ownership)),
    ]
    if cfg.figures:
        from .plotting import plot_composite

        files.append(plot_composite(out / "composite.png", scene, comp.ownership, order.order, comp.occlusion))
    return files


def cmd_masks(cfg: RunConfig, out: Path) -> list[Path]:
    scene = cfg.require_scene()
    seq = build_token_sequence(scene)
    masks = {"CLA": build_cla_mask(scene, seq), "ICA": build_ica_mask(scene, seq)}
    files = [write_pgm(out / f"mask_{name.lower()}.pgm", mask_image(m)) for name, m in masks.items()]
    rows = []
    for name, m in masks.items():
        for s in mask_stats(m, seq):
            rows.append((name, s.query, s.key, s.allowed, s.total, repr(s.density)))
    files.append(write_tsv(out / "mask_stats.tsv", ["mask", "query", "key", "allowed", "total", "density"], rows))
    if cfg.figures:
        from .plotting import plot_masks

        files.append(plot_masks(out / "masks.png", masks, seq))
    return files


def cmd_indices(cfg: RunConfig, out: Path) -> list[Path]:
    scene = cfg.require_scene()
    seq = build_token_sequence(scene)
    table = assign_indices(scene, seq)
    return [write_tsv(out / "indices.tsv", ["token_index", "role", "m", "i", "j"], table_rows(seq, table))]


def cmd_forward(cfg: RunConfig, out: Path) -> list[Path]:
    scene = cfg.require_scene()
    seed = cfg.require_seed()
    spec = cfg.rotation()
    seq = build_token_sequence(scene)
    table = assign_indices(scene, seq)
    schedule = build_schedule(cfg.blocks, cfg.ica_groups)
    dim = cfg.heads * cfg.head_dim
    weights = init_weights(cfg.blocks, dim, cfg.heads, seed)
    x = initial_tokens(seq, dim, seed)
    y = model_forward(scene, weights, schedule, table, x, spec, seq)
    finite = bool(np.isfinite(y).all())
    report = {
        "seed": seed,
        "blocks": cfg.blocks,
        "ica_blocks": schedule.ica_blocks(),
        "groups": {k: [r.start, r.stop - 1] for k, r in schedule.groups.items()},
        "rotation": {"head_dim": spec.head_dim, "split": list(spec.split), "theta": spec.theta},
        "sequence_length": len(seq),
        "noise_shape": list(y.shape),
        "output_sha256": hashlib.sha256(np.ascontiguousarray(y).tobytes()).hexdigest(),
        "output_mean": float(y.mean()),
        "output_std": float(y.std()),
        "checks": {"finite": {"passed": finite}},
        "passed": finite,
    }
    path = _dump_json(out / "forward.json", report)
    if not finite:
        raise NumericFailure("non-finite model outputs", report)
    return [path]


def cmd_probe(cfg: RunConfig, out: Path) -> list[Path]:
    scene = cfg.require_scene()
    seed = cfg.require_seed()
    spec = cfg.rotation()
    dim = cfg.heads * cfg.head_dim
    weights = init_block(stream(seed, "probe-weights"), dim, cfg.heads)
    trials = [isolation_probe(scene, weights, seed=seed + t, spec=spec) for t in range(PROBE_TRIALS)]

    foreign = [e["foreign"] for tr in trials for e in tr["instances"] if e["query"] is not None]
    own_ok = sum(all(e["own"] != 0 for e in tr["instances"] if e["query"] is not None) for tr in trials)
    checks = {
        "foreign_exact_zero": {"passed": all(d == 0.0 for d in foreign), "max_delta": max(foreign, default=0.0)},
        "own_reference_nonzero": {"passed": own_ok >= PROBE_TRIALS - 1, "nonzero_trials": own_ok, "trials": PROBE_TRIALS},
    }
    bg = [tr["background"]["layout"] for tr in trials if "background" in tr]
    if bg:
        nonzero = sum(d != 0 for d in bg)
        checks["background_layout_nonzero"] = {"passed": nonzero >= PROBE_TRIALS - 1, "nonzero_trials": nonzero}
    passed = all(c["passed"] for c in checks.values())
    report = {"seeds": [seed + t for t in range(PROBE_TRIALS)], "checks": checks, "trials": trials, "passed": passed}
    path = _dump_json(out / "probe.json", report)
    if not passed:
        raise NumericFailure("isolation probe failed", report)
    return [path]


def cmd_gradcheck(cfg: RunConfig, out: Path) -> list[Path]:
    seed = cfg.require_seed()
    results = {fid: grad_check(fid, seed=seed, eps=cfg.eps, n_tokens=cfg.tokens) for fid in ("attention", "block")}
    passed = all(r["passed"] for r in results.values())
    report = {"seed": seed, "tolerance": 1e-4, "checks": results, "passed": passed}
    path = _dump_json(out / "gradcheck.json", report)
    if not passed:
        raise NumericFailure("gradient check failed", report)
    return [path]


def cmd_metrics(cfg: RunConfig, out: Path) -> list[Path]:
    source = cfg.cases or cfg.scene
    if source is None:
        raise SceneError("metrics: --cases is required")
    cases = load_cases(source)
    rows = []
    for case in cases:
        ious = case.ious()
        isr, sr = success_rates([case], cfg.iou_threshold)
        rows.append(
            (
                case.case_id,
                repr(_frac(miou(case))),
                ",".join(f"{i}:{float(v)!r}" for i, v in zip(case.ids, ious)),
                repr(_frac(isr)),
                repr(_frac(sr)),
            )
        )
    isr, sr = success_rates(cases, cfg.iou_threshold)
    mean_miou = sum((miou(c) for c in cases), Fraction(0)) / len(cases) if cases else Fraction(0)
    rows.append(("ALL", repr(_frac(mean_miou)), "", repr(_frac(isr)), repr(_frac(sr))))
    path = write_tsv(out / "metrics.tsv", ["case_id", "mIoU", "instance_iou", "I-SR", "SR"], rows)
    sys.stdout.write(path.read_text())
    return [path]


COMMANDS = {
    "compose": cmd_compose,
    "masks": cmd_masks,
    "indices": cmd_indices,
    "forward": cmd_forward,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        files = COMMANDS[cfg.subcommand](cfg, out)
    except NumericFailure as exc:
        _emit_error("numeric", str(exc), report=exc.report)
        return EXIT_NUMERIC
    except (SceneError, ValueError, FileNotFoundError) as exc:
        _emit_error("validation", str(exc), instance_id=getattr(exc, "instance_id", None))
        return EXIT_VALIDATION

    versions = {"migattn": __version__, "numpy": np.__version__, "python": platform.python_version()}
    if cfg.figures:
        import matplotlib

        versions["matplotlib"] = matplotlib.__version__
    # the output directory is left out so relocated reruns stay byte-identical
    config = {k: v for k, v in asdict(cfg).items() if k != "out"}
    manifest = {
        "config": config,
        "versions": versions,
        "seed": cfg.seed,
        "outputs": {p.name: _sha256(p) for p in sorted(files)},
    }
    _dump_json(out / "manifest.json", manifest)
    log.info("wrote %d files to %s", len(files) + 1, out)
    return EXIT_OK


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message}
    payload.update({k: v for k, v in extra.items() if v is not None and k != "report"})
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


class _JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("validation", f"{self.prog}: {message}")
        self.exit(EXIT_VALIDATION)


def _split(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonErrorParser(prog="migattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_JsonErrorParser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scene", help="scene JSON path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="non-negative integer seed")
        p.add_argument("--blocks", type=int, default=57)
        p.add_argument("--heads", type=int, default=2)
        p.add_argument("--head-dim", type=int, default=64)
        p.add_argument("--split", type=_split, help="rotary dims per axis as m,i,j")
        p.add_argument("--ica-groups", nargs="*", choices=GROUPS, default=["MID"])
        p.add_argument("--alpha", type=float, default=1.0)
        p.add_argument("--beta", type=float, default=1.0)
        p.add_argument("--lambda", dest="lam", type=float, default=0.0)
        p.add_argument("--iou-threshold", type=float, default=0.5)
        p.add_argument("--eps", type=float, default=1e-4, help="finite-difference step")
        p.add_argument("--tokens", type=int, default=12, help="tokens per gradient-check instance")
        p.add_argument("--cases", help="metrics: JSON list of evaluation cases")
        p.add_argument("--figures", action="store_true", help="also render PNG report figures")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("CONTEXTGEN_LOG", "WARNING").upper()
    logging.basicConfig(
        level=int(level) if level.isdigit() else getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version, or a JSON-reported usage error
        return int(exc.code or 0)
    if args.seed is not None and args.seed < 0:
        _emit_error("validation", f"--seed must be non-negative, got {args.seed}")
        return EXIT_VALIDATION
    cfg = RunConfig(
        subcommand=args.subcommand,
        out=args.out,
        scene=args.scene,
        cases=args.cases,
        seed=args.seed,
        blocks=args.blocks,
        heads=args.heads,
        head_dim=args.head_dim,
        split=args.split,
        ica_groups=tuple(dict.fromkeys(args.ica_groups)),
        alpha=args.alpha,
        beta=args.beta,
        lam=args.lam,
        iou_threshold=args.iou_threshold,
        eps=args.eps,
        tokens=args.tokens,
        figures=args.figures,
    )
    return run(cfg)


if __name__ == "__main__":
    raise SystemExit(main())
