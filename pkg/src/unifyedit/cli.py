"""Command-line entry point: ``invert``, ``edit``, ``ablate``, ``bench``, ``trace``.

Exit codes: 0 success, 2 validation/configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backend import AlphaSchedule, LatentGrid, load_backend
from .bench import (
    MetricRecord,
    aggregate,
    emit_trace,
    evaluate,
    load_manifest,
    read_trace,
    trace_long_format,
)
from .errors import ConfigError, DivergenceError, UnifyEditError
from .masks import BinaryMask
from .pipeline import EDIT_TYPES, EditConfig, EditSpec, preset_for_edit_type, run_edit
from .providers import get_alignment_provider, get_structure_provider, sidecar_caption
from .rawio import load_array, save_array
from .sampler import DDIMInversion
from .scheduler import STRATEGIES

log = logging.getLogger("unifyedit")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
LATENT_SUFFIXES = (".f64", ".raw", ".npy")


def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--backend", default="toy", help="toy or adapter:<id>")
    g.add_argument("--backend-config", type=Path, help="JSON key-value backend config")
    g.add_argument("--preset", choices=EDIT_TYPES, help="hyperparameter preset (default: the item's edit type)")
    g.add_argument("--schedule", type=Path, help="alpha schedule file, one value per line")
    g.add_argument("--out", type=Path, default=Path("out"))
    g.add_argument("-v", "--verbose", action="store_true")
    o = p.add_argument_group("edit config overrides")
    o.add_argument("--beta1", type=float)
    o.add_argument("--beta2", type=float)
    o.add_argument("--k1", type=float)
    o.add_argument("--k2", type=float)
    o.add_argument("--T", type=int)
    o.add_argument("--form", choices=("eq14", "alg1"))
    o.add_argument("--tau1", type=int)
    o.add_argument("--tau2", type=int)
    o.add_argument("--max-it", type=int)
    o.add_argument("--cfg-scale", type=float)
    o.add_argument("--sa-resolutions", type=int, nargs="+")
    o.add_argument("--sap-mode", choices=("global", "region"))
    o.add_argument("--sa-source", choices=("source_branch", "inversion_trajectory"))
    o.add_argument("--guidance-mode", choices=("latent_optimization", "noise_guidance"))
    o.add_argument("--strategy", choices=STRATEGIES)
    o.add_argument("--ca-resolution", type=int)
    o.add_argument("--static-lambdas", type=float, nargs=2)
    return p


def _input_args(p):
    p.add_argument("--manifest", type=Path)
    p.add_argument("--item", help="manifest item id")
    p.add_argument("--latent", type=Path, help="clean latent file (t=0)")
    p.add_argument("--source-prompt")
    p.add_argument("--target-prompt")
    p.add_argument("--tokens", nargs="*", default=[])
    p.add_argument("--mask", type=Path, help="8-bit grayscale mask image")
    p.add_argument("--edit-type", choices=EDIT_TYPES)


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="unifyedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", parents=[common], help="latent -> DDIM inversion trajectory")
    p.add_argument("--latent", type=Path, required=True)
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("edit", parents=[common], help="run one edit and write latent + trace")
    _input_args(p)

    p = sub.add_parser("ablate", parents=[common], help="run every gradient strategy on one edit")
    _input_args(p)

    p = sub.add_parser("bench", parents=[common], help="edit + score every manifest item")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--structure-provider", default="stub-selfsim")
    p.add_argument("--alignment-provider", default="stub-caption")
    p.add_argument("--method-tag", default="unifyedit")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("trace", parents=[common], help="trace CSV -> long-format plot data")
    p.add_argument("trace_file", type=Path)
    return parser


def _config_for(args, edit_type) -> EditConfig:
    base = preset_for_edit_type(args.preset or edit_type)
    sched = base.scheduler
    sched_over = {k: getattr(args, k) for k in ("beta1", "beta2", "k1", "k2", "T", "form") if getattr(args, k) is not None}
    if sched_over:
        sched = replace(sched, **sched_over)
    over = {"scheduler": sched}
    for name in ("tau1", "tau2", "max_it", "cfg_scale", "sap_mode", "sa_source", "guidance_mode",
                 "strategy", "ca_resolution"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    if args.sa_resolutions:
        over["sa_resolutions"] = frozenset(args.sa_resolutions)
    if args.static_lambdas:
        over["static_lambdas"] = tuple(args.static_lambdas)
    if "T" in sched_over:
        # windows default to the preset's values; keep them inside [1, T]
        over.setdefault("tau1", min(base.tau1, sched.T))
        over.setdefault("tau2", min(base.tau2, sched.T))
    return replace(base, **over)


def _backend(args, T):
    cfg = {}
    if args.backend_config:
        cfg = json.loads(args.backend_config.read_text(encoding="utf-8"))
    cfg.setdefault("T", T)
    seed = cfg.pop("seed", args.seed) if args.backend_config else args.seed
    return load_backend(args.backend, seed=seed, config=cfg)


def _schedule(args, T):
    if args.schedule:
        sched = AlphaSchedule.from_file(args.schedule)
        if sched.T != T:
            raise ConfigError(f"schedule file has T={sched.T}, config has T={T}")
        return sched
    return AlphaSchedule.default(T)


def _load_latent(path, backend) -> LatentGrid:
    path = Path(path)
    if path.suffix not in LATENT_SUFFIXES:
        raise ConfigError(f"{path}: backend {type(backend).__name__} reads latent files ({', '.join(LATENT_SUFFIXES)}), "
                          "it has no image codec")
    values = load_array(path)
    if values.shape != tuple(backend.latent_shape):
        raise ConfigError(f"{path}: latent shape {values.shape} != backend shape {tuple(backend.latent_shape)}")
    return LatentGrid(values, 0)


def _resolve_input(args):
    """Return (spec, latent_path, item) from either a manifest item or explicit flags."""
    if args.manifest:
        if not args.item:
            raise ConfigError("--manifest needs --item")
        items = {it.id: it for it in load_manifest(args.manifest)}
        if args.item not in items:
            raise ConfigError(f"item {args.item!r} not in {args.manifest}")
        item = items[args.item].resolve(args.manifest.parent)
        return _spec_from_item(item), Path(item.image_path), item
    missing = [f for f in ("latent", "source_prompt", "target_prompt", "edit_type") if getattr(args, f) is None]
    if missing:
        raise ConfigError(f"missing inputs: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    mask = BinaryMask.from_image(args.mask) if args.mask else None
    spec = EditSpec(args.source_prompt, args.target_prompt, args.tokens, mask, args.edit_type)
    return spec, args.latent, None


def _spec_from_item(item) -> EditSpec:
    mask = BinaryMask.from_image(item.mask_path) if item.mask_path else None
    return EditSpec(item.source_prompt, item.target_prompt, list(item.target_tokens), mask, item.edit_type)


def _write_result(out: Path, result, spec, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "edited_latent.f64", result.final_latent.values)
    save_array(out / "source_latent.f64", result.source_latent.values)
    emit_trace(result.trace, out / "trace.csv")
    doc = {"spec": spec.to_dict(), "config": result.config_echo.to_dict(),
           "initial_metrics": result.initial_metrics, "final_metrics": result.final_metrics}
    doc.update(extra or {})
    (out / "result.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def cmd_invert(args):
    config = _config_for(args, args.preset or "color")
    backend = _backend(args, config.T)
    schedule = _schedule(args, config.T)
    z0 = _load_latent(args.latent, backend)
    traj = DDIMInversion().invert(z0, backend.encode_prompt(args.prompt), schedule, backend)
    args.out.mkdir(parents=True, exist_ok=True)
    save_array(args.out / "trajectory.f64", traj.stacked())
    save_array(args.out / "zT.f64", traj.latents[-1].values)
    print(f"wrote {traj.T + 1} latents to {args.out / 'trajectory.f64'}")
    return EXIT_OK


def cmd_edit(args):
    spec, latent_path, _ = _resolve_input(args)
    config = _config_for(args, spec.edit_type)
    backend = _backend(args, config.T)
    z0 = _load_latent(latent_path, backend)
    result = run_edit(z0, spec, config, backend, schedule=_schedule(args, config.T))
    _write_result(args.out, result, spec, {"seed": args.seed, "backend": args.backend})
    print(json.dumps(result.final_metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    spec, latent_path, _ = _resolve_input(args)
    config = _config_for(args, spec.edit_type)
    backend = _backend(args, config.T)
    schedule = _schedule(args, config.T)
    z0 = _load_latent(latent_path, backend)
    report = {}
    for strategy in STRATEGIES:
        try:
            result = run_edit(z0, spec, replace(config, strategy=strategy), backend, schedule=schedule)
        except DivergenceError as exc:
            report[strategy] = {"diverged": True, "t": exc.t, "iteration": exc.iteration}
            continue
        _write_result(args.out / strategy, result, spec)
        report[strategy] = {"diverged": False, **result.final_metrics}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _bench_one(args, item, root, structure, alignment):
    item = item.resolve(root)
    spec = _spec_from_item(item)
    config = _config_for(args, spec.edit_type)
    backend = _backend(args, config.T)
    z0 = _load_latent(item.image_path, backend)
    result = run_edit(z0, spec, config, backend, schedule=_schedule(args, config.T))
    out = args.out / "items" / item.id
    _write_result(out, result, spec)
    caption = sidecar_caption(out / "edited_latent.f64") or sidecar_caption(item.image_path)
    return evaluate(z0.values, result.final_latent.values, item, structure, alignment, caption)


def cmd_bench(args):
    items = load_manifest(args.manifest)
    structure = get_structure_provider(args.structure_provider)
    alignment = get_alignment_provider(args.alignment_provider)
    root = args.manifest.parent
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(lambda it: _bench_one(args, it, root, structure, alignment), items))
    else:
        records = [_bench_one(args, it, root, structure, alignment) for it in items]
    records.sort(key=lambda r: r.id)
    summary = aggregate(records, items, args.method_tag)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    (args.out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    with open(args.out / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "edit_type", "id", "clip", "dino"], lineterminator="\n")
        w.writeheader()
        w.writerows(summary.scatter)
    print(json.dumps(summary.per_type, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_trace(args):
    trace = read_trace(args.trace_file)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / "trace_long.csv"
    with open(target, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "iter", "series", "value"])
        for t, it, series, value in trace_long_format(trace):
            w.writerow([t, it, series, f"{value:.9g}"])
    print(f"wrote {target}")
    return EXIT_OK


COMMANDS = {"invert": cmd_invert, "edit": cmd_edit, "ablate": cmd_ablate, "bench": cmd_bench, "trace": cmd_trace}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UnifyEditError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
