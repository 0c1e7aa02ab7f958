"""Command-line pipeline: synth | curate | preprocess | train | register | evaluate.

Every command takes ``--config FILE`` plus ``--section.key=value`` overrides,
prints the resolved configuration to stderr, and exits with 0 on success,
1 on a domain error (the error class is printed) and 2 on a usage error.
Set ``FLOWREG_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .curation import generate_samples, synthetic_suite
from .errors import ConfigError, EmptyDataset, FlowRegError, MalformedHeader
from .evaluation import EvalCase, SuccessCriteria, evaluate
from .io import (
    list_manifests,
    load_sampled_views,
    read_manifest,
    read_point_cloud,
    read_poses,
    read_sequence,
    save_sampled_views,
    write_manifest,
    write_point_cloud,
    write_poses,
)
from .model import load_model
from .sampler import register
from .sampling import sample_view
from .training import TrainingSample, train, view_seed

log = logging.getLogger("flowreg")

COMMANDS = ("synth", "curate", "preprocess", "train", "register", "evaluate")


class UsageError(Exception):
    pass


def _provenance(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "config": cfg.to_dict(), **extra}


def _require_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _sampling_seeds(cfg: RunConfig, index: int, n_views: int) -> list:
    return [view_seed(cfg.sampling.seed, index, v) for v in range(n_views)]


def _noise_seeds(cfg: RunConfig, index: int, n_views: int) -> list:
    return [view_seed(cfg.sampler.noise_seed, index, v) for v in range(n_views)]


def _sample_views(cfg: RunConfig, views, index: int) -> list:
    return [sample_view(P, replace(cfg.sampling, seed=s))
            for P, s in zip(views, _sampling_seeds(cfg, index, len(views)))]


def _cached_or_sampled(cfg: RunConfig, name: str, views, index: int) -> list:
    cache = Path(cfg.paths.cache_dir) / f"{name}.npz"
    if cache.exists():
        sampled = load_sampled_views(cache)
        if len(sampled) == len(views):
            return sampled
        log.warning("cache %s has %d views, manifest has %d; resampling", cache, len(sampled), len(views))
    return _sample_views(cfg, views, index)


def _view_dirs(root: Path) -> list:
    if (root / "views").is_dir():
        return [root]
    return sorted(p.parent for p in root.glob("*/views"))


def _read_views(d: Path) -> list:
    files = sorted(f for f in (d / "views").iterdir() if f.suffix.lower() in (".ply", ".xyz", ".txt"))
    return [read_point_cloud(f) for f in files]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> None:
    out = Path(cfg.paths.data_dir)
    s = cfg.synth
    for i, sample in enumerate(synthetic_suite(s.seed, s.n_samples, s.min_views, s.max_views, cfg.scene)):
        d = write_manifest(out / f"sample_{i:05d}", sample,
                           _provenance(cfg, "synth", seeds={"synth": s.seed, "index": i}))
        log.info("wrote %s (%d views)", d, len(sample.views))
    print(f"synth: {s.n_samples} samples in {out}")


def cmd_curate(cfg: RunConfig) -> None:
    if cfg.paths.sequence_dir is None:
        raise UsageError("--paths.sequence_dir is required for curate")
    seq = read_sequence(_require_dir(cfg.paths.sequence_dir, "sequence directory"))
    failures = []
    samples = generate_samples(seq, cfg.curation, np.random.default_rng(cfg.seed), failures)
    out = Path(cfg.paths.data_dir)
    for i, sample in enumerate(samples):
        write_manifest(out / f"{seq.sequence_id}_{i:05d}", sample,
                       _provenance(cfg, "curate", seeds={"curation": cfg.seed, "index": i}))
    print(f"curate: {len(samples)} samples in {out} ({len(failures)} skipped)")


def cmd_preprocess(cfg: RunConfig) -> None:
    manifests = list_manifests(_require_dir(cfg.paths.data_dir, "data directory"))
    cache = Path(cfg.paths.cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    for index, d in enumerate(manifests):
        sample = read_manifest(d)
        save_sampled_views(cache / f"{d.name}.npz", _sample_views(cfg, sample.views, index))
        log.info("sampled %s", d.name)
    print(f"preprocess: {len(manifests)} manifests cached in {cache}")


def cmd_train(cfg: RunConfig, resume: bool = False) -> None:
    manifests = list_manifests(_require_dir(cfg.paths.data_dir, "data directory"))
    if not manifests:
        raise EmptyDataset(f"no manifests under {cfg.paths.data_dir}")
    dataset = []
    for index, d in enumerate(manifests):
        sample = read_manifest(d)
        sampled = _cached_or_sampled(cfg, d.name, sample.views, index)
        dataset.append(TrainingSample([s.keypoints for s in sampled], [s.descriptors for s in sampled],
                                      list(sample.gt_poses), index))
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    if tcfg.checkpoint_path is None:
        tcfg = replace(tcfg, checkpoint_path=str(ckpt) + ".train")
    resume_from = tcfg.checkpoint_path if resume and Path(tcfg.checkpoint_path).exists() else None
    result = train(dataset, cfg.model, tcfg, resume_from=resume_from)
    from .model import save_model

    save_model(ckpt, result.model, _provenance(cfg, "train", seeds={"train": tcfg.seed},
                                               steps=result.step, n_samples=len(dataset)))
    loss_log = ckpt.with_name(ckpt.name + ".loss.csv")
    loss_log.write_text("step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(result.losses)))
    print(f"train: {result.step} steps, final loss {result.losses[-1]:.6f}; wrote {ckpt} and {loss_log}")


def cmd_register(cfg: RunConfig) -> None:
    root = _require_dir(cfg.paths.data_dir, "data directory")
    if not Path(cfg.paths.checkpoint).is_file():
        raise UsageError(f"checkpoint {cfg.paths.checkpoint} does not exist")
    dirs = _view_dirs(root)
    if not dirs:
        raise UsageError(f"no views/ directories under {root}")
    model = load_model(cfg.paths.checkpoint)
    out_root = Path(cfg.paths.output_dir)
    for index, d in enumerate(dirs):
        views = _read_views(d)
        sampled = _cached_or_sampled(cfg, d.name, views, index) if len(views) >= 2 else None
        seeds = _noise_seeds(cfg, index, len(views))
        result = register(views, model, cfg.sampler, cfg.sampling, view_seeds=seeds, sampled=sampled)
        out = out_root / d.name
        (out / "registered").mkdir(parents=True, exist_ok=True)
        names = [f"view_{i:03d}" for i in range(len(views))]
        for name, P in zip(names, result.registered):
            write_point_cloud(P, out / "registered" / f"{name}.ply")
        write_poses(out / "poses.txt", names, [T.as_rigid(tol=1e-6) for T in result.poses_metric])
        doc = {
            "rigidity_residual": result.rigidity_residual,
            "residuals": result.residuals,
            "selected": result.selected,
            "global_scale_m": result.canon.global_scale,
            "provenance": _provenance(cfg, "register", input=str(d), seeds={"noise_view_seeds": seeds}),
        }
        (out / "result.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        log.info("registered %s: residual %.4g", d.name, result.rigidity_residual)
    print(f"register: {len(dirs)} samples in {out_root}")


def cmd_evaluate(cfg: RunConfig) -> None:
    manifests = list_manifests(_require_dir(cfg.paths.data_dir, "data directory"))
    est_root = _require_dir(cfg.paths.output_dir, "registration output directory")
    e = cfg.evaluation
    try:
        criteria = SuccessCriteria(e.kind, e.rmse_threshold, e.te_threshold, e.re_threshold, e.te_fraction)
    except ValueError as exc:
        raise UsageError(f"--evaluation.*: {exc}") from exc
    cases = []
    for d in manifests:
        sample = read_manifest(d)
        est_file = est_root / d.name / "poses.txt"
        if not est_file.exists():
            raise MalformedHeader(f"no registration result for {d.name} ({est_file})")
        _, est = read_poses(est_file)
        res_file = est_root / d.name / "result.json"
        residual = json.loads(res_file.read_text())["rigidity_residual"] if res_file.exists() else float("nan")
        cases.append(EvalCase(est, list(sample.gt_poses), sample.views, d.name, residual))
    report = evaluate(cases, criteria, cd_voxel=e.cd_voxel)
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    doc = json.loads(report.to_json())
    doc["provenance"] = _provenance(cfg, "evaluate")
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"evaluate: SR {report.success_rate:.2f}%  RE {report.mean_re:.4f} deg  "
          f"TE {report.mean_te:.4f} m  CD {report.chamfer:.4f} m  ({len(cases)} samples)")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowreg",
        description="Multi-view point cloud registration by flow matching.",
        epilog="Any config key can be overridden with --section.key=value, e.g. --sampler.steps=5.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run configuration")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the training checkpoint")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLOWREG_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    bad = [a for a in extra if not (a.startswith("--") and "=" in a)]
    if bad:
        print(f"flowreg: error: unrecognized argument(s): {' '.join(bad)}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, extra)
    except ConfigError as exc:
        print(f"flowreg: error: {exc}", file=sys.stderr)
        return 2
    print(f"# resolved config for {args.command}\n{cfg.dumps()}", file=sys.stderr)
    try:
        if args.command == "train":
            cmd_train(cfg, resume=args.resume)
        else:
            globals()[f"cmd_{args.command}"](cfg)
    except UsageError as exc:
        print(f"flowreg: error: {exc}", file=sys.stderr)
        return 2
    except FlowRegError as exc:
        print(f"flowreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
