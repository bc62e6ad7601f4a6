"""Batch experiment front end.

Subcommands:
  train                  one training run -> checkpoint + epochs.csv + metrics.csv
  ablate                 the variant grid x seeds -> ablation.csv
  diagnose               correlation / condition diagnostics for a checkpoint
  check                  gradient + oracle self-check battery
  bench-power-iteration  accuracy/latency table for the eigenvalue estimator

Exit codes: 0 success, 1 check or metric failure, 2 usage/config error.
All outputs are CSV or the documented binary checkpoint format; given the
same (config, seed) every byte except OS timestamps reproduces.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from .checks import run_all_checks
from .config import Config, config_text, parse_config, write_config
from .errors import ConfigError, ContractError
from .evaluate import (
    CONDITION_HEADER, CORR_HIST_HEADER, CORRELATION_HEADER,
    correlation_report, write_condition_csv, write_corr_hist_csv,
    write_correlation_csv, write_csv, write_metrics_csv,
)
from .network import TwoBranchNet, VariantSpec, load_checkpoint, save_checkpoint
from .ortho import SvdoConfig, condition_number, exact_extreme_eigs, power_iter_lambda
from .rng import sub_seed
from .tape import Tape
from .tensor import Tensor, save_tensor
from .toydata import make_toy_dataset
from .train import embed_images, train

EPOCHS_HEADER = ["epoch", "stage", "lr", "xent", "triplet", "of_term", "ow_term", "total"]
BENCH_HEADER = ["size", "gap_ratio", "iterations", "rel_error", "wall_time_s"]

ABLATION_GRID = [
    "baseline",
    "pam",
    "cam",
    "pam,cam",
    "of",
    "ow",
    "of,ow",
    "pam,cam,of,ow",
    "pam,cam,of,ow,triplet",
]

DIAGNOSTIC_SITES = ("t_a", "t_g", "attentive_prepool")


@dataclass(frozen=True)
class RunManifest:
    config_path: str
    seed: int
    out_dir: str
    run_id: str
    variant: str

    def text(self) -> str:
        return (f"run_id = {self.run_id}\n"
                f"config = {self.config_path}\n"
                f"seed = {self.seed}\n"
                f"variant = {self.variant}\n"
                f"out = {self.out_dir}\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        fields = {}
        with open(path) as fh:
            for line in fh:
                if "=" in line:
                    key, value = (p.strip() for p in line.split("=", 1))
                    fields[key] = value
        return cls(config_path=fields["config"], seed=int(fields["seed"]),
                   out_dir=fields["out"], run_id=fields["run_id"],
                   variant=fields["variant"])


def _run_id(cfg: Config, seed: int, variant: VariantSpec) -> str:
    digest = hashlib.sha1()
    digest.update(config_text(cfg).encode())
    digest.update(f"|{seed}|{variant.label}".encode())
    return digest.hexdigest()[:12]


def _load_config(path: str | None) -> Config:
    return parse_config(path) if path else Config()


def _build_dataset(cfg: Config, seed: int):
    return make_toy_dataset(
        num_ids=cfg.data.num_ids,
        instances_per_id=cfg.data.instances_per_id,
        image_shape=cfg.backbone.input_shape,
        noise=cfg.data.noise,
        jitter=cfg.data.jitter,
        clutter=cfg.data.clutter,
        cast=cfg.data.cast,
        flip_p=cfg.data.flip_p,
        seed=sub_seed(seed, "data"),
    )


def _build_model(cfg: Config, variant: VariantSpec, seed: int) -> TwoBranchNet:
    # the run's master seed drives the power-iteration stream; an explicit
    # nonzero svdo.seed in the config pins it instead
    svdo_seed = cfg.svdo.seed or sub_seed(seed, "powerq-base")
    svdo = replace(cfg.svdo, seed=svdo_seed)
    return TwoBranchNet(cfg.backbone, cfg.embedding, variant,
                        num_classes=cfg.data.num_ids, seed=seed, svdo=svdo)


def run_training(cfg: Config, variant: VariantSpec, seed: int, out_dir: str,
                 config_path: str | None) -> dict:
    """One full training run with all artifacts written into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "run_manifest.txt")
    if os.path.exists(manifest_path):
        raise ConfigError(f"output directory already holds a run: {manifest_path}")

    dataset = _build_dataset(cfg, seed)
    model = _build_model(cfg, variant, seed)
    result = train(model, dataset, cfg.schedule, cfg.weights, seed=seed)

    for split in ("query", "gallery"):
        emb, _ = embed_images(model, getattr(dataset, split)[0])
        save_tensor(Tensor(emb), os.path.join(out_dir, f"{split}_embeddings.bin"))

    run_id = _run_id(cfg, seed, variant)
    manifest = RunManifest(config_path=config_path or "<defaults>", seed=seed,
                           out_dir=out_dir, run_id=run_id, variant=variant.label)
    with open(manifest_path, "w") as fh:
        fh.write(manifest.text())
    write_config(cfg, os.path.join(out_dir, "config.txt"))
    write_csv(os.path.join(out_dir, "epochs.csv"), EPOCHS_HEADER,
              [(r.epoch, r.stage, r.lr, r.xent, r.triplet, r.of_term, r.ow_term,
                r.total) for r in result.epochs])
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                      [(run_id, variant.label, seed, result.metrics["top1"],
                        result.metrics["top5"], result.metrics["map"])])
    save_checkpoint(model, out_dir)
    return {"run_id": run_id, **result.metrics, "seconds": result.seconds}


def train_with_diagnostics(cfg: Config, variant: VariantSpec, seed: int) -> dict:
    """In-memory run: train at (cfg, seed), then measure correlation stats.

    Returns retrieval metrics, per-site mean absolute off-diagonal channel
    correlations over the held-out images, and the wall time.
    """
    dataset = _build_dataset(cfg, seed)
    model = _build_model(cfg, variant, seed)
    result = train(model, dataset, cfg.schedule, cfg.weights, seed=seed)
    eval_images = np.concatenate([dataset.query[0], dataset.gallery[0]])
    sites = _pooled_site_matrices(model, eval_images)
    corr = {site: correlation_report(matrix).mean_offdiag
            for site, matrix in sites.items()}
    return {"metrics": result.metrics, "corr": corr, "seconds": result.seconds,
            "model": model, "dataset": dataset}


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    variant = VariantSpec.from_flags(args.variant)
    summary = run_training(cfg, variant, args.seed, args.out, args.config)
    print(f"run {summary['run_id']} variant={variant.label} seed={args.seed} "
          f"top1={summary['top1']:.4f} top5={summary['top5']:.4f} "
          f"map={summary['map']:.4f} train_top1={summary['train_top1']:.4f} "
          f"({summary['seconds']:.1f}s)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("need at least one seed")
    rows = []
    by_variant: dict[str, list] = {}
    for flags in ABLATION_GRID:
        variant = VariantSpec.from_flags(flags)
        for seed in seeds:
            cell_dir = os.path.join(args.out, "runs", variant.label, f"seed{seed}")
            summary = run_training(cfg, variant, seed, cell_dir, args.config)
            row = (variant.label, seed, summary["top1"], summary["top5"],
                   summary["map"])
            rows.append(row)
            by_variant.setdefault(variant.label, []).append(row[2:])
            print(f"{variant.label:24s} seed={seed} map={summary['map']:.4f} "
                  f"({summary['seconds']:.1f}s)")
    for label, cells in by_variant.items():
        means = np.mean(np.array(cells, dtype=float), axis=0)
        rows.append((label, "mean", means[0], means[1], means[2]))
    write_csv(os.path.join(args.out, "ablation.csv"),
              ["variant", "seed", "top1", "top5", "map"], rows)
    return 0


def _pooled_site_matrices(model: TwoBranchNet, images: np.ndarray,
                          batch: int = 64) -> dict[str, np.ndarray]:
    """Channel x (spatial * images) matrices per diagnostic site, eval mode."""
    pooled: dict[str, list] = {site: [] for site in DIAGNOSTIC_SITES}
    for start in range(0, len(images), batch):
        tape = Tape()
        fwd = model.forward(tape, images[start:start + batch], training=False,
                            want_of=False, update_stats=False)
        for site in DIAGNOSTIC_SITES:
            value = fwd.activations[site].value  # (B, C, H, W)
            pooled[site].append(value.transpose(1, 0, 2, 3).reshape(value.shape[1], -1))
    return {site: np.concatenate(parts, axis=1) for site, parts in pooled.items()}


def run_diagnose(checkpoint_dir: str, out_dir: str) -> dict:
    manifest = RunManifest.read(os.path.join(checkpoint_dir, "run_manifest.txt"))
    cfg = parse_config(os.path.join(checkpoint_dir, "config.txt"))
    variant = VariantSpec.from_flags(manifest.variant)
    dataset = _build_dataset(cfg, manifest.seed)
    model = _build_model(cfg, variant, manifest.seed)
    model.load_state(load_checkpoint(checkpoint_dir))

    eval_images = np.concatenate([dataset.query[0], dataset.gallery[0]])
    sites = _pooled_site_matrices(model, eval_images)

    os.makedirs(out_dir, exist_ok=True)
    corr_rows, hist_rows, cond_rows = [], [], []
    stats = {}
    for site, matrix in sites.items():
        report = correlation_report(matrix)
        corr_rows.append((manifest.variant, site, report.mean_offdiag,
                          report.mean_full, report.flagged_channels))
        for b in range(len(report.histogram)):
            hist_rows.append((manifest.variant, site, report.bin_edges[b],
                              report.bin_edges[b + 1], int(report.histogram[b])))
        cond_rows.append((manifest.variant, site, condition_number(matrix)))
        stats[site] = report.mean_offdiag
    write_correlation_csv(os.path.join(out_dir, "correlation.csv"), corr_rows)
    write_corr_hist_csv(os.path.join(out_dir, "corr_hist.csv"), hist_rows)
    write_condition_csv(os.path.join(out_dir, "condition.csv"), cond_rows)
    return stats


def cmd_diagnose(args) -> int:
    stats = run_diagnose(args.checkpoint, args.out)
    for site, value in stats.items():
        print(f"mean |corr| off-diagonal at {site}: {value:.4f}")
    return 0


def cmd_check(args) -> int:
    results = run_all_checks(seed=args.seed)
    failures = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:45s} max_rel_err={r.error:.3e} tol={r.tol:.0e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "check_report.csv"),
                  ["name", "max_rel_error", "tolerance", "passed"],
                  [(r.name, r.error, r.tol, int(r.passed)) for r in results])
    if failures:
        print(f"{len(failures)} check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_bench_power_iteration(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for size in (8, 16, 32, 64):
        for scale_low in (1.0, 4.0):
            f = rng.normal(size=(size, 2 * size))
            f[0] *= scale_low  # spread the top of the spectrum
            g = f @ f.T
            g = (g + g.T) / 2.0
            lam_max, _ = exact_extreme_eigs(g)
            eigs = np.sort(np.linalg.eigvalsh(g))
            gap_ratio = eigs[-1] / max(eigs[-2], 1e-300)
            for iterations in (1, 2, 5, 10, 50):
                cfg = SvdoConfig(iterations=iterations, seed=args.seed)
                start = time.monotonic()
                est = power_iter_lambda(g, cfg)
                wall = time.monotonic() - start
                rel = abs(est - lam_max) / lam_max
                rows.append((size, float(gap_ratio), iterations, float(rel), wall))
    out_path = args.out
    if out_path:
        os.makedirs(out_path, exist_ok=True)
        write_csv(os.path.join(out_path, "power_iter_bench.csv"), BENCH_HEADER, rows)
    else:
        print(",".join(BENCH_HEADER))
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidlab",
                                     description="desk-scale re-id experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one variant")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--variant", default="",
                         help="comma list of enabled flags: pam,cam,of,ow,triplet")
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="run the variant grid")
    p_ablate.add_argument("--config", default=None)
    p_ablate.add_argument("--seeds", default="0,1,2")
    p_ablate.add_argument("--out", required=True)
    p_ablate.set_defaults(func=cmd_ablate)

    p_diag = sub.add_parser("diagnose", help="correlation/condition diagnostics")
    p_diag.add_argument("--checkpoint", required=True,
                        help="output directory of a train run")
    p_diag.add_argument("--out", required=True)
    p_diag.set_defaults(func=cmd_diagnose)

    p_check = sub.add_parser("check", help="gradient and oracle self-checks")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--out", default=None)
    p_check.set_defaults(func=cmd_check)

    p_bench = sub.add_parser("bench-power-iteration",
                             help="estimator accuracy/latency table")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(func=cmd_bench_power_iteration)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
