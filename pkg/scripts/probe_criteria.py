"""Probe acceptance criteria 6/7 across seeds for a given config override."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from reidlab.cli import train_with_diagnostics
from reidlab.config import parse_config_text
from reidlab.network import VariantSpec

VARIANTS = ["baseline", "pam,cam", "of,ow", "pam,cam,of,ow", "pam,cam,of,ow,triplet"]
SEEDS = [0, 1, 2]

override = sys.argv[1] if len(sys.argv) > 1 else ""
cfg = parse_config_text(override)
print("override:", override.replace("\n", " | "))

rows = []
for flags in VARIANTS:
    variant = VariantSpec.from_flags(flags)
    for seed in SEEDS:
        out = train_with_diagnostics(cfg, variant, seed)
        row = dict(variant=variant.label, seed=seed, **out["metrics"],
                   corr_ta=out["corr"]["t_a"],
                   corr_pre=out["corr"]["attentive_prepool"],
                   corr_tg=out["corr"]["t_g"], wall=out["seconds"])
        rows.append(row)
        print(f"{variant.label:24s} seed={seed} map={row['map']:.4f} "
              f"top1={row['top1']:.4f} train_top1={row['train_top1']:.4f} "
              f"corr_ta={row['corr_ta']:.4f} corr_pre={row['corr_pre']:.4f} "
              f"({row['wall']:.0f}s)", flush=True)

print("\n=== per-variant means ===")
for flags in VARIANTS:
    label = VariantSpec.from_flags(flags).label
    sel = [r for r in rows if r["variant"] == label]
    mean = lambda k: np.mean([r[k] for r in sel])
    print(f"{label:24s} map={mean('map'):.4f} top1={mean('top1'):.4f} "
          f"train_top1={mean('train_top1'):.4f} corr_ta={mean('corr_ta'):.4f} "
          f"corr_pre={mean('corr_pre'):.4f} corr_tg={mean('corr_tg'):.4f}")
