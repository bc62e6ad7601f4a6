"""Quick probe: selected variants x 3 seeds for a config override."""
import sys

import numpy as np

sys.path.insert(0, "src")

from reidlab.cli import train_with_diagnostics
from reidlab.config import parse_config_text
from reidlab.network import VariantSpec

override = sys.argv[1] if len(sys.argv) > 1 else ""
variants = sys.argv[2].split(";") if len(sys.argv) > 2 else ["baseline", "of,ow"]
cfg = parse_config_text(override)
print("override:", override.replace("\n", " | "))

means = {}
for flags in variants:
    variant = VariantSpec.from_flags(flags)
    maps, corrs = [], []
    for seed in (0, 1, 2):
        out = train_with_diagnostics(cfg, variant, seed)
        maps.append(out["metrics"]["map"])
        corrs.append(out["corr"]["attentive_prepool"])
        print(f"{variant.label:24s} seed={seed} map={maps[-1]:.4f} "
              f"train_top1={out['metrics']['train_top1']:.4f} "
              f"corr_pre={corrs[-1]:.4f} ({out['seconds']:.0f}s)", flush=True)
    means[variant.label] = (np.mean(maps), np.mean(corrs))
    print(f"--- {variant.label:20s} mean map={np.mean(maps):.4f} "
          f"corr={np.mean(corrs):.4f}", flush=True)
print({k: (round(v[0], 4), round(v[1], 4)) for k, v in means.items()})
