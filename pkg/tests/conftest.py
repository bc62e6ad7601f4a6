import pytest

from reidlab.cli import train_with_diagnostics
from reidlab.config import Config
from reidlab.network import VariantSpec

ACCEPTANCE_VARIANTS = (
    "baseline",
    "pam,cam",
    "of,ow",
    "pam,cam,of,ow",
    "pam,cam,of,ow,triplet",
)
ACCEPTANCE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def trained_grid():
    """Default-config training runs shared by the directional criteria.

    Keyed by (variant flags, seed); each value carries retrieval metrics,
    per-site correlation means, and the wall time of the run.
    """
    cfg = Config()
    grid = {}
    for flags in ACCEPTANCE_VARIANTS:
        variant = VariantSpec.from_flags(flags)
        for seed in ACCEPTANCE_SEEDS:
            grid[(flags, seed)] = train_with_diagnostics(cfg, variant, seed)
    return grid
