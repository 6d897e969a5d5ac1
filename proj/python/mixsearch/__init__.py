"""Mixed-domain architecture search for segmentation."""

import json as _json

from ._core import (
    MixsearchError,
    count_cell_space,
    default_domains,
    dice_jaccard,
    gen_domain,
    op_gradcheck,
    run_cli,
    sample_mix_weights,
    version,
)

__version__ = version()


def load_genotype(path):
    """Reads a genotype document as a plain dict."""
    with open(path, encoding="utf-8") as fh:
        return _json.load(fh)


__all__ = [
    "MixsearchError",
    "count_cell_space",
    "default_domains",
    "dice_jaccard",
    "gen_domain",
    "load_genotype",
    "op_gradcheck",
    "run_cli",
    "sample_mix_weights",
    "version",
]
