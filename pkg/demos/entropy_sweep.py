"""Sharper backgrounds carry more entropy: bits/dim rises as the blur shrinks."""
from flowlab.expcli.config import DEFAULTS
from flowlab.expcli.runners import run_entropy_sweep

for row in run_entropy_sweep(dict(DEFAULTS["sweep"]), seed=0):
    print(f"blur {row['blur_sigma']:>4g}: accuracy {row['accuracy']:.3f}, "
          f"bits/dim {row['bits_per_dim']:.2f}, "
          f"interpolations in distribution {row['interpolation_fraction']:.2f}")
