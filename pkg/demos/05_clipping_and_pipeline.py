"""Clipping the quantizer range, then the whole flow end to end.

Shrinking the observed range by (alpha, beta) trades clipping error for a
finer step. After a rotation the trade-off is U-shaped, so a small search
beats any fixed ratio. The pipeline then stacks rotation, outlier-token
weighting and clipping, scoring each stage on held-out tokens.
"""

import tempfile

import numpy as np

from quantlab.activations import SyntheticSpec, generate_synthetic
from quantlab.config import parse_config_text
from quantlab.lac import DeskBlock, optimize_clipping, output_mse, ratio_sweep
from quantlab.pipeline import run_to_directory
from quantlab.psot import OrthoTransform

X = generate_synthetic(SyntheticSpec(dim=64, n_tokens=512, outlier_rate=1 / 64, outlier_gain=20, seed=0)).data
Y = OrthoTransform.block_hadamard(64, 1).apply(X)
block = DeskBlock(np.random.default_rng(100).normal(size=(64, 32)) / 8)

ratios = (1.0, 0.95, 0.9, 0.85, 0.8)
for r, mse in zip(ratios, ratio_sweep(Y, block, 4, ratios)):
    print(f"alpha = beta = {r:.2f}  block mse {mse:.5f}")
clip, _ = optimize_clipping(Y, block, 4)
print(f"searched: alpha {clip.alpha:.3f} beta {clip.beta:.3f}  block mse {output_mse(Y, block, clip, 4):.5f}")

with tempfile.TemporaryDirectory() as out:
    report = run_to_directory(parse_config_text("seed = 0"), out)
print(f"\n{'stage':>10} {'quant mse':>10} {'block mse':>10}")
for s in report.stages:
    print(f"{s.name:>10} {s.quant_mse:>10.5f} {s.block_mse:>10.5f}")
