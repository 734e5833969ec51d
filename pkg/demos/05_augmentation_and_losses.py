"""Style augmentation of a DRR and the training-loss kernels on the bundled fixtures.

Run: python3 demos/05_augmentation_and_losses.py
"""
from pathlib import Path

import numpy as np

from ppcreg import losses
from ppcreg.augment import apply, sample_augmentation
from ppcreg.cli import loss_selftest_values
from ppcreg.drr import BONE, render, write_pgm
from ppcreg.geometry import RigidTransform, carm_geometry
from ppcreg.volume import make_phantom, vertebra_stack_spec

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

img = render(make_phantom(vertebra_stack_spec()), carm_geometry(), RigidTransform.identity(), BONE)
for k in range(4):
    aug = sample_augmentation((0, k))  # gamma, brightness, inversion, noise from one seeded stream
    styled = apply(img, aug)
    write_pgm(out / f"augmented_{k}.pgm", styled.data)
    print(f"aug {k}: gamma {aug.gamma:.2f} brightness {aug.brightness:+.2f} invert {aug.invert!s:5s} "
          f"sigma {aug.noise_sigma:.3f} -> mean {styled.data.mean():.3f}")

# loss kernels (numeric only) with the published weights
print("weights: w_flow", losses.W_FLOW, "w_m", losses.W_M, "w_afe", losses.W_AFE,
      "w_bt", losses.W_BT, "w_red", losses.W_RED)
for name, got, want in loss_selftest_values():
    print(f"  {name:26s} {got: .12f} (expected {want: .12f})")

rng = np.random.default_rng(0)
Z = rng.standard_normal((32, 8))
print("Barlow Twins loss, identical views (redundancy term only):", round(losses.barlow_twins_loss(Z, Z), 6))
print("Barlow Twins loss, independent views:", round(losses.barlow_twins_loss(Z, rng.standard_normal((32, 8))), 3))
