"""Regenerate src/mol/data/constrained.molnet.

Random 16-channel network normalized so the product of layer norms is just under 0.9,
i.e. ``I - H`` is certified 0.1-monotone.
"""
from pathlib import Path

from mol.fileio import write_checkpoint
from mol.network import NetworkConfig, global_lipschitz_bound, init_weights, spectral_normalize

out = Path(__file__).resolve().parents[1] / "src" / "mol" / "data" / "constrained.molnet"
w = init_weights(NetworkConfig(channels=16, image_shape=(32, 32)), seed=2024)
for _ in range(3):
    w = spectral_normalize(w, 0.899, power_iters=200)
write_checkpoint(out, w)
print(out, global_lipschitz_bound(w, 200))
