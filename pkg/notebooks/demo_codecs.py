"""
Squeezing the split activation into a byte budget
=================================================

Two ways to fit a 256-float activation into 1/16 of its size: fewer bits
per element, or fewer elements.
"""

import numpy as np

from lossydi import codec as cdc

############################################################
# Correlated activations standing in for a hidden layer

rng = np.random.default_rng(0)
latent = rng.normal(size=(2000, 24))
acts = np.maximum(latent @ rng.normal(size=(24, 256)) * 0.3, 0.0)
full_bytes = 256 * 4
budget = full_bytes // 16

############################################################
# Min/max quantization calibrated on the data

bits = cdc.bits_for_budget(budget, full_bytes)
quant = cdc.calibrate_quantizer(acts, bits)
recon_q = cdc.dequantize(cdc.quantize(acts, quant), quant)
print(f"quantizer: {bits} bits per element, rms error {np.sqrt(np.mean((recon_q - acts) ** 2)):.4f}")

############################################################
# PCA keeps the leading directions and folds the mean of the rest into a
# bias, so a dropped coefficient falls back to the data mean.

dims = cdc.dims_for_budget(budget, full_bytes, 256)
pca = cdc.fit_pca(acts, dims)
recon_p = cdc.pca_decompress(cdc.pca_compress(acts, pca), pca)
print(f"PCA: {dims} components, rms error {np.sqrt(np.mean((recon_p - acts) ** 2)):.4f}")

############################################################
# Both specs serialize to a small self-describing blob for deployment

for spec in (quant, pca):
    blob = cdc.serialize_codec(spec)
    assert cdc.deserialize_codec(blob) == spec
    print(f"{spec.kind}: {len(blob)} bytes, digest {cdc.codec_digest(spec)[:12]}")
