"""
Fine-tuning for packet loss
===========================

Train a small classifier, split it, and fine-tune the halves with dropout
at the split point. The tuned model degrades more gracefully when the link
drops part of the activation.
"""

import numpy as np

from lossydi import comtune as ct
from lossydi import dipipeline as dp
from lossydi import harness as hs
from lossydi.nncore import TrainConfig

############################################################
# A small synthetic task keeps this quick

train, test = hs.gen_synthetic(7, d=16, classes=4, n_train=1500, n_test=500, spread=3.0)
cfg = TrainConfig(max_epochs=40, patience=8, seed=0)
base, history = ct.pretrain_base(train.features, train.labels, [16, 64, 32, 4], cfg)
print(f"pretrained for {history.epochs} epochs, kept epoch {history.kept_epoch}")

############################################################
# Fine-tune with r=0 (plain retraining) and r=0.5, plus an 8-bit
# quantized variant

arms = {
    "r=0": ct.ComtuneConfig(0.0, 2, train=cfg),
    "r=0.5": ct.ComtuneConfig(0.5, 2, train=cfg),
    "r=0.5 quant": ct.ComtuneConfig(0.5, 2, train=cfg, codec_kind=hs.QUANT, message_bytes=64),
}
deployments = {name: dp.Deployment.from_result(ct.fine_tune(base, train.features, train.labels, c)) for name, c in arms.items()}

############################################################
# Accuracy as the loss rate grows

rates = [0.0, 0.3, 0.5, 0.7, 0.9]
print("arm".ljust(14) + "".join(f"p={p:<6}" for p in rates))
for name, dep in deployments.items():
    accs = [dp.evaluate(dep, test.features, test.labels, p, np.random.default_rng(i)).accuracy for i, p in enumerate(rates)]
    print(name.ljust(14) + "".join(f"{a:<8.3f}" for a in accs))
