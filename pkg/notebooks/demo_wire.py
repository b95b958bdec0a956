"""
Split inference over real UDP
=============================

Serve the output half of a split model on a loopback socket and stream
test rows to it from the input half, dropping datagrams on purpose.
"""

import numpy as np

from lossydi import comtune as ct
from lossydi import harness as hs
from lossydi import wire
from lossydi.channel import PACKET_LEVEL, ChannelConfig
from lossydi.dipipeline import Deployment
from lossydi.nncore import TrainConfig

############################################################
# Train and tune a small model

train, test = hs.gen_synthetic(3, d=16, classes=4, n_train=1500, n_test=300, spread=3.0)
cfg = TrainConfig(max_epochs=30, patience=6, seed=0)
base, _ = ct.pretrain_base(train.features, train.labels, [16, 128, 32, 4], cfg)
tuned = ct.fine_tune(base, train.features, train.labels, ct.ComtuneConfig(0.5, 2, train=cfg))
dep = Deployment.from_result(tuned, ChannelConfig(mode=PACKET_LEVEL), float32_messages=True)
print(f"message: {dep.message_bytes} bytes in {dep.packet_count} datagrams")

############################################################
# One message on the wire: a 16-byte header, then float32 values in
# shuffled element order

dgrams = wire.encode_datagrams(np.arange(dep.message_length, dtype=float), dep, message_id=0)
header, values = wire.decode_datagram(dgrams[0])
print(header, values[:4])

############################################################
# Serve and send with 40% injected loss; the server compensates at p=0.4

p = 0.4
server = wire.Server(dep, wire.ServerConfig(loss_rate=p, idle_timeout_s=1.0))
thread = server.start()
host, port = server.address
sent = wire.send(dep, test.features, wire.SenderConfig(f"{host}:{port}", p, rate=1000, seed=1))
thread.join()
records = wire.fill_missing(server.records, range(len(test.labels)), dep, p)
acc = np.mean([r.outcome.predicted_class == y for r, y in zip(records, test.labels)])
frac = np.mean([r.outcome.fraction_received for r in records])
print(f"sent {sent.datagrams} datagrams, dropped {sent.dropped}")
print(f"served {len(records)} messages: accuracy {acc:.3f}, mean fraction received {frac:.3f}")
