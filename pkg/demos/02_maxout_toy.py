"""
A small maxout convolutional net
=================================

Trains the ``toy`` preset (two conv-maxout layers, a maxout classifier and
a softmax output) on the synthetic bar images, then looks at what the
per-map gates do to the forward pass.
"""

import numpy as np

from dasnet import dataio
from dasnet import maxoutnet as mn
from dasnet.numerics import RngStream

rng = RngStream(7)

# Each image holds one oriented bar; the orientation is the class.
data = dataio.make_toy_dataset(rng.spawn(1), 2500, 4, 16)
train, test = dataio.split_validation(data, 500)
print("train", train.images.shape, "test", test.images.shape)

net = mn.build_preset("toy", (1, 16, 16), 4, rng.spawn(2))
for i, shape in enumerate(net.layer_shapes()):
    print(f"conv layer {i}: output maps {shape}")
print("gate dimension:", net.gate_dimension)

log = mn.train_supervised(net, train, mn.SgdConfig(learning_rate=0.02, batch_size=32, epochs=10), rng.spawn(3), test)
for row in log:
    print(f"epoch {row['epoch']:2d}  loss {row['train_loss']:.3f}  train {row['train_acc']:.3f}  test {row['val_acc']:.3f}")

# All-ones gates leave the net untouched, bit for bit.
x = test.images[:8]
plain = mn.forward(net, x)
ones = mn.forward(net, x, np.ones(net.gate_dimension))
print("all-ones gates bit-identical:", np.array_equal(plain.probs, ones.probs))

# Silencing the first layer turns every later activation into bias only,
# so all images get the same prediction.
gates = np.ones(net.gate_dimension)
gates[net.gate_slices[0]] = 0.0
print("first layer off, predictions:", np.argmax(mn.forward(net, x, gates).probs, axis=1))

# Doubling one last-layer gate doubles that map and nothing else.
gates = np.ones(net.gate_dimension)
gates[net.gate_slices[-1].start] = 2.0
ratio = mn.forward(net, x, gates).layers[-1][:, 0] / np.where(plain.layers[-1][:, 0] == 0, 1, plain.layers[-1][:, 0])
print("ratio on boosted map:", np.unique(np.round(ratio[plain.layers[-1][:, 0] != 0], 12)))
