"""
Learning feedback gates on the bar task
========================================

A frozen maxout net looks at each image several times. After every pass a
linear policy reads the mean activation of each map, the classifier's
hidden units and the class probabilities, and picks a positive gate per
map for the next pass. The policy is evolved with SNES.
"""

import tempfile
from pathlib import Path

import numpy as np

from dasnet import cli, dataio
from dasnet import maxoutnet as mn
from dasnet import trainer as tr
from dasnet.numerics import RngStream
from dasnet.policy import PolicyParams

seed = 2015
rng = RngStream(seed)

# Same preprocessing as the command line tool: contrast normalization,
# a validation hold-out, then ZCA fit on the training split.
full = dataio.make_toy_dataset(RngStream(seed, 1), 7000, 4, 16)
pool, test = dataio.split_validation(full, 1000)
test.split = "test"
workdir = Path(tempfile.mkdtemp())
cli.prepare(pool, test, workdir, {"dataset": "toy"}, 1000, 1e-2)
meta, splits = cli.load_prepared(workdir)
train, val, test = splits["train"], splits["val"], splits["test"]

net = mn.build_preset("toy", tuple(meta["image_shape"]), meta["classes"], rng.spawn(1))
mn.train_supervised(net, train, mn.SgdConfig(learning_rate=0.02, batch_size=32, epochs=20), rng.spawn(2), val)
print(f"base net test accuracy {mn.accuracy(net, test):.4f}")

# The zero policy gives every gate the value 1, so it reproduces the base net.
zero = PolicyParams.zeros(net)
print("zero policy accuracy:", tr.policy_accuracy(net, zero, test, 2))

config = tr.DasNetConfig(steps=2, population=50, batch_size=128, max_generations=200, seed=seed)
params, hist = tr.train_policy(net, train, val, config)
for row in hist:
    if row["val_acc"] is not None:
        print(f"gen {row['generation']:3d}  mean cost {row['mean_cost']:7.3f}  val {row['val_acc']:.4f}")
print(f"policy test accuracy at T=2: {tr.policy_accuracy(net, params, test, 2):.4f}")

# Running past the training horizon: the accuracy per pass.
curve = tr.dynamics_sweep(net, params, test, 9)
print("accuracy by pass:", " ".join(f"{a:.3f}" for a in curve))

# The final gates alone carry class information.
probe = tr.probe_gates(net, params, train, test, 2)
print(f"gate probe: 15-NN {probe.knn:.3f}  logistic {probe.logreg:.3f}  majority {probe.majority:.3f}")

# Which maps did the policy turn up for one test image?
report = tr.emphasis_report(net, params, test.images[0], 2)
rows = sorted(report.rows, key=lambda r: r[4])
print("most suppressed (layer, map, delta):", [(r[0], r[1], round(r[4], 3)) for r in rows[:3]])
print("most boosted (layer, map, delta):", [(r[0], r[1], round(r[4], 3)) for r in rows[-3:]])
print("class probabilities by pass:\n", np.round(report.probs, 3))
