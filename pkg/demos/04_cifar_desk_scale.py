"""
Desk-scale run on CIFAR-10
===========================

Needs the binary CIFAR-10 batches. Point ``DASNET_CIFAR10_DIR`` at the
directory holding ``data_batch_1.bin`` ... ``test_batch.bin`` (or at its
parent). The run takes well under an hour on a desktop CPU.

The same steps are available from the shell::

    dasnet prepare-data --dataset cifar10 --in $DASNET_CIFAR10_DIR --out prep --train-subset 6000 --val-count 1000
    dasnet train-base --config run.json
    dasnet train-policy --config run.json --model out/model.dnet
    dasnet eval --model out/model.dnet --data prep --policy out/policy.dpol --steps 2
"""

import sys
import tempfile
from pathlib import Path

from dasnet import cli, dataio
from dasnet import maxoutnet as mn
from dasnet import trainer as tr
from dasnet.numerics import RngStream

root = dataio.cifar_dir_from_env("cifar10")
if root is None:
    sys.exit("set DASNET_CIFAR10_DIR to the CIFAR-10 binary batches")

seed = 2015
rng = RngStream(seed, 2)

# 6000 random training images: 5000 to train on, 1000 held out for validation.
train = dataio.subset(dataio.load_cifar(root, "cifar10", "train"), 6000, rng.spawn(1))
test = dataio.load_cifar(root, "cifar10", "test")
workdir = Path(tempfile.mkdtemp())
cli.prepare(train, test, workdir, {"dataset": "cifar10"}, 1000, 1e-2)
meta, splits = cli.load_prepared(workdir)

net = mn.build_preset("desk", tuple(meta["image_shape"]), meta["classes"], RngStream(seed).spawn(1))
print("gates per pass:", net.gate_dimension)
log = mn.train_supervised(net, splits["train"], mn.SgdConfig(learning_rate=0.02, batch_size=32, epochs=30),
                          RngStream(seed).spawn(2), splits["val"])
print(f"base net: val {log[-1]['val_acc']:.4f}, test {mn.accuracy(net, splits['test']):.4f}")

config = tr.DasNetConfig(steps=2, population=50, batch_size=128, max_generations=200, seed=seed, threads=4)
params, hist = tr.train_policy(net, splits["train"], splits["val"], config, checkpoint_dir=workdir / "ckpt")
print(f"mean cost: generation 0 {hist[0]['mean_cost']:.2f}, last {hist[-1]['mean_cost']:.2f}")
print(f"dasNet test accuracy at T=2: {tr.policy_accuracy(net, params, splits['test'], 2):.4f}")
print("accuracy by pass:", tr.dynamics_sweep(net, params, splits["test"], 9))
