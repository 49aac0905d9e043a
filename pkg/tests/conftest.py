import numpy as np
import pytest

from dasnet import dataio
from dasnet.maxoutnet import LayerSpec, build_net, build_preset, loss_and_grads
from dasnet.numerics import RngStream

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}")


def perturbed(net, rng, scale=0.1):
    """Add noise to every parameter so biases and ties are non-degenerate."""
    for k, v in net.params.items():
        net.params[k] = v + scale * rng.normal(v.shape)
    return net


def make_micro_net(seed=3, dropout=0.0):
    """8x8 input, two conv-maxout layers, three classes."""
    rng = RngStream(seed)
    conv = [
        LayerSpec("conv", 2, 6, 2, kernel=3, pool_window=2, pool_stride=2, dropout=dropout),
        LayerSpec("conv", 3, 4, 2, kernel=2, dropout=dropout),
    ]
    net = build_net((2, 8, 8), conv, hidden=4, hidden_block=2, classes=3, rng=rng)
    return perturbed(net, rng.spawn(99))


def fd_check(net, x, y, mode="eval", seed=None, h=1e-5):
    """Largest violation of |g - fd| <= max(1e-4 * max(|g|, |fd|), 1e-7) over all parameters."""

    def loss():
        rng = RngStream(seed) if seed is not None else None
        return loss_and_grads(net, x, y, mode, rng)[0]

    _, grads, _ = loss_and_grads(net, x, y, mode, RngStream(seed) if seed is not None else None)
    worst = 0.0
    for name, w in net.params.items():
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = loss()
            w[idx] = orig - h
            down = loss()
            w[idx] = orig
            fd = (up - down) / (2 * h)
            g = grads[name][idx]
            allowed = max(1e-4 * max(abs(g), abs(fd)), 1e-7)
            worst = max(worst, abs(g - fd) / allowed)
    return worst


def covariance_oracle(x):
    """Biased covariance with explicit double loop over feature pairs."""
    n, d = x.shape
    means = [sum(x[r, i] for r in range(n)) / n for i in range(d)]
    cov = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            cov[i, j] = sum((x[r, i] - means[i]) * (x[r, j] - means[j]) for r in range(n)) / n
    return cov


@pytest.fixture
def micro_net():
    return make_micro_net()


@pytest.fixture
def toy_net():
    return perturbed(build_preset("toy", (1, 16, 16), 4, RngStream(11)), RngStream(12), 0.05)


@pytest.fixture(scope="session")
def toy_data():
    return dataio.make_toy_dataset(RngStream(5), 400, 4, 16)


@pytest.fixture
def images(toy_data):
    return toy_data.images[:6]


def fixed_seed_array(seed, shape):
    return RngStream(seed).normal(shape)


np.set_printoptions(precision=6, suppress=True)


def fitness_oracle(net, theta, images, labels, steps, lc=0.005, lm=1.0, l2=0.005):
    """Scalar recomputation of the candidate fitness, one image at a time.

    Gates come from an explicit exp/sum loop over policy rows, and the loss
    and norm are accumulated with Python floats.
    """
    import math

    from dasnet.maxoutnet import forward

    def obs(trace):
        parts = [float(np.mean(m)) for layer in trace.layers for m in layer]
        return parts + [float(v) for v in trace.hidden] + [float(v) for v in trace.probs]

    total = 0.0
    for img, lab in zip(images, labels):
        trace = forward(net, img)
        for _ in range(steps):
            o = obs(trace)
            logits = [sum(w * x for w, x in zip(row, o)) for row in theta]
            top = max(logits)
            z = [math.exp(v - top) for v in logits]
            gates = np.array([len(z) * v / sum(z) for v in z])
            trace = forward(net, img, gates)
        p = [float(v) for v in trace.probs]
        correct = max(range(len(p)), key=lambda c: (p[c], -c)) == int(lab)
        total += -(lc if correct else lm) * math.log(p[int(lab)])
    norm = math.sqrt(sum(float(w) ** 2 for row in theta for w in row))
    return total + l2 * norm
