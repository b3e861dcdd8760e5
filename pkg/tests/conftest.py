"""Shared fixtures and an independently written reference network.

The reference code below does not import the model code; it reads plain
weight dictionaries and re-derives the residual MLP, its backward pass and
the SGD update from scratch.  Tests compare the package against it.
"""

import zlib

import numpy as np
import pytest

from accordion.arch import ArchSpec, build
from accordion.data import SpiralSpec, make_splits


def ref_rng(seed, *stream):
    words = [seed] + [zlib.crc32(s.encode()) if isinstance(s, str) else s for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def ref_transition(w_in, w_out, h, matrix=None):
    if w_in == w_out:
        return h
    if w_in == 2 * w_out:
        return (h[:, 0::2] + h[:, 1::2]) * h.dtype.type(0.5)
    return h @ matrix.T


def ref_forward(weights, spec, x, active=None, matrices=None):
    """Plain residual MLP; ``active`` is a set of (block, pos) or None for all."""
    h = np.maximum(x @ weights["stem.W"].T + weights["stem.b"], np.float32(0))
    for b, width in enumerate(spec.block_widths):
        if b:
            m = None if matrices is None else matrices[b - 1]
            h = ref_transition(spec.block_widths[b - 1], width, h, m)
        for k in range(spec.units_per_block):
            if active is not None and (b, k) not in active:
                continue
            p = f"unit.{b}.{k}."
            r = np.maximum(h @ weights[p + "W1"].T + weights[p + "b1"], np.float32(0))
            h = h + (r @ weights[p + "W2"].T + weights[p + "b2"])
    return h @ weights["head.W"].T + weights["head.b"]


def ref_no_skip_train(weights, spec, data, epochs, batch, lr_at, momentum, wd, seed):
    """Full-depth minibatch SGD written without the package (equal widths only)."""
    w = {k: v.copy() for k, v in weights.items()}
    vel = {}
    n = len(data.y)
    K = spec.units_per_block
    for epoch in range(epochs):
        lr = lr_at(epoch)
        order = ref_rng(seed, "shuffle", epoch).permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            x, y = data.x[idx], data.y[idx]
            # forward with caches
            pre = x @ w["stem.W"].T + w["stem.b"]
            h = np.maximum(pre, np.float32(0))
            caches = []
            for b in range(spec.num_blocks):
                for k in range(K):
                    p = f"unit.{b}.{k}."
                    a = h @ w[p + "W1"].T + w[p + "b1"]
                    r = np.maximum(a, np.float32(0))
                    caches.append((p, h, a, r))
                    h = h + (r @ w[p + "W2"].T + w[p + "b2"])
            z = h @ w["head.W"].T + w["head.b"]
            # softmax cross-entropy gradient
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            prob = e / e.sum(axis=1, keepdims=True)
            prob[np.arange(len(y)), y] -= 1
            g = prob / np.float32(len(y))
            grads = {"head.W": g.T @ h, "head.b": g.sum(axis=0)}
            g = g @ w["head.W"]
            for p, h_in, a, r in reversed(caches):
                grads[p + "W2"] = g.T @ r
                grads[p + "b2"] = g.sum(axis=0)
                ga = np.where(a > 0, g @ w[p + "W2"], np.float32(0))
                grads[p + "W1"] = ga.T @ h_in
                grads[p + "b1"] = ga.sum(axis=0)
                g = g + ga @ w[p + "W1"]
            g = np.where(pre > 0, g, np.float32(0))
            grads["stem.W"] = g.T @ x
            grads["stem.b"] = g.sum(axis=0)
            for name, gr in grads.items():
                if wd:
                    gr = gr + wd * w[name]
                if momentum:
                    vel[name] = gr.copy() if name not in vel else momentum * vel[name] + gr
                    gr = vel[name]
                w[name] = w[name] - lr * gr
    return w


@pytest.fixture(scope="session")
def desk_spec():
    return ArchSpec()


@pytest.fixture(scope="session")
def small_spec():
    return ArchSpec(input_dim=2, block_widths=(8, 8, 8), units_per_block=3, num_classes=3)


@pytest.fixture(scope="session")
def desk_data():
    return make_splits(SpiralSpec())


@pytest.fixture(scope="session")
def small_data():
    return make_splits(SpiralSpec(train=600, val=300, test=300, seed=5))


@pytest.fixture
def small_model(small_spec):
    return build(small_spec, seed=3)


def curve_table(model, schemes=("coml", "blockcoml"), top=0.6, floor=0.03):
    """Profile table with true sizes and a made-up error curve falling in n."""
    from accordion.arch import DepthConfig, Scheme, size_of
    from accordion.profile import ProfileEntry, ProfileTable

    N = model.spec.total_units
    entries = []
    for scheme in schemes:
        for n in range(1, N + 1):
            rep = size_of(model, DepthConfig(Scheme.parse(scheme), n))
            err = floor + (top - floor) * (N - n) / max(N - 1, 1)
            entries.append(ProfileEntry(scheme, n, rep.size_bits, rep.mac_count,
                                        rep.layer_fraction, err))
    return ProfileTable("curve", entries)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)
