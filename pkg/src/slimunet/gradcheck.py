"""Central finite-difference checks of every differentiable op and loss.

Each check builds a random float64 instance from a seed, contracts the op's
output with a fixed random projection to get a scalar, and compares the
analytic gradient against central differences (step ``1e-5``) over every
input element. The error is ``|a - n| / max(|a|, |n|)`` in the 2-norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .network import Network, build_slim_unet, build_std_unet, init_params

STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def _away_from_zero(rng, shape, low=0.05):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(low, 1.0, shape)


def _check(f, analytic: dict, inputs: dict) -> float:
    return max(rel_error(analytic[k], numeric_grad(f, inputs[k])) for k in inputs)


def check_conv(rng, k=3):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(k, k, 2, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(1, 3, 5, 5))
    f = lambda: float(np.sum(ad.conv_forward(x, w, b) * r))
    gx, gw, gb = ad.conv_backward(x, w, r)
    return _check(f, {"x": gx, "w": gw, "b": gb}, {"x": x, "w": w, "b": b})


def check_batchnorm(rng, mode="train"):
    x = rng.normal(size=(2, 3, 3, 3))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.normal(size=3)
    r = rng.normal(size=x.shape)
    mm, mv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

    def f():
        out, _ = ad.batchnorm_forward(x, gamma, beta, mode, mm.copy(), mv.copy())
        return float(np.sum(out * r))

    _, cache = ad.batchnorm_forward(x, gamma, beta, mode, mm.copy(), mv.copy())
    gx, gg, gb = ad.batchnorm_backward(r, cache)
    return _check(f, {"x": gx, "gamma": gg, "beta": gb}, {"x": x, "gamma": gamma, "beta": beta})


def check_relu(rng):
    x = _away_from_zero(rng, (2, 2, 4, 4))
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(ad.relu_forward(x) * r))
    return _check(f, {"x": ad.relu_backward(x, r)}, {"x": x})


def check_sigmoid(rng):
    x = rng.normal(scale=3, size=(2, 2, 4, 4))
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(ad.sigmoid_forward(x) * r))
    return _check(f, {"x": ad.sigmoid_backward(ad.sigmoid_forward(x), r)}, {"x": x})


def check_dropout(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    r = rng.normal(size=x.shape)
    seed = int(rng.integers(2**31))

    def f():
        out, _ = ad.dropout_forward(x, 0.125, ad.make_rng(seed), "train")
        return float(np.sum(out * r))

    _, mask = ad.dropout_forward(x, 0.125, ad.make_rng(seed), "train")
    return _check(f, {"x": ad.dropout_backward(r, mask)}, {"x": x})


def check_maxpool(rng):
    # distinct values spaced well beyond the FD step so no window is near a tie
    x = (rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) + rng.uniform(0, 0.5, (2, 2, 4, 4))) * 0.1
    r = rng.normal(size=(2, 2, 2, 2))
    f = lambda: float(np.sum(ad.maxpool_forward(x)[0] * r))
    _, idx = ad.maxpool_forward(x)
    return _check(f, {"x": ad.maxpool_backward(r, idx)}, {"x": x})


def check_upsample(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    r = rng.normal(size=(2, 2, 6, 6))
    f = lambda: float(np.sum(ad.upsample_forward(x) * r))
    return _check(f, {"x": ad.upsample_backward(r)}, {"x": x})


def check_concat(rng):
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    r = rng.normal(size=(2, 5, 3, 3))
    f = lambda: float(np.sum(ad.concat_forward(a, b) * r))
    ga, gb = ad.concat_backward(r, 2)
    return _check(f, {"a": ga, "b": gb}, {"a": a, "b": b})


def _loss_check(value_fn, grad_fn):
    def check(rng):
        y_p = rng.uniform(0.05, 0.95, (2, 1, 4, 4))
        y_t = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
        f = lambda: value_fn(y_p, y_t)
        return _check(f, {"y_p": grad_fn(y_p, y_t)}, {"y_p": y_p})
    return check


def _composite(kind):
    spec = losses.LossSpec(kind)
    return _loss_check(lambda p, t: losses.composite_loss(spec, p, t)[0],
                       lambda p, t: losses.composite_loss(spec, p, t)[1])


def _branch_pattern(net: Network) -> bytes:
    """Which side of every ReLU / max-pool decision the last forward took."""
    parts = []
    for layer in net.layers:
        if isinstance(layer, ad.ReLU):
            parts.append(np.packbits(layer._cache > 0).tobytes())
        elif isinstance(layer, ad.MaxPool):
            parts.append(layer._cache.astype(np.uint8).tobytes())
    return b"".join(parts)


def check_network(rng, build=build_slim_unet, max_draws=20):
    """Directional derivative of a tiny U-Net through all layers and skips.

    Draws whose +/- perturbations land on different sides of a ReLU or
    max-pool decision are non-smooth at this step and are redrawn.
    """
    for _ in range(max_draws):
        error = _network_instance(rng, build)
        if error is not None:
            return error
    raise RuntimeError("could not draw a kink-free network instance")


def _network_instance(rng, build):
    graph = build(2, (1, 16, 16))
    net = Network(graph, dropout=0.125, dtype=np.float64)
    init_params(net, rng)
    # zero biases leave exact-zero ReLU inputs behind dead channels, where the
    # one-sided slopes differ and central differences average them
    for layer in net.layers:
        if isinstance(layer, ad.Conv2D):
            layer.bias.data[...] = rng.normal(0, 0.1, layer.bias.data.shape)
    x = rng.normal(size=(2, 1, 16, 16))
    y_t = (rng.random((2, 1, 16, 16)) < 0.4).astype(np.float64)
    spec = losses.LossSpec("L_DJB")
    drop_seed = int(rng.integers(2**31))
    params = net.params()
    directions = [rng.normal(size=p.data.shape) for p in params]
    dx = rng.normal(size=x.shape)
    norm = np.sqrt(sum(np.sum(d * d) for d in directions) + np.sum(dx * dx))
    directions = [d / norm for d in directions]
    dx /= norm

    def loss_at(t):
        for p, d in zip(params, directions):
            p.data += t * d
        net.set_rng(ad.make_rng(drop_seed))
        value = losses.composite_loss(spec, net.forward(x + t * dx, "train"), y_t)[0]
        for p, d in zip(params, directions):
            p.data -= t * d
        return value, _branch_pattern(net)

    up, pattern_up = loss_at(STEP)
    down, pattern_down = loss_at(-STEP)
    net.zero_grad()
    net.set_rng(ad.make_rng(drop_seed))
    _, grad = losses.composite_loss(spec, net.forward(x, "train"), y_t)
    if not pattern_up == pattern_down == _branch_pattern(net):
        return None
    gx = net.backward(grad)
    analytic = float(np.sum(gx * dx) + sum(np.sum(p.grad * d) for p, d in zip(params, directions)))
    return rel_error(analytic, (up - down) / (2 * STEP))


CHECKS = {
    "conv3x3": check_conv,
    "conv1x1": lambda rng: check_conv(rng, 1),
    "batchnorm_train": check_batchnorm,
    "batchnorm_infer": lambda rng: check_batchnorm(rng, "infer"),
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "dropout": check_dropout,
    "maxpool2x2": check_maxpool,
    "upsample2x2": check_upsample,
    "concat_channels": check_concat,
    "bce": _loss_check(losses.bce_loss, losses.bce_grad),
    "dice": _loss_check(losses.dice_loss, losses.dice_grad),
    "jaccard": _loss_check(losses.jaccard_loss, losses.jaccard_grad),
    "dice_per_image": _loss_check(lambda p, t: losses.dice_loss(p, t, 1.0, "image"),
                                  lambda p, t: losses.dice_grad(p, t, 1.0, "image")),
    "jaccard_per_image": _loss_check(lambda p, t: losses.jaccard_loss(p, t, 1.0, "image"),
                                     lambda p, t: losses.jaccard_grad(p, t, 1.0, "image")),
    "L_D": _composite("L_D"),
    "L_DJ": _composite("L_DJ"),
    "L_DJB": _composite("L_DJB"),
}

NETWORK_CHECKS = {
    "slim_unet": check_network,
    "std_unet": lambda rng: check_network(rng, build_std_unet),
}


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(instances: int = 100, seed: int = 0, network_instances: int = 3,
              names=None) -> list[CheckResult]:
    """Run every check on ``instances`` seeded draws; returns one result per check."""
    results = []
    table = dict(CHECKS)
    table.update(NETWORK_CHECKS)
    for name, fn in table.items():
        if names is not None and name not in names:
            continue
        n = network_instances if name in NETWORK_CHECKS else instances
        worst = max(fn(ad.make_rng(seed, "gradcheck", name, i)) for i in range(n)) if n else 0.0
        results.append(CheckResult(name, n, worst))
    return results
