"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from dr2net.model import init_model, loss_and_grads
from dr2net.sensing import make_operator
from dr2net.tensor import batchnorm_forward, conv2d_forward, finite_difference_check, relu


def float64_model(m=12, blocks=1, seed=0, conv_std=0.05):
    """Small double-precision model with non-trivial residual weights.

    Batchnorm outputs are placed far from the ReLU kink (beta = +-2 per
    channel, gamma ~ 0.3), so the loss is differentiable in a neighbourhood
    of the point and central differences are meaningful. Channels with
    beta = -2 are switched off, so masked paths are exercised too.
    """
    model = init_model(m, blocks, seed, make_operator(m, seed=seed)).astype(np.float64)
    r = np.random.default_rng(seed + 100)
    for name, p in model.parameters().items():
        if not name.startswith("blocks."):
            continue
        if name.endswith("weight"):
            p[...] = r.standard_normal(p.shape) * conv_std
        elif name.endswith("gamma"):
            p[...] = 0.3 + 0.02 * r.standard_normal(p.shape)
        elif name.endswith("beta"):
            p[...] = 2.0 * r.choice([-1.0, 1.0], p.shape)
        else:
            p[...] = 0.05 * r.standard_normal(p.shape)
    return model


def end_to_end_gradient_error(model, batch=2, seed=0, per_param=25, eps=1e-6, noise=3e-5):
    """Worst relative error between ``loss_and_grads`` and central differences
    of the train-mode loss, over a random subset of entries of every parameter.

    Targets sit close to the current prediction. Round-off in the quotient
    grows with the residual size while truncation error, relative to the
    gradient, shrinks with it; a residual of ~3e-5 per pixel with a 1e-6
    step keeps both well under 1e-3 for exactly-zero gradients (biases
    ahead of a batchnorm, switched-off channels) and for the rest.
    """
    r = np.random.default_rng(seed)
    Y = r.standard_normal((batch, model.m))
    X = _train_prediction(model, Y) + noise * r.standard_normal((batch, 1089))
    _, grads = loss_and_grads(model, Y, X, mode="train", update_stats=False)
    worst = {}
    for name, p in model.parameters().items():
        def f(v, p=p):
            saved = p.copy()
            p[...] = v
            loss, _ = loss_and_grads(model, Y, X, mode="train", update_stats=False,
                                     need_grads=False)
            p[...] = saved
            return loss
        idx = r.choice(p.size, min(per_param, p.size), replace=False)
        worst[name] = finite_difference_check(f, p, grads[name], eps, idx)
    return worst


def _train_prediction(model, Y):
    """Train-mode forward pass, straight-line over the layer calls."""
    h = Y @ model.linear.params["weight"].T + model.linear.params["bias"]
    x = h.reshape(-1, 1, 33, 33)
    out = x.copy()
    for block in model.blocks:
        a = conv2d_forward(x, block.conv1.params["weight"], block.conv1.params["bias"], 5)
        a, _ = batchnorm_forward(a, block.bn1.params["gamma"], block.bn1.params["beta"], "train",
                                 block.bn1.stats, update_stats=False)
        a = relu(a)
        a = conv2d_forward(a, block.conv2.params["weight"], block.conv2.params["bias"], 0)
        a, _ = batchnorm_forward(a, block.bn2.params["gamma"], block.bn2.params["beta"], "train",
                                 block.bn2.stats, update_stats=False)
        a = relu(a)
        c = conv2d_forward(a, block.conv3.params["weight"], block.conv3.params["bias"], 3)
        x = x + c
        out = out + c
    return out.reshape(-1, 1089)
