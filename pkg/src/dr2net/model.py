"""The reconstruction network: a fully-connected linear mapping from the
measurement to a 33x33 preliminary image, followed by a stack of
convolutional residual blocks that estimate the remaining error.

Each residual block is conv(11x11, 64) -> BN -> ReLU -> conv(1x1, 32) -> BN
-> ReLU -> conv(7x7, 1) with an identity shortcut around the stack. The
residual estimate is the sum of the block stack outputs, i.e. the
composition of all blocks minus its input, so a block whose parameters are
all zero contributes exactly nothing.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import CheckpointError, DimensionError, InvalidParameterError
from .sensing import BLOCK, N_PIXELS, MeasurementOperator, make_operator, rng_for
from .tensor import BatchNorm2d, Conv2d, Linear, ReLU, RunningStats, mse_loss, mse_loss_grad

FC_INIT_STD = 0.01
CONV_INIT_STD = 0.001
DEFAULT_BLOCKS = 4
MAX_BLOCKS = 8

# (name, out channels, kernel, pad)
_BLOCK_LAYOUT = (("conv1", 64, 11, 5), ("conv2", 32, 1, 0), ("conv3", 1, 7, 3))


class ResidualBlock:
    """conv-BN-ReLU, conv-BN-ReLU, conv; spatial size preserved."""

    def __init__(self, conv1, bn1, conv2, bn2, conv3):
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.conv3 = conv3
        self.relu = ReLU()

    @classmethod
    def init(cls, rng, dtype=np.float32):
        layers = {}
        c_in = 1
        for name, c_out, k, pad in _BLOCK_LAYOUT:
            w = (rng.standard_normal((c_out, c_in, k, k)) * CONV_INIT_STD).astype(dtype)
            layers[name] = Conv2d(w, np.zeros(c_out, dtype), pad)
            c_in = c_out
        bn1 = BatchNorm2d(np.ones(64, dtype), np.zeros(64, dtype), RunningStats.fresh(64, dtype))
        bn2 = BatchNorm2d(np.ones(32, dtype), np.zeros(32, dtype), RunningStats.fresh(32, dtype))
        return cls(layers["conv1"], bn1, layers["conv2"], bn2, layers["conv3"])

    def named_layers(self):
        return (("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                ("bn2", self.bn2), ("conv3", self.conv3))

    def forward(self, x, mode="infer", update_stats=True):
        """Return the conv-stack output (without the shortcut) and a cache."""
        h1, c1 = self.conv1.forward(x)
        n1, cb1 = self.bn1.forward(h1, mode, update_stats)
        r1, cr1 = self.relu.forward(n1)
        h2, c2 = self.conv2.forward(r1)
        n2, cb2 = self.bn2.forward(h2, mode, update_stats)
        r2, cr2 = self.relu.forward(n2)
        out, c3 = self.conv3.forward(r2)
        return out, (c1, cb1, cr1, c2, cb2, cr2, c3)

    def backward(self, cache, dout):
        """Gradients of the conv stack; the caller adds the shortcut term."""
        c1, cb1, cr1, c2, cb2, cr2, c3 = cache
        grads = {}
        g = self.conv3.backward(c3, dout)
        grads.update({f"conv3.{k}": v for k, v in g.param_grads.items()})
        d = self.relu.backward(cr2, g.input_grad).input_grad
        g = self.bn2.backward(cb2, d)
        grads.update({f"bn2.{k}": v for k, v in g.param_grads.items()})
        g = self.conv2.backward(c2, g.input_grad)
        grads.update({f"conv2.{k}": v for k, v in g.param_grads.items()})
        d = self.relu.backward(cr1, g.input_grad).input_grad
        g = self.bn1.backward(cb1, d)
        grads.update({f"bn1.{k}": v for k, v in g.param_grads.items()})
        g = self.conv1.backward(c1, g.input_grad)
        grads.update({f"conv1.{k}": v for k, v in g.param_grads.items()})
        return g.input_grad, grads


@dataclass
class Dr2Model:
    linear: Linear
    blocks: list[ResidualBlock]
    operator: MeasurementOperator
    seed: int = 0
    info: dict = field(default_factory=dict)

    @property
    def wf(self) -> np.ndarray:
        return self.linear.params["weight"]

    @property
    def m(self) -> int:
        return self.wf.shape[1]

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def measurement_rate(self) -> float:
        return self.m / N_PIXELS

    @property
    def dtype(self):
        return self.wf.dtype

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Learnable arrays in checkpoint order, keyed by dotted name."""
        out = OrderedDict()
        out["linear.weight"] = self.linear.params["weight"]
        out["linear.bias"] = self.linear.params["bias"]
        for b, block in enumerate(self.blocks):
            for lname, layer in block.named_layers():
                for pname, arr in layer.params.items():
                    out[f"blocks.{b}.{lname}.{pname}"] = arr
        return out

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for b, block in enumerate(self.blocks):
            for lname in ("bn1", "bn2"):
                stats = getattr(block, lname).stats
                out[f"blocks.{b}.{lname}.running_mean"] = stats.mean
                out[f"blocks.{b}.{lname}.running_var"] = stats.var
        return out

    def residual_parameters(self):
        return OrderedDict((k, v) for k, v in self.parameters().items()
                           if k.startswith("blocks."))

    def copy(self) -> "Dr2Model":
        return _rebuild(self, {k: v.copy() for k, v in self.parameters().items()},
                        {k: v.copy() for k, v in self.buffers().items()},
                        [[getattr(b, n).stats.recorded for n in ("bn1", "bn2")]
                         for b in self.blocks])

    def astype(self, dtype) -> "Dr2Model":
        return _rebuild(self, {k: v.astype(dtype) for k, v in self.parameters().items()},
                        {k: v.astype(dtype) for k, v in self.buffers().items()},
                        [[getattr(b, n).stats.recorded for n in ("bn1", "bn2")]
                         for b in self.blocks])

    def with_blocks(self, block_count: int, seed: int | None = None) -> "Dr2Model":
        """Copy with the linear layer kept and ``block_count`` fresh blocks."""
        rng = rng_for(self.seed if seed is None else seed)
        rng.standard_normal(self.wf.shape)  # keep block draws aligned with init_model
        clone = self.copy()
        clone.blocks = [ResidualBlock.init(rng, self.dtype) for _ in range(block_count)]
        return clone


def _rebuild(model, params, buffers, recorded):
    linear = Linear(params["linear.weight"], params["linear.bias"])
    blocks = []
    for b in range(len(recorded)):
        p = f"blocks.{b}."
        convs = [Conv2d(params[p + f"{name}.weight"], params[p + f"{name}.bias"], pad)
                 for name, _, _, pad in _BLOCK_LAYOUT]
        bns = []
        for i, lname in enumerate(("bn1", "bn2")):
            stats = RunningStats(buffers[p + f"{lname}.running_mean"],
                                 buffers[p + f"{lname}.running_var"], bool(recorded[b][i]))
            bns.append(BatchNorm2d(params[p + f"{lname}.gamma"], params[p + f"{lname}.beta"], stats))
        blocks.append(ResidualBlock(convs[0], bns[0], convs[1], bns[1], convs[2]))
    return Dr2Model(linear, blocks, model.operator, model.seed, dict(model.info))


def init_model(m: int, block_count: int = DEFAULT_BLOCKS, seed: int = 0,
               operator: MeasurementOperator | None = None, dtype=np.float32) -> Dr2Model:
    """Gaussian init: FC weights std 0.01, conv weights std 0.001, biases 0,
    BN gamma 1 / beta 0. Without ``operator`` a Gaussian one is drawn from ``seed``."""
    if m < 1:
        raise InvalidParameterError(f"m must be >= 1, got {m}")
    if not 0 <= block_count <= MAX_BLOCKS:
        raise InvalidParameterError(f"block_count must be in [0, {MAX_BLOCKS}], got {block_count}")
    if operator is None:
        operator = make_operator(m, N_PIXELS, seed)
    if operator.m != m:
        raise DimensionError(f"operator has m={operator.m}, model asked for m={m}")
    rng = rng_for(seed)
    wf = (rng.standard_normal((N_PIXELS, m)) * FC_INIT_STD).astype(dtype)
    linear = Linear(wf, np.zeros(N_PIXELS, dtype))
    blocks = [ResidualBlock.init(rng, dtype) for _ in range(block_count)]
    return Dr2Model(linear, blocks, operator, int(seed))


def zero_residual(model: Dr2Model) -> Dr2Model:
    """Set every residual parameter to the identity-contributing state:
    conv weights and biases 0, BN gamma 1 / beta 0, running stats (0, 1)."""
    for block in model.blocks:
        for _, layer in block.named_layers():
            if isinstance(layer, Conv2d):
                layer.params["weight"][...] = 0
                layer.params["bias"][...] = 0
            else:
                layer.params["gamma"][...] = 1
                layer.params["beta"][...] = 0
                layer.stats.mean[...] = 0
                layer.stats.var[...] = 1
                layer.stats.recorded = True
    return model


# ------------------------------------------------------------------ forward

def _as_batch(y, m):
    y = np.asarray(y)
    single = y.ndim == 1
    yb = y[None] if single else y
    if yb.ndim != 2 or yb.shape[1] != m:
        raise DimensionError(f"measurement shape {y.shape} does not match model m={m}")
    return yb, single


def linear_forward(y, model: Dr2Model) -> np.ndarray:
    """Preliminary reconstruction: (m,) -> (33, 33) or (B, m) -> (B, 33, 33)."""
    yb, single = _as_batch(y, model.m)
    out, _ = model.linear.forward(yb.astype(model.dtype, copy=False))
    out = out.reshape(-1, BLOCK, BLOCK)
    return out[0] if single else out


def _residual_batch(x4, model, mode="infer", update_stats=True, keep_cache=False):
    """x4: (B, 1, 33, 33). Returns (d_hat, caches)."""
    h = x4
    d_hat = np.zeros_like(x4)
    caches = []
    for block in model.blocks:
        c, cache = block.forward(h, mode, update_stats)
        h = h + c
        d_hat += c
        caches.append(cache if keep_cache else None)
    return d_hat, caches


def residual_forward(xhat, model: Dr2Model, mode="infer") -> np.ndarray:
    """Estimated residual for a preliminary image of shape (33, 33),
    (1, 33, 33) or (B, 1, 33, 33); output has the input's shape."""
    x = np.asarray(xhat, dtype=model.dtype)
    shape = x.shape
    if shape[-2:] != (BLOCK, BLOCK):
        raise DimensionError(f"expected trailing dims (33, 33), got {shape}")
    x4 = x.reshape(-1, 1, BLOCK, BLOCK)
    if not model.blocks:
        return np.zeros(shape, dtype=x.dtype)
    d_hat, _ = _residual_batch(x4, model, mode, update_stats=False)
    return d_hat.reshape(shape)


def dr2_forward(y, model: Dr2Model) -> np.ndarray:
    """Final reconstruction: preliminary image plus estimated residual."""
    xhat = linear_forward(y, model)
    if not model.blocks:
        return xhat
    return xhat + residual_forward(xhat, model)


# -------------------------------------------------------- loss and gradient

def loss_and_grads(model: Dr2Model, Y, X, mode="train", update_stats=True,
                   residual=True, need_grads=True):
    """End-to-end loss (mean over the batch of squared L2 errors) and the
    gradient for every learnable parameter.

    ``Y`` is (B, m), ``X`` the flattened targets (B, 1089). With
    ``residual=False`` only the linear mapping is evaluated and only its
    gradients are returned.
    """
    Y = np.asarray(Y, dtype=model.dtype)
    X = np.asarray(X, dtype=model.dtype)
    lin_out, lin_cache = model.linear.forward(Y)
    use_blocks = residual and model.blocks
    if use_blocks:
        x4 = lin_out.reshape(-1, 1, BLOCK, BLOCK)
        d_hat, caches = _residual_batch(x4, model, mode, update_stats, keep_cache=need_grads)
        pred = lin_out + d_hat.reshape(lin_out.shape)
    else:
        pred = lin_out
    loss = mse_loss(pred, X)
    if not need_grads:
        return loss, None
    dpred = mse_loss_grad(pred, X).astype(model.dtype)
    grads = OrderedDict()
    dlin = dpred
    if use_blocks:
        # h_{k+1} = h_k + c_k(h_k), output = lin + sum_k c_k = h_K
        dh = dpred.reshape(-1, 1, BLOCK, BLOCK)
        block_grads = [None] * len(model.blocks)
        for b in range(len(model.blocks) - 1, -1, -1):
            dx, g = model.blocks[b].backward(caches[b], dh)
            block_grads[b] = g
            dh = dh + dx
        dlin = dh.reshape(dpred.shape)
    lg = model.linear.backward(lin_cache, dlin)
    grads["linear.weight"] = lg.param_grads["weight"]
    grads["linear.bias"] = lg.param_grads["bias"]
    if use_blocks:
        for b, g in enumerate(block_grads):
            for lname, layer in model.blocks[b].named_layers():
                for pname in layer.params:
                    grads[f"blocks.{b}.{lname}.{pname}"] = g[f"{lname}.{pname}"]
    return loss, grads


# --------------------------------------------------------------- checkpoint

def save_model(model: Dr2Model, path) -> None:
    """Write a DR2CK checkpoint: parameters in ``parameters()`` order, then
    BN running stats in ``buffers()`` order, then the operator phi."""
    recorded = [[getattr(b, n).stats.recorded for n in ("bn1", "bn2")] for b in model.blocks]
    meta = {
        "m": model.m,
        "n": N_PIXELS,
        "measurement_rate": model.measurement_rate,
        "block_count": model.block_count,
        "seed": model.seed,
        "operator_seed": model.operator.seed,
        "bn_recorded": recorded,
        "info": model.info,
    }
    arrays = OrderedDict()
    arrays.update(model.parameters())
    arrays.update(model.buffers())
    arrays["phi"] = model.operator.phi
    write_container(path, b"DR2CK", meta, arrays)


def load_model(path) -> Dr2Model:
    meta, arrays = read_container(path, b"DR2CK", CheckpointError)
    try:
        operator = MeasurementOperator(arrays.pop("phi"), int(meta["operator_seed"]))
        shell = Dr2Model(Linear(arrays["linear.weight"], arrays["linear.bias"]), [],
                         operator, int(meta["seed"]), dict(meta.get("info", {})))
        recorded = meta["bn_recorded"]
        if len(recorded) != meta["block_count"]:
            raise CheckpointError(f"{path}: block metadata inconsistent")
        model = _rebuild(shell, arrays, arrays, recorded)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from exc
    if model.m != meta["m"] or operator.m != model.m:
        raise CheckpointError(f"{path}: m mismatch between metadata, weights and phi")
    return model
