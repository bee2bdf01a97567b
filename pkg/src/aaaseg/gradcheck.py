"""Central finite-difference checks for every layer and a tiny whole network.

Checks run in float64 on the same code paths used for float32 training.
Each layer is probed through the scalar objective ``sum(out * r)`` with a
fixed random ``r``; the error is reported normwise as
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from . import unet

LAYER_TOL = 1e-3
NETWORK_TOL = 1e-2
STEP = 1e-3


@dataclass
class CheckResult:
    layer: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.layer:<22} max_rel_err={self.max_rel_err:.3e}  tol={self.tol:g}"


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, x, step=STEP, indices=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def _default_backward():
    return {
        "conv2d": nd.conv2d_backward,
        "maxpool2": nd.maxpool2_backward,
        "deconv2": nd.deconv2_backward,
        "relu": nd.relu_backward,
        "concat": nd.concat_backward,
    }


def layer_checks(seed=0, backward=None):
    """Finite-difference check of each primitive on random tensors (dims <= 4)."""
    rng = np.random.default_rng(seed)
    bw = _default_backward()
    bw.update(backward or {})
    results = []

    def conv_case(label, k, pad, stride, shape):
        x = rng.normal(size=shape)
        n, c, h, w = shape
        oc = 3
        p = nd.ConvParams(rng.normal(size=(oc, c, k, k)), rng.normal(size=oc), stride=stride, pad=pad)
        out_shape = nd.conv2d_forward(x, p).shape
        r = rng.normal(size=out_shape)
        obj = lambda: float(np.sum(nd.conv2d_forward(x, p) * r))
        g = bw["conv2d"](x, p, r)
        err = max(rel_error(g.input_grad, numeric_grad(obj, x)),
                  rel_error(g.param_grads["weights"], numeric_grad(obj, p.weights)),
                  rel_error(g.param_grads["bias"], numeric_grad(obj, p.bias)))
        results.append(CheckResult(label, err, LAYER_TOL))

    conv_case("conv2d_3x3_pad1", 3, 1, 1, (2, 2, 4, 4))
    conv_case("conv2d_1x1", 1, 0, 1, (1, 3, 4, 4))

    x = rng.permutation(np.arange(2 * 2 * 4 * 4, dtype=np.float64)).reshape(2, 2, 4, 4) * 0.01
    r = rng.normal(size=(2, 2, 2, 2))
    obj = lambda: float(np.sum(nd.maxpool2_forward(x)[0] * r))
    _, amap = nd.maxpool2_forward(x)
    results.append(CheckResult("maxpool2", rel_error(bw["maxpool2"](amap, r), numeric_grad(obj, x)), LAYER_TOL))

    x = rng.normal(size=(1, 3, 2, 2))
    p = nd.ConvParams(rng.normal(size=(2, 3, 2, 2)), rng.normal(size=2), stride=2, pad=0)
    r = rng.normal(size=(1, 2, 4, 4))
    obj = lambda: float(np.sum(nd.deconv2_forward(x, p) * r))
    g = bw["deconv2"](x, p, r)
    err = max(rel_error(g.input_grad, numeric_grad(obj, x)),
              rel_error(g.param_grads["weights"], numeric_grad(obj, p.weights)),
              rel_error(g.param_grads["bias"], numeric_grad(obj, p.bias)))
    results.append(CheckResult("deconv2", err, LAYER_TOL))

    x = rng.uniform(0.1, 1.0, size=(1, 2, 3, 3)) * rng.choice([-1.0, 1.0], size=(1, 2, 3, 3))
    r = rng.normal(size=x.shape)
    obj = lambda: float(np.sum(nd.relu_forward(x) * r))
    results.append(CheckResult("relu", rel_error(bw["relu"](x, r), numeric_grad(obj, x)), LAYER_TOL))

    logits = rng.normal(size=(1, 2, 3, 3))
    lab = rng.integers(0, 2, size=(1, 3, 3))
    g1 = nd.one_hot(lab, dtype=np.float64)
    obj = lambda: nd.cross_entropy_loss(nd.softmax_channels(logits), g1)[0]
    _, grad = nd.cross_entropy_loss(nd.softmax_channels(logits), g1)
    results.append(CheckResult("softmax_cross_entropy", rel_error(grad, numeric_grad(obj, logits)), LAYER_TOL))

    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    r = rng.normal(size=(1, 5, 3, 3))
    obj = lambda: float(np.sum(nd.concat_channels(a, b) * r))
    ga, gb = bw["concat"](r, a.shape[1])
    err = max(rel_error(ga, numeric_grad(obj, a)), rel_error(gb, numeric_grad(obj, b)))
    results.append(CheckResult("concat", err, LAYER_TOL))
    return results


def network_check(seed=0, n_params=20, size=16, depth=2, features=2, step=1e-5):
    """Spot check of ``n_params`` random network parameters on the full loss."""
    rng = np.random.default_rng(seed)
    spec = unet.UNetSpec(depth=depth, base_features=features)
    params = unet.build(spec, seed=seed, dtype=np.float64)
    for arr in params.arrays():
        if arr.ndim == 1:
            arr[:] = rng.normal(scale=0.1, size=arr.shape)
    x = rng.normal(size=(1, 1, size, size))
    g = nd.one_hot(rng.integers(0, 2, size=(1, size, size)), dtype=np.float64)

    def loss():
        return nd.cross_entropy_loss(unet.forward(params, x), g)[0]

    probs, cache = unet.forward(params, x, keep_cache=True)
    _, grad_logits = nd.cross_entropy_loss(probs, g)
    grads = unet.grad_arrays(params, unet.backward(params, cache, grad_logits))
    arrays = params.arrays()
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in np.sort(picks):
        ai = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[ai])
        analytic.append(grads[ai].reshape(-1)[j])
        numeric.append(numeric_grad(loss, arrays[ai], step=step, indices=[j])[0])
    return CheckResult(f"unet_d{depth}_f{features}_{size}px", rel_error(analytic, numeric), NETWORK_TOL)


def run_all(seed=0, backward=None):
    return layer_checks(seed, backward) + [network_check(seed)]
