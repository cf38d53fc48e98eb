"""Encoder-decoder heatmap predictor and cosine supervision.

Two stride-2 conv layers halve the resolution twice; two transposed-conv
layers restore it; a logistic squash bounds the output heatmap to [0, 1].
All gradients are manual (im2col convolutions and their adjoints).
"""

import numpy as np

from .errors import NumericError, ShapeError

CONV_K = 3  # stride-2 conv, pad 1: halves even dimensions
DECONV_K = 4  # stride-2 transposed conv, pad 1: exact doubling
STRIDE = 2
PAD = 1


def _im2col(x, k, stride, pad):
    h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[pad : pad + h, pad : pad + w] = x
    cols = np.empty((ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[i : i + ho * stride : stride, j : j + wo * stride : stride, :]
    return cols.reshape(ho * wo, k * k * c), (h, w, c, ho, wo)


def _col2im(cols, info, k, stride, pad):
    h, w, c, ho, wo = info
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    cols = cols.reshape(ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            xp[i : i + ho * stride : stride, j : j + wo * stride : stride, :] += cols[:, :, i, j, :]
    return xp[pad : pad + h, pad : pad + w]


def conv2d_forward(x, w, b):
    """Stride-2 padded convolution.  x (h, w, cin), w (k, k, cin, cout)."""
    k, _, cin, cout = w.shape
    cols, info = _im2col(x, k, STRIDE, PAD)
    y = cols @ w.reshape(k * k * cin, cout) + b
    ho, wo = info[3], info[4]
    return y.reshape(ho, wo, cout), (cols, info, w.shape)


def conv2d_backward(dy, cache, w):
    cols, info, wshape = cache
    k, _, cin, cout = wshape
    dyf = dy.reshape(-1, cout)
    dw = (cols.T @ dyf).reshape(wshape)
    db = dyf.sum(axis=0)
    dcols = dyf @ w.reshape(k * k * cin, cout).T
    dx = _col2im(dcols, info, k, STRIDE, PAD)
    return dx, dw, db


def deconv2d_forward(x, w, b, out_hw):
    """Stride-2 transposed convolution (the adjoint of a stride-2 conv).

    x (h, w, cin), w (k, k, cout, cin) where the underlying conv maps
    cout -> cin; output is (2h, 2w, cout).
    """
    hin, win, cin = x.shape
    k, _, cout, _ = w.shape
    ho, wo = out_hw
    wf = w.reshape(k * k * cout, cin)
    dcols = x.reshape(hin * win, cin) @ wf.T
    y = _col2im(dcols, (ho, wo, cout, hin, win), k, STRIDE, PAD) + b
    return y, (x, w.shape)


def deconv2d_backward(dy, cache, w):
    x, wshape = cache
    hin, win, cin = x.shape
    k, _, cout, _ = wshape
    cols, _ = _im2col(dy, k, STRIDE, PAD)  # (hin*win, k*k*cout)
    wf = w.reshape(k * k * cout, cin)
    dx = (cols @ wf).reshape(hin, win, cin)
    dw = (cols.T @ x.reshape(hin * win, cin)).reshape(wshape)
    db = dy.sum(axis=(0, 1))
    return dx, dw, db


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    # smooth hidden activation: keeps the loss C-infinity so finite
    # differences validate the gradients at any step size
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def param_shapes(channels, widths):
    f1, f2 = widths
    return {
        "conv1.w": (CONV_K, CONV_K, channels, f1),
        "conv1.b": (f1,),
        "conv2.w": (CONV_K, CONV_K, f1, f2),
        "conv2.b": (f2,),
        "deconv1.w": (DECONV_K, DECONV_K, f1, f2),
        "deconv1.b": (f1,),
        "deconv2.w": (DECONV_K, DECONV_K, 1, f1),
        "deconv2.b": (1,),
    }


def init_params(rng, channels, widths):
    params = {}
    for name, shape in param_shapes(channels, widths).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[0] * shape[1] * (shape[2] if name.startswith("conv") else shape[3])
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return params


def predict_heatmap(params, image):
    """Single-channel heatmap in [0, 1] with the input's spatial size."""
    heat, _ = forward(params, image)
    return heat


def forward(params, image):
    h, w, _ = image.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image {w}x{h} not divisible by 4 (two halvings)")
    z1, c1 = conv2d_forward(image, params["conv1.w"], params["conv1.b"])
    a1 = _softplus(z1)
    z2, c2 = conv2d_forward(a1, params["conv2.w"], params["conv2.b"])
    a2 = _softplus(z2)
    z3, c3 = deconv2d_forward(a2, params["deconv1.w"], params["deconv1.b"], (h // 2, w // 2))
    a3 = _softplus(z3)
    z4, c4 = deconv2d_forward(a3, params["deconv2.w"], params["deconv2.b"], (h, w))
    heat = _sigmoid(z4[:, :, 0])
    cache = (z1, c1, z2, c2, z3, c3, z4, c4, heat)
    return heat, cache


def backward(params, cache, dheat=None, dlogits=None):
    """Gradients of a scalar loss wrt the net parameters.

    Pass dL/dheat, or dL/d(output logits) to bypass the sigmoid derivative
    (the stable route for cross-entropy objectives).
    """
    z1, c1, z2, c2, z3, c3, z4, c4, heat = cache
    grads = {}
    if dlogits is not None:
        dz4 = dlogits[:, :, None]
    else:
        dz4 = (dheat * heat * (1.0 - heat))[:, :, None]
    da3, grads["deconv2.w"], grads["deconv2.b"] = deconv2d_backward(dz4, c4, params["deconv2.w"])
    dz3 = da3 * _sigmoid(z3)
    da2, grads["deconv1.w"], grads["deconv1.b"] = deconv2d_backward(dz3, c3, params["deconv1.w"])
    dz2 = da2 * _sigmoid(z2)
    da1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(dz2, c2, params["conv2.w"])
    dz1 = da1 * _sigmoid(z1)
    _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(dz1, c1, params["conv1.w"])
    return grads


def compose_pseudo_overlay(params, image, alpha, frame_id=-1):
    """Predict a heatmap and blend it onto the image via heatmap.overlay."""
    from .heatmap import CONTINUOUS, Heatmap, overlay

    heat = predict_heatmap(params, np.asarray(image, dtype=np.float64))
    return overlay(image, Heatmap(values=heat, frame_id=frame_id, kind=CONTINUOUS), alpha)


def cosine_loss(pred, target):
    """1 - cos(pred, target) with the gradient wrt ``pred`` only."""
    na = float(np.linalg.norm(pred))
    nb = float(np.linalg.norm(target))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_loss: zero-norm embedding")
    dot = float(pred @ target)
    cos = dot / (na * nb)
    loss = 1.0 - cos
    dpred = -(target / (na * nb) - dot * pred / (na**3 * nb))
    return loss, dpred


def fit_single_pair(params, image, target, steps=50, lr=10.0, momentum=0.0):
    """Overfit the net to one (image, heatmap) pair; returns per-step MAE.

    Optimizes cross-entropy against the soft target (the natural pairing for
    a logistic output: the pre-activation gradient is simply prediction minus
    target, so it cannot saturate).  Used as a convergence oracle: a few
    dozen steps should reproduce the memorised target almost exactly.
    """
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    maes = []
    for _ in range(steps):
        heat, cache = forward(params, image)
        maes.append(float(np.mean(np.abs(heat - target))))
        grads = backward(params, cache, dlogits=(heat - target) / heat.size)
        for k in params:
            velocity[k] = momentum * velocity[k] + grads[k]
            params[k] -= lr * velocity[k]
    return maes
