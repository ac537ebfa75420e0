"""Small fully-convolutional segmentation net with hand-written gradients.

Layout is encoder (two 3x3 convs) -> decoder (one 3x3 conv) -> per-pixel
affine classifier -> softmax. All convolutions use circular padding so a
wrap-around shift of the input shifts every activation map by the same amount.
Arrays are channels-last: images (B, H, W), activations (B, H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENCODER = ("w1", "b1", "w2", "b2")
DECODER = ("w3", "b3")
CLASSIFIER = ("wc", "bc")
PARAM_ORDER = ENCODER + DECODER + CLASSIFIER

LOG_CLAMP = 1e-12

# (dy, dx) offsets in kernel order
_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class SegNetwork:
    params: dict[str, np.ndarray]
    height: int
    width: int
    latent_relu: bool = True

    @property
    def num_classes(self):
        return self.params["wc"].shape[1]

    @property
    def latent_dim(self):
        return self.params["wc"].shape[0]

    @property
    def enc_channels(self):
        return self.params["w1"].shape[-1]

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return SegNetwork({k: v.copy() for k, v in self.params.items()}, self.height, self.width, self.latent_relu)


def init_network(height, width, num_classes, latent_dim=8, enc_channels=16, seed=0, zero_classifier=False,
                 latent_relu=True):
    rng = np.random.default_rng(seed)

    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    c = enc_channels
    params = {
        "w1": he(9, (3, 3, 1, c)),
        "b1": np.zeros(c),
        "w2": he(9 * c, (3, 3, c, c)),
        "b2": np.zeros(c),
        "w3": he(9 * c, (3, 3, c, latent_dim)),
        "b3": np.zeros(latent_dim),
        "wc": np.zeros((latent_dim, num_classes)) if zero_classifier
        else rng.normal(0.0, np.sqrt(1.0 / latent_dim), size=(latent_dim, num_classes)),
        "bc": np.zeros(num_classes),
    }
    return SegNetwork(params, height, width, latent_relu)


def _patches(a):
    """(B, H, W, C) -> (B, H, W, 9, C) of circularly shifted neighbours."""
    B, H, W, C = a.shape
    ap = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="wrap")
    out = np.empty((B, H, W, 9, C))
    for k, (dy, dx) in enumerate(_OFFSETS):
        out[:, :, :, k, :] = ap[:, 1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    return out


def _conv(a, w, b):
    p = _patches(a)
    B, H, W, _, C = p.shape
    out = p.reshape(B * H * W, 9 * C) @ w.reshape(9 * C, -1) + b
    return out.reshape(B, H, W, -1), p


def _conv_backward(dout, patches, w, need_input_grad=True):
    B, H, W, _, C = patches.shape
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (patches.reshape(-1, 9 * C).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    # input gradient is a circular conv of dout with the flipped, transposed kernel
    w_flip = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, C)
    da = _patches(dout).reshape(B * H * W, 9 * cout) @ w_flip
    return da.reshape(B, H, W, C), dw, db


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(net: SegNetwork, latent):
    """Classifier head on any array whose last axis is the latent dim."""
    return softmax(latent @ net.params["wc"] + net.params["bc"])


@dataclass
class ForwardCache:
    images: np.ndarray
    patches: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    latent: np.ndarray | None = None
    probs: np.ndarray | None = None


def forward(net: SegNetwork, images, keep_cache=False):
    """Run the network on a batch (B, H, W) or a single image (H, W).

    Returns ``(latent, probs)`` or ``(latent, probs, cache)`` if ``keep_cache``.
    """
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (net.height, net.width):
        raise ValueError(f"expected images of shape (*, {net.height}, {net.width}), got {np.shape(images)}")
    p = net.params
    cache = ForwardCache(images=x)
    a = x[..., None]
    for wk, bk in (("w1", "b1"), ("w2", "b2"), ("w3", "b3")):
        z, patches = _conv(a, p[wk], p[bk])
        cache.patches.append(patches)
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if (wk != "w3" or net.latent_relu) else z
    latent = a
    probs = classify(net, latent)
    cache.latent, cache.probs = latent, probs
    if single:
        latent, probs = latent[0], probs[0]
    if keep_cache:
        return latent, probs, cache
    return latent, probs


def ce_loss(probs, mask, class_weights=None):
    """Mean over pixels of ``-w[y] * log p[y]`` with the log argument clamped."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask)
    k = probs.shape[-1]
    if mask.shape != probs.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match probs {probs.shape[:-1]}")
    if mask.size and (mask.max() >= k or mask.min() < 0):
        raise ValueError(f"mask label outside [0, {k})")
    p_true = np.take_along_axis(probs, mask[..., None].astype(np.intp), axis=-1)[..., 0]
    losses = -np.log(np.maximum(p_true, LOG_CLAMP))
    if class_weights is not None:
        losses = losses * np.asarray(class_weights, dtype=np.float64)[mask]
    return float(losses.mean())


def ce_logit_grad(probs, mask, class_weights=None):
    """Gradient of :func:`ce_loss` with respect to the classifier logits."""
    mask = np.asarray(mask).astype(np.intp)
    g = probs.copy()
    np.put_along_axis(g, mask[..., None], np.take_along_axis(g, mask[..., None], axis=-1) - 1.0, axis=-1)
    p_true = np.take_along_axis(probs, mask[..., None], axis=-1)
    scale = np.where(p_true >= LOG_CLAMP, 1.0, 0.0)  # clamped terms are constant
    if class_weights is not None:
        scale = scale * np.asarray(class_weights, dtype=np.float64)[mask][..., None]
    n = mask.size
    return g * scale / n


def zero_grads(net: SegNetwork):
    return {k: np.zeros_like(v) for k, v in net.params.items()}


def backward(net: SegNetwork, cache: ForwardCache | None, dlogits=None, dlatent=None):
    """Reverse pass for ``loss(logits, latent)`` given its partial derivatives.

    ``dlogits`` is the gradient at the classifier output (before softmax),
    ``dlatent`` an external gradient injected at the latent field. Either may
    be None. Returns a dict congruent with ``net.params``.
    """
    if cache is None or cache.latent is None:
        raise ValueError("backward needs the cache of a forward pass (forward(..., keep_cache=True))")
    p = net.params
    grads = zero_grads(net)
    B, H, W, F = cache.latent.shape
    dlat = np.zeros_like(cache.latent)
    if dlogits is not None:
        dlogits = np.asarray(dlogits, dtype=np.float64).reshape(B, H, W, -1)
        grads["wc"] = cache.latent.reshape(-1, F).T @ dlogits.reshape(-1, dlogits.shape[-1])
        grads["bc"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
        dlat = dlat + dlogits @ p["wc"].T
    if dlatent is not None:
        dlat = dlat + np.asarray(dlatent, dtype=np.float64).reshape(B, H, W, F)
    if not dlat.any():
        return grads
    da = dlat
    for i, (wk, bk) in reversed(list(enumerate((("w1", "b1"), ("w2", "b2"), ("w3", "b3"))))):
        dz = da * (cache.pre[i] > 0) if (i < 2 or net.latent_relu) else da
        da, grads[wk], grads[bk] = _conv_backward(dz, cache.patches[i], p[wk], need_input_grad=i > 0)
    return grads


def classifier_grads(net: SegNetwork, z, labels, class_weights=None):
    """CE loss and its gradient for the classifier applied to raw latent points ``z`` (N, F).

    Only the classifier parameters receive gradient; the other entries are zeros.
    """
    probs = classify(net, z)
    loss = ce_loss(probs, labels, class_weights)
    dlogits = ce_logit_grad(probs, labels, class_weights)
    grads = zero_grads(net)
    grads["wc"] = z.T @ dlogits
    grads["bc"] = dlogits.sum(axis=0)
    return loss, grads


def predict(net: SegNetwork, images, batch_size=32):
    """Argmax labels for a stack of images, computed in fixed-size chunks."""
    x = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(x), batch_size):
        _, probs = forward(net, x[i:i + batch_size])
        out.append(probs.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0)
