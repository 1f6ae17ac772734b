"""Small gated CNN with hand-written forward and backward passes.

Architecture: a stack of conv blocks (same-padded 3x3 conv, rectifier, 2x
max-pool), ending in a conv layer with exactly K filters, global average
pooling, and one linear layer.  That tail shape is what makes CAM and the
gated path well defined: gating or summing channel maps commutes with the
pooling that feeds the classifier.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .gates import select_gate_rows


class NumericError(FloatingPointError):
    """Non-finite activations encountered in a forward pass."""

    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(message)


@dataclass
class ForwardTrace:
    """Everything the analysis code reads off one ungated forward pass."""

    logits: np.ndarray
    penultimate_maps: np.ndarray
    pooled_features: np.ndarray
    per_layer_pooled: list = field(default_factory=list)


class TinyCSGNet:
    """Reference backbone; channel plan ``block_channels + (num_filters,)``."""

    def __init__(self, num_classes, num_filters=16, in_channels=3, image_size=32,
                 block_channels=(16, 32), kernel_size=3, downsample=True, seed=0,
                 dtype=np.float32):
        self.num_classes = int(num_classes)
        self.num_filters = int(num_filters)
        self.in_channels = int(in_channels)
        self.image_size = int(image_size)
        self.block_channels = tuple(int(c) for c in block_channels)
        self.kernel_size = int(kernel_size)
        self.downsample = bool(downsample)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.penultimate_mask = None

        chans = self.block_channels + (self.num_filters,)
        if self.downsample and self.image_size % (2 ** len(chans)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{len(chans)}"
            )
        rng = np.random.default_rng(self.seed)
        k = self.kernel_size
        params = {}
        cin = self.in_channels
        for i, cout in enumerate(chans):
            fan_in = cin * k * k
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
            params[f"conv{i}.weight"] = w.astype(self.dtype)
            params[f"conv{i}.bias"] = np.zeros(cout, dtype=self.dtype)
            cin = cout
        wf = rng.standard_normal((self.num_classes, self.num_filters))
        params["fc.weight"] = (wf / np.sqrt(self.num_filters)).astype(self.dtype)
        params["fc.bias"] = np.zeros(self.num_classes, dtype=self.dtype)
        self.params = params

    # -- housekeeping ------------------------------------------------------

    @property
    def num_blocks(self):
        return len(self.block_channels) + 1

    def describe(self):
        return {
            "num_classes": self.num_classes,
            "num_filters": self.num_filters,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "block_channels": list(self.block_channels),
            "kernel_size": self.kernel_size,
            "downsample": self.downsample,
            "seed": self.seed,
        }

    @classmethod
    def from_descriptor(cls, desc):
        return cls(**desc)

    def copy(self):
        m = TinyCSGNet.from_descriptor(self.describe())
        m.dtype = self.dtype
        m.params = {k: v.copy() for k, v in self.params.items()}
        if self.penultimate_mask is not None:
            m.penultimate_mask = self.penultimate_mask.copy()
        return m

    def astype(self, dtype):
        m = self.copy()
        m.dtype = np.dtype(dtype)
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m

    def with_mask(self, mask):
        """Copy of the model whose penultimate filters are scaled by ``mask``."""
        mask = np.asarray(mask, dtype=self.dtype)
        if mask.shape != (self.num_filters,):
            raise ValueError(f"mask must have shape ({self.num_filters},)")
        m = self.copy()
        m.penultimate_mask = mask
        return m

    # -- forward / backward ------------------------------------------------

    def _run(self, images, gate_rows=None, keep_ctx=False, check_finite=True):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4:
            raise ValueError(f"expected images (B,C,H,W), got shape {x.shape}")
        # Center [0,1] inputs; a fixed affine map, so input gradients just
        # carry the constant factor.
        x = np.ascontiguousarray((x - 0.5) * 2.0)
        nb = self.num_blocks
        blocks = []
        per_layer_pooled = []
        h = x
        for i in range(nb):
            w = self.params[f"conv{i}.weight"]
            b = self.params[f"conv{i}.bias"]
            z, ctx = kernels.conv2d_forward(h, w, b, return_ctx=keep_ctx)
            if check_finite and not np.all(np.isfinite(z)):
                raise NumericError(i, f"non-finite activations after conv layer {i}")
            relu_mask = z > 0
            a = np.maximum(z, 0.0, out=z)
            if i == nb - 1 and self.penultimate_mask is not None:
                a = a * self.penultimate_mask[None, :, None, None]
            per_layer_pooled.append(a.mean(axis=(2, 3)))
            if self.downsample:
                p, pool_idx = kernels.maxpool2_forward(a)
            else:
                p, pool_idx = a, None
            blocks.append({
                "inp": h, "ctx": ctx, "relu_mask": relu_mask,
                "pool_idx": pool_idx, "act_shape": a.shape,
            })
            h = p
        maps = h
        pooled_raw = maps.mean(axis=(2, 3))
        if gate_rows is not None:
            gate_rows = np.ascontiguousarray(gate_rows, dtype=self.dtype)
            gated = maps * gate_rows[:, :, None, None]
            pooled = gated.mean(axis=(2, 3))
        else:
            pooled = pooled_raw
        logits = pooled @ self.params["fc.weight"].T + self.params["fc.bias"]
        return {
            "blocks": blocks, "maps": maps, "pooled_raw": pooled_raw,
            "pooled": pooled, "gate_rows": gate_rows, "logits": logits,
            "per_layer_pooled": per_layer_pooled,
        }

    def forward_std(self, images):
        """Ungated forward pass; the path used at test time."""
        cache = self._run(images)
        return ForwardTrace(
            logits=cache["logits"],
            penultimate_maps=cache["maps"],
            pooled_features=cache["pooled_raw"],
            per_layer_pooled=cache["per_layer_pooled"],
        )

    def forward_csg(self, images, labels, gate):
        """Gated forward pass: penultimate maps scaled by the label's gate row."""
        rows = select_gate_rows(gate, labels)
        return self._run(images, gate_rows=rows)["logits"]

    def backward(self, cache, seeds, need_param_grads=True,
                 need_input_grad=False, need_gate_grad=False):
        """Backprop from gradient seeds on logits / pooled / penultimate maps.

        Returns a dict with 'param_grads' (name -> array), 'input_grad', and
        'gate_rows_grad' (the latter two None unless requested/applicable).
        """
        maps = cache["maps"]
        bsz, _, hh, ww = maps.shape
        logits_seed = seeds.get("logits")
        param_grads = {} if need_param_grads else None

        if logits_seed is not None:
            dlogits = np.ascontiguousarray(logits_seed, dtype=self.dtype)
            if need_param_grads:
                param_grads["fc.weight"] = dlogits.T @ cache["pooled"]
                param_grads["fc.bias"] = dlogits.sum(axis=0)
            dpooled = dlogits @ self.params["fc.weight"]
        else:
            if need_param_grads:
                param_grads["fc.weight"] = np.zeros_like(self.params["fc.weight"])
                param_grads["fc.bias"] = np.zeros_like(self.params["fc.bias"])
            dpooled = np.zeros_like(cache["pooled"])
        if "pooled" in seeds:
            dpooled = dpooled + np.asarray(seeds["pooled"], dtype=self.dtype)

        gate_rows = cache["gate_rows"]
        gate_rows_grad = None
        if gate_rows is not None:
            if need_gate_grad:
                gate_rows_grad = dpooled * cache["pooled_raw"]
            dpooled_raw = dpooled * gate_rows
        else:
            dpooled_raw = dpooled

        dmaps = np.empty_like(maps)
        dmaps[:] = (dpooled_raw / (hh * ww))[:, :, None, None]
        if "penultimate" in seeds:
            dmaps += np.asarray(seeds["penultimate"], dtype=self.dtype)

        dh = dmaps
        input_grad = None
        nb = self.num_blocks
        for i in reversed(range(nb)):
            blk = cache["blocks"][i]
            if self.downsample:
                ah, aw = blk["act_shape"][2:]
                da = kernels.maxpool2_backward(dh, blk["pool_idx"], ah, aw)
            else:
                da = dh
            if i == nb - 1 and self.penultimate_mask is not None:
                da = da * self.penultimate_mask[None, :, None, None]
            dz = da * blk["relu_mask"]
            need_dx = need_input_grad or i > 0
            w = self.params[f"conv{i}.weight"]
            dx, dw, db = kernels.conv2d_backward(
                blk["inp"], w, dz, ctx=blk["ctx"], need_dx=need_dx)
            if need_param_grads:
                param_grads[f"conv{i}.weight"] = dw
                param_grads[f"conv{i}.bias"] = db
            dh = dx
        if need_input_grad:
            input_grad = dh * 2.0  # undo the input centering scale
        return {
            "param_grads": param_grads,
            "input_grad": input_grad,
            "gate_rows_grad": gate_rows_grad,
        }


# -- gradient heads for input_gradient --------------------------------------


def head_pooled_filter(k):
    """Scalar head: sum over the batch of filter k's pooled activation."""
    def head(trace):
        dpooled = np.zeros_like(trace.pooled_features)
        dpooled[:, k] = 1.0
        return float(trace.pooled_features[:, k].sum()), {"pooled": dpooled}
    return head


def head_logit(c):
    """Scalar head: sum over the batch of class c's logit."""
    def head(trace):
        dlogits = np.zeros_like(trace.logits)
        dlogits[:, c] = 1.0
        return float(trace.logits[:, c].sum()), {"logits": dlogits}
    return head


def head_cross_entropy(labels):
    """Scalar head: mean cross-entropy of softmax(logits) against labels."""
    labels = np.asarray(labels)

    def head(trace):
        from .training import softmax
        p = softmax(trace.logits)
        n = p.shape[0]
        value = float(-np.log(np.clip(p[np.arange(n), labels], 1e-12, None)).mean())
        dlogits = p.copy()
        dlogits[np.arange(n), labels] -= 1.0
        return value, {"logits": dlogits / n}
    return head


def head_constant(value=0.0):
    """A head with no dependence on the input; its gradient is zero."""
    def head(trace):
        return float(value), {}
    return head


def input_gradient(model, images, head):
    """Exact gradient of a scalar head of the trace w.r.t. the input image(s).

    ``head`` maps a ForwardTrace to ``(value, seeds)`` where seeds is a dict
    with gradient arrays for any of 'logits', 'pooled', 'penultimate'.
    """
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    cache = model._run(arr, keep_ctx=True)
    trace = ForwardTrace(
        logits=cache["logits"],
        penultimate_maps=cache["maps"],
        pooled_features=cache["pooled_raw"],
        per_layer_pooled=cache["per_layer_pooled"],
    )
    out = head(trace)
    if not (isinstance(out, tuple) and len(out) == 2 and isinstance(out[1], dict)):
        raise ValueError("head must return (scalar_value, seed_dict); "
                         "non-differentiable heads are not supported")
    _, seeds = out
    unknown = set(seeds) - {"logits", "pooled", "penultimate"}
    if unknown:
        raise ValueError(f"head produced seeds for unknown tensors: {sorted(unknown)}")
    if not seeds:
        grad = np.zeros_like(arr, dtype=model.dtype)
        return grad[0] if single else grad
    res = model.backward(cache, seeds, need_param_grads=False, need_input_grad=True)
    grad = res["input_grad"]
    return grad[0] if single else grad


def filter_weight_vectors(model):
    """Flattened weight tensor of each last-conv filter, one row per filter."""
    w = model.params[f"conv{model.num_blocks - 1}.weight"]
    return w.reshape(w.shape[0], -1).copy()
