"""Network building blocks.

Holds the layers the synthesis and discriminator stacks are made of:
equalized-learning-rate linear/conv layers, the style-driven filter bank
(kernel selection + weight (de-)modulation), tied-key/query L2
self-attention with a style token, and text cross-attention.
"""

import numpy as np

from . import tensor as tt
from .errors import CalibrationError, ConfigError, ShapeError
from .tensor import Tensor

DEMOD_EPS = 1e-8


class Param(Tensor):
    __slots__ = ("wd",)

    def __init__(self, data, wd="default"):
        super().__init__(data, requires_grad=True)
        self.wd = wd


class Module:
    """Minimal container: tracks Params, buffers and child Modules by
    attribute assignment; buffers are plain numpy arrays."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for store in ("_params", "_buffers", "_modules"):
            d = object.__getattribute__(self, store)
            if name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name, arr):
        self._buffers[name] = np.asarray(arr)

    def named_params(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_params(prefix + name + ".")

    def params(self):
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def state_dict(self):
        out = {name: p.data for name, p in self.named_params()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state, strict=True):
        own_p = dict(self.named_params())
        own_b = dict(self.named_buffers())
        missing = (set(own_p) | set(own_b)) - set(state)
        if strict and missing:
            raise ConfigError(f"missing keys in state dict: {sorted(missing)}")
        for name, arr in state.items():
            if name in own_p:
                if tuple(own_p[name].data.shape) != tuple(arr.shape):
                    raise ShapeError(f"{name}: shape {arr.shape} != {own_p[name].data.shape}")
                own_p[name].data = arr.astype(own_p[name].data.dtype, copy=True)
                own_p[name].grad = None
            elif name in own_b:
                self._set_buffer(name, arr)
            elif strict:
                raise ConfigError(f"unexpected key in state dict: {name}")

    def _set_buffer(self, dotted, arr):
        mod = self
        parts = dotted.split(".")
        for p in parts[:-1]:
            mod = mod._modules[p]
        mod._buffers[parts[-1]] = arr.copy()

    def param_count(self):
        return sum(p.data.size for p in self.params())


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self.items = []
        for m in mods:
            self.append(m)

    def append(self, m):
        self._modules[str(len(self.items))] = m
        self.items.append(m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


class EqualizedLinear(Module):
    """y = x @ (w * gain) + b; raw weights stay unit-normal, the runtime
    gain carries 1/sqrt(fan_in) and the learning-rate multiplier."""

    def __init__(self, din, dout, rng, bias=True, lr_mult=1.0, bias_init=0.0,
                 wd="default"):
        super().__init__()
        self.weight = Param(rng.normal((din, dout)) / lr_mult, wd=wd)
        self.gain = lr_mult / np.sqrt(din)
        self.lr_mult = lr_mult
        self.bias = Param(np.full(dout, bias_init / lr_mult, np.float32), wd="none") if bias else None

    def __call__(self, x):
        y = tt.matmul(x, tt.mul(self.weight, self.gain))
        if self.bias is not None:
            y = tt.add(y, tt.mul(self.bias, self.lr_mult))
        return y


class EqualizedConv(Module):
    """Plain (non-modulated) conv with equalized scaling; used by the
    discriminator trunk, fromRGB adapters and the frozen image encoder."""

    def __init__(self, cin, cout, k, rng, stride=1, pad=None, bias=True, wd="default"):
        super().__init__()
        self.weight = Param(rng.normal((cout, cin, k, k)), wd=wd)
        self.gain = 1.0 / np.sqrt(cin * k * k)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.bias = Param(np.zeros(cout, np.float32), wd="none") if bias else None

    def __call__(self, x):
        y = tt.conv2d(x, tt.mul(self.weight, self.gain), self.stride, self.pad)
        if self.bias is not None:
            y = tt.add(y, tt.reshape(self.bias, (1, -1, 1, 1)))
        return y


def act(x, gain=np.sqrt(2.0)):
    """Leaky ReLU (0.2) with variance-preserving gain."""
    return tt.mul(tt.leaky_relu(x, 0.2), float(gain))


class FilterBank(Module):
    """Bank of N candidate kernels plus the two style affines: one picks
    softmax selection weights over the bank, one produces per-input-channel
    modulation scales."""

    def __init__(self, n_filters, cin, cout, k, style_dim, rng, gain=None):
        super().__init__()
        if n_filters < 1:
            raise ConfigError("filter bank needs at least one filter")
        self.n = n_filters
        self.cin, self.cout, self.k = cin, cout, k
        self.filters = Param(rng.normal((n_filters, cin, cout, k, k)))
        self.gain = (1.0 / np.sqrt(cin * k * k)) if gain is None else gain
        self.select_affine = EqualizedLinear(style_dim, n_filters, rng.child_init(1))
        self.mod_affine = EqualizedLinear(style_dim, cin, rng.child_init(2), bias_init=1.0)
        self.bias = Param(np.zeros(cout, np.float32), wd="none")

    def selection_weights(self, w):
        return tt.softmax(self.select_affine(w), axis=-1)  # (B, N)

    def select_kernel(self, w):
        """Aggregate the bank with style-predicted softmax weights;
        returns per-sample kernels (B, Cin, Cout, k, k)."""
        sel = self.selection_weights(w)
        flat = tt.reshape(tt.mul(self.filters, self.gain), (self.n, -1))
        k = tt.matmul(sel, flat)
        return tt.reshape(k, (w.data.shape[0], self.cin, self.cout, self.k, self.k))


def adaconv(f, w, bank, demodulate=True):
    """Style-modulated convolution with the aggregated bank kernel.

    Modulation scales input channels by the style affine; demodulation
    renormalizes each output channel by the kernel's L2 norm (`DEMOD_EPS`
    in the denominator); bias is added after the convolution.
    """
    if f.data.shape[1] != bank.cin:
        raise ShapeError(f"adaconv: input channels {f.data.shape[1]} != bank {bank.cin}")
    b = f.data.shape[0]
    kern = bank.select_kernel(w)                       # (B, Ci, Co, k, k)
    s = bank.mod_affine(w)                             # (B, Ci)
    kern = tt.mul(kern, tt.reshape(s, (b, -1, 1, 1, 1)))
    if demodulate:
        norm2 = tt.tsum(tt.mul(kern, kern), axis=(1, 3, 4), keepdims=True)
        kern = tt.mul(kern, tt.div(1.0, tt.sqrt(tt.add(norm2, DEMOD_EPS))))
    kern = tt.transpose(kern, (0, 2, 1, 3, 4))         # (B, Co, Ci, k, k)
    y = tt.conv2d(f, kern, stride=1, pad=bank.k // 2)
    return tt.add(y, tt.reshape(bank.bias, (1, -1, 1, 1)))


def feature_tokens(f):
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = f.data.shape
    return tt.reshape(tt.transpose(f, (0, 2, 3, 1)), (b, h * w, c))


def tokens_to_feature(x, h, w):
    b, t, c = x.data.shape
    return tt.transpose(tt.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


class SelfAttentionL2(Module):
    """Self-attention with L2-distance logits, tied key/query projection,
    the style vector appended as an extra token, and a calibrated logit
    temperature.  The residual branch is scaled by ``gamma`` after the
    output projection."""

    def __init__(self, dim, style_dim, rng, attn_dim=None, gamma=0.3):
        super().__init__()
        self.dim = dim
        self.attn_dim = attn_dim or min(dim, 64)
        self.qk = EqualizedLinear(dim, self.attn_dim, rng.child_init(1), bias=False, wd="attention")
        self.v = EqualizedLinear(dim, self.attn_dim, rng.child_init(2), wd="attention")
        self.out = EqualizedLinear(self.attn_dim, dim, rng.child_init(3), wd="attention")
        self.style_token = EqualizedLinear(style_dim, dim, rng.child_init(4), wd="attention")
        self.gamma = gamma
        self.register_buffer("tau", np.float32(1.0))

    def logits(self, tokens):
        """Pairwise -tau * ||q_i - q_j||^2 over tokens (B, T, D)."""
        q = self.qk(tokens)
        r = tt.tsum(tt.mul(q, q), axis=-1, keepdims=True)          # (B, T, 1)
        cross = tt.matmul(q, tt.swap_last2(q))                     # (B, T, T)
        d2 = tt.sub(tt.add(r, tt.swap_last2(r)), tt.mul(cross, 2.0))
        return tt.mul(d2, -float(self.tau))

    def __call__(self, x, w):
        b, t, d = x.data.shape
        if t < 1:
            raise ShapeError("attention needs at least one token")
        extra = tt.reshape(self.style_token(w), (b, 1, d))
        xs = tt.concat([x, extra], axis=1)
        attn = tt.softmax(self.logits(xs), axis=-1)
        mixed = tt.matmul(attn, self.v(xs))                        # (B, T+1, A)
        y = self.out(mixed[:, :t])
        return tt.add(x, tt.mul(y, float(self.gamma)))


class CrossAttention(Module):
    """Image tokens attend to word embeddings (dot-product logits)."""

    def __init__(self, dim, text_dim, rng, attn_dim=None, gamma=0.3):
        super().__init__()
        self.attn_dim = attn_dim or min(dim, 64)
        self.q = EqualizedLinear(dim, self.attn_dim, rng.child_init(1), bias=False, wd="attention")
        self.k = EqualizedLinear(text_dim, self.attn_dim, rng.child_init(2), bias=False, wd="attention")
        self.v = EqualizedLinear(text_dim, self.attn_dim, rng.child_init(3), wd="attention")
        self.out = EqualizedLinear(self.attn_dim, dim, rng.child_init(4), wd="attention")
        self.gamma = gamma

    def __call__(self, x, t_local):
        if t_local.data.ndim != 3 or t_local.data.shape[1] < 1:
            raise ConfigError("cross-attention needs a non-empty caption embedding")
        q = self.q(x)
        k = self.k(t_local)
        logits = tt.mul(tt.matmul(q, tt.swap_last2(k)), 1.0 / np.sqrt(self.attn_dim))
        attn = tt.softmax(logits, axis=-1)
        y = self.out(tt.matmul(attn, self.v(t_local)))
        return tt.add(x, tt.mul(y, float(self.gamma)))


def calibrate_logit_scale(block, probe):
    """Set ``block.tau`` so that L2 logits over a unit-normal probe have
    roughly unit standard deviation at init.  ``probe`` is (P, D), P >= 256.
    Diagonal entries (self-distances, identically zero) are excluded."""
    if probe.shape[0] < 256:
        raise ConfigError(f"calibration probe needs >= 256 tokens, got {probe.shape[0]}")
    block._buffers["tau"] = np.float32(1.0)
    with tt.no_grad():
        logits = block.logits(Tensor._wrap(probe[None].astype(np.float32))).data[0]
    off = logits[~np.eye(logits.shape[0], dtype=bool)]
    std = off.std()
    if std < 1e-12:
        raise CalibrationError("zero-variance probe: cannot calibrate logit scale")
    tau = np.float32(1.0 / std)
    block._buffers["tau"] = tau
    return float(tau)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.g = Param(np.ones(dim, np.float32), wd="none")
        self.b = Param(np.zeros(dim, np.float32), wd="none")
        self.eps = eps

    def __call__(self, x):
        mu = tt.tmean(x, axis=-1, keepdims=True)
        xc = tt.sub(x, mu)
        var = tt.tmean(tt.mul(xc, xc), axis=-1, keepdims=True)
        xn = tt.div(xc, tt.sqrt(tt.add(var, self.eps)))
        return tt.add(tt.mul(xn, self.g), self.b)


class TransformerBlock(Module):
    """Pre-LN dot-product self-attention + MLP; used by the text stacks
    where tokens are few and the L2/style machinery is not needed."""

    def __init__(self, dim, rng, mlp_mult=2):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)
        self.qkv = EqualizedLinear(dim, 3 * dim, rng.child_init(1), wd="attention")
        self.proj = EqualizedLinear(dim, dim, rng.child_init(2), wd="attention")
        self.fc1 = EqualizedLinear(dim, mlp_mult * dim, rng.child_init(3))
        self.fc2 = EqualizedLinear(mlp_mult * dim, dim, rng.child_init(4))
        self.dim = dim

    def __call__(self, x, mask=None):
        b, t, d = x.data.shape
        qkv = self.qkv(self.ln1(x))
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
        logits = tt.mul(tt.matmul(q, tt.swap_last2(k)), 1.0 / np.sqrt(d))
        if mask is not None:
            logits = tt.add(logits, Tensor._wrap(mask.astype(logits.data.dtype)))
        y = tt.matmul(tt.softmax(logits, axis=-1), v)
        x = tt.add(x, self.proj(y))
        h = self.fc2(act(self.fc1(self.ln2(x))))
        return tt.add(x, h)


class _InitRng:
    """Deterministic per-layer init streams derived from one (seed, path)."""

    def __init__(self, rng, path=0):
        self._rng = rng
        self._path = path
        self._n = 0

    def normal(self, shape):
        self._n += 1
        return self._rng.at(self._path, self._n).standard_normal(shape, dtype=np.float32)

    def child_init(self, salt):
        return _InitRng(self._rng, self._path * 1000003 + salt)


def init_rng(rng, path=0):
    return _InitRng(rng, path)
