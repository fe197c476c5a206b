"""Tiny array-namespace shim so model formulas run on numpy arrays and torch tensors alike."""

import numpy as np


def is_torch(x):
    return type(x).__module__ == "torch"


def _torch():
    import torch

    return torch


def where(cond, a, b):
    if is_torch(cond) or is_torch(a) or is_torch(b):
        torch = _torch()
        ref = a if is_torch(a) else b
        a = a if is_torch(a) else torch.as_tensor(a, dtype=ref.dtype)
        b = b if is_torch(b) else torch.as_tensor(b, dtype=ref.dtype)
        return torch.where(cond, a, b)
    return np.where(cond, a, b)


def maximum(a, b):
    if is_torch(a) or is_torch(b):
        torch = _torch()
        ref = a if is_torch(a) else b
        a = a if is_torch(a) else torch.as_tensor(a, dtype=ref.dtype)
        b = b if is_torch(b) else torch.as_tensor(b, dtype=ref.dtype)
        return torch.maximum(a, b)
    return np.maximum(a, b)


def minimum(a, b):
    if is_torch(a) or is_torch(b):
        torch = _torch()
        ref = a if is_torch(a) else b
        a = a if is_torch(a) else torch.as_tensor(a, dtype=ref.dtype)
        b = b if is_torch(b) else torch.as_tensor(b, dtype=ref.dtype)
        return torch.minimum(a, b)
    return np.minimum(a, b)


def clip(x, lo, hi):
    if is_torch(x):
        torch = _torch()
        lo = torch.as_tensor(lo, dtype=x.dtype)
        hi = torch.as_tensor(hi, dtype=x.dtype)
        return torch.maximum(torch.minimum(x, hi), lo)
    return np.clip(x, lo, hi)


def stack(xs, axis=-1):
    if any(is_torch(x) for x in xs):
        torch = _torch()
        return torch.stack(xs, dim=axis)
    return np.stack(xs, axis=axis)


def _unary(name):
    def f(x):
        if is_torch(x):
            return getattr(_torch(), name)(x)
        return getattr(np, name)(x)

    f.__name__ = name
    return f


cos = _unary("cos")
sin = _unary("sin")
sqrt = _unary("sqrt")
abs = _unary("abs")
sign = _unary("sign")


def atan2(y, x):
    if is_torch(y) or is_torch(x):
        return _torch().atan2(y, x)
    return np.arctan2(y, x)


def hypot(a, b):
    if is_torch(a) or is_torch(b):
        return _torch().hypot(a, b)
    return np.hypot(a, b)


def signed_power(x, p):
    """sign(x) * |x|**p, real-valued for fractional p."""
    return sign(x) * abs(x) ** p
