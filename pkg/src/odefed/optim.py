from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .paramset import IncongruentParametersError, ParameterSet


def sgd_step(params: ParameterSet, eta: float, grads: Optional[Mapping[str, np.ndarray]] = None) -> ParameterSet:
    """In-place ``w <- w - eta * grad`` for every entry, then zero the gradients.

    ``grads`` defaults to each tensor's accumulated ``grad`` buffer. When given
    explicitly it must carry exactly the same names and shapes as ``params``.
    """
    if eta < 0:
        raise ValueError(f"learning rate must be >= 0, got {eta}")
    if grads is not None:
        if list(grads.keys()) != list(params.keys()):
            raise IncongruentParametersError("gradients are not aligned with parameters")
        for name, t in params.items():
            if np.shape(grads[name]) != t.shape:
                raise IncongruentParametersError(
                    f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {t.shape}"
                )
    for name, t in params.items():
        g = t.grad if grads is None else np.asarray(grads[name], dtype=t.dtype)
        if g is None:
            continue
        if eta:
            t.data -= t.dtype.type(eta) * g
        t.zero_grad()
    return params
