"""Central finite-difference oracle and error metrics for gradient checks."""

import numpy as np

from .errors import InvalidInputError, OracleError


def _flatten(params):
    if isinstance(params, np.ndarray):
        return [params], lambda arrays: arrays[0]
    if hasattr(params, "arrays") and hasattr(params, "with_arrays"):
        return list(params.arrays()), params.with_arrays
    if isinstance(params, (list, tuple)):
        flat, rebuilders, sizes = [], [], []
        for item in params:
            sub, rebuild = _flatten(item)
            flat.extend(sub)
            rebuilders.append(rebuild)
            sizes.append(len(sub))

        def rebuild_all(arrays):
            out, pos = [], 0
            for rebuild, size in zip(rebuilders, sizes):
                out.append(rebuild(arrays[pos:pos + size]))
                pos += size
            return type(params)(out)

        return flat, rebuild_all
    raise InvalidInputError(f"cannot take finite differences over {type(params).__name__}")


def finite_diff_grad(f, params, step=1e-4, scaled=False):
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` may be an array, a (nested) list of arrays, or any object with
    ``arrays()``/``with_arrays()`` (e.g. a ``ParamSet``); ``f`` receives an
    object of the same structure. Returns a flat list of gradient arrays in
    ``arrays()`` order. With ``scaled`` the per-coordinate step is
    ``step * max(1, |theta|)``.
    """
    if step <= 0:
        raise InvalidInputError("finite-difference step must be positive")
    flat, rebuild = _flatten(params)
    work = [np.array(a, dtype=np.float64, copy=True) for a in flat]
    if any(np.asarray(a).dtype != np.float64 for a in flat):
        raise InvalidInputError("finite differences require 64-bit parameters")

    def evaluate():
        val = float(np.asarray(f(rebuild(work))))
        if not np.isfinite(val):
            raise OracleError("objective evaluated to a non-finite value")
        return val

    grads = []
    for arr in work:
        g = np.zeros_like(arr)
        flat_arr = arr.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_arr.size):
            orig = flat_arr[k]
            h = step * max(1.0, abs(orig)) if scaled else step
            flat_arr[k] = orig + h
            plus = evaluate()
            flat_arr[k] = orig - h
            minus = evaluate()
            flat_arr[k] = orig
            flat_g[k] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    """Largest absolute discrepancy, relative to the larger of the two maxima.

    Arrays are compared as a group so that near-zero coordinates are judged
    on the scale of the whole gradient rather than their own magnitude.
    """
    a = np.concatenate([np.ravel(x) for x in analytic]) if len(analytic) else np.zeros(0)
    n = np.concatenate([np.ravel(x) for x in numeric]) if len(numeric) else np.zeros(0)
    if a.shape != n.shape:
        raise InvalidInputError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)
