"""Central finite-difference gradient checking.

The numerical side is an independent oracle: it only ever calls the forward
function, so it cannot share a bug with any backward implementation.
"""

import numpy as np

from .tensor import Tensor


def numerical_gradient(f, x, step):
    """Central-difference d f / d x for a scalar-valued f of one array."""
    x = np.asarray(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    """max |a - n| scaled by the magnitude of the numeric gradient."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def check_gradients(build_loss, arrays, step=None, names=None):
    """Compare analytic and numerical gradients of ``build_loss``.

    ``build_loss`` receives one Tensor per input array (requires_grad set)
    and must return a scalar Tensor. Returns the worst relative error over
    all inputs. ``step`` defaults to 1e-3 in single precision and 1e-5 in
    double precision, matching the test tolerances.
    """
    arrays = [np.asarray(a) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    worst = 0.0
    for i, (arr, t) in enumerate(zip(arrays, tensors)):
        if step is None:
            h = 1e-3 if arr.dtype == np.float32 else 1e-5
        else:
            h = step

        def forward(perturbed, _i=i):
            ins = [Tensor(a.copy()) for a in arrays]
            ins[_i] = Tensor(perturbed.copy())
            return build_loss(*ins).item()

        num = numerical_gradient(forward, arr.copy(), h)
        ana = t.grad if t.grad is not None else np.zeros_like(arr)
        err = relative_error(ana, num)
        worst = max(worst, err)
    return worst
