"""Central finite-difference verification of tape gradients."""
import numpy as np

from .tensor import Tape, Tensor, no_grad


def grad_check(f, point, h=1e-5, coords=None, rng=None):
    """Largest relative disagreement between tape and finite-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be smooth near ``point``
    (kinks such as relu at 0 give meaningless results). The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.

    ``coords`` limits the check to that many randomly chosen coordinates,
    which keeps large parameter vectors affordable.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = x.grad.reshape(-1)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=coords, replace=False))

    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(x.data.copy(), dtype=np.float64)).item()
            flat[i] = orig - h
            down = f(Tensor(x.data.copy(), dtype=np.float64)).item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
