import numpy as np

from cil.ndmath import Tape


def bundle_gradient_error(build_loss, bundle, step=1e-5, names=None):
    """Max relative error between tape gradients and central differences,

    over every coordinate of the named parameters. ``build_loss(tape, bundle)``
    must return a scalar Var.
    """
    names = list(names or bundle.params.keys())
    tape = Tape()
    root = build_loss(tape, bundle)
    analytic = tape.backward(root)

    worst = 0.0
    for name in names:
        base = bundle.params[name]
        numeric = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            ij = it.multi_index
            for sign in (+1.0, -1.0):
                probe = bundle.copy()
                probe.params[name] = base.copy()
                probe.params[name][ij] += sign * step
                value = build_loss(Tape(), probe).item()
                numeric[ij] += sign * value
            numeric[ij] /= 2.0 * step
            it.iternext()
        denom = np.maximum(1.0, np.abs(analytic[name]))
        worst = max(worst, float(np.max(np.abs(analytic[name] - numeric) / denom)))
    return worst
