"""Quick in-process checks of the engine and metrics against independent references."""

from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .metrics import assignment_w2, pmgk, rnmse


def _fd_cases(rng):
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    P = rng.uniform(0.5, 2.0, (3, 4))
    yield "matmul", lambda x: ad.tsum(ad.matmul(x, B)), A
    yield "mul", lambda x: ad.tsum(ad.mul(x, x)), A
    yield "div", lambda x: ad.tsum(ad.div(1.0, x)), P
    yield "exp", lambda x: ad.tsum(ad.exp(x)), A
    yield "log", lambda x: ad.tsum(ad.log(x)), P
    yield "sqrt", lambda x: ad.tsum(ad.sqrt(x)), P
    yield "sigmoid", lambda x: ad.tsum(ad.sigmoid(x)), A
    yield "log_softmax", lambda x: ad.tsum(ad.mul(ad.log_softmax(x), A)), A
    yield "row_softmax", lambda x: ad.tsum(ad.mul(ad.row_softmax(x), A)), A
    yield "power", lambda x: ad.tsum(ad.power(x, 1.5)), P
    yield "trace", lambda x: ad.trace(ad.matmul(x, ad.transpose(x))), A

    def grad_norm(x):
        g = ad.grad(ad.tsum(ad.mul(ad.sigmoid(ad.matmul(x, B)), ad.matmul(x, B))), x, create_graph=True)
        return ad.tsum(ad.mul(g, g))

    yield "second-order", grad_norm, A


def run(verbose: bool = False, seed: int = 0):
    rng = np.random.default_rng(seed)
    passed = failed = 0

    def report(name, ok, detail=""):
        nonlocal passed, failed
        passed += ok
        failed += not ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")

    for name, f, x in _fd_cases(rng):
        err = ad.finite_diff_check(f, x, eps=1e-6)
        report(f"fd:{name}", err < (1e-3 if name == "second-order" else 1e-4), f"rel={err:.2e}")

    for i in range(5):
        a = rng.standard_normal((5, 3))
        b = rng.standard_normal((5, 3))
        brute = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(5)))
        report(f"w2:exhaustive#{i}", abs(assignment_w2(a, b) - brute) < 1e-10)

    H = rng.standard_normal((8, 4))
    report("pmgk:self", abs(pmgk(H, H, 4) - 1.0) < 1e-12)
    X = rng.standard_normal((6, 3)) + 0.1
    Xh = rng.standard_normal((6, 3))
    report("rnmse:scale", abs(rnmse(2.5 * Xh, 2.5 * X) - rnmse(Xh, X)) < 1e-12)
    return passed, failed
