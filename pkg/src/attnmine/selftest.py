"""Quick built-in sanity checks, runnable without a dataset.

Each check recomputes a small closed-form example and compares against the
library. Exercised by ``attnmine selftest``; failures raise AssertionError.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .knowledge import KebConfig, embed_single
from .maps import AttentionMap, KnowledgeMask
from .objective import cross_entropy_spatial, entropy, kld, loss_in_e
from .uncertainty_net import NonLocalBlock


def check_conv(report) -> None:
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, w, b, padding="same").data[0, 0]
    want = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    assert np.array_equal(out, want), f"conv2d 3x3 ones: got {out}"
    report("conv2d same-padding ones kernel matches hand count")


def check_cross_entropy_identity(report) -> None:
    rng = np.random.default_rng(11)
    p = rng.random((4, 4)); p /= p.sum()
    q = rng.random((4, 4)); q /= q.sum()
    lhs = cross_entropy_spatial(p, q)
    rhs = kld(p, q) + entropy(p)
    assert abs(lhs - rhs) < 1e-12, f"CE decomposition off by {lhs - rhs}"
    report("cross-entropy equals divergence plus entropy")


def check_knowledge_embedding(report) -> None:
    label = AttentionMap(np.full((2, 2), 0.25), normalized=True)
    mask = KnowledgeMask(np.array([[1.0, 0.0], [0.0, 0.0]]))
    out = embed_single(label, mask, KebConfig(alpha=0.3)).values
    want = np.array([[0.59090909, 0.13636364], [0.13636364, 0.13636364]])
    assert np.max(np.abs(out - want)) < 1e-7, f"embedding: got {out}"
    report("mask embedding reweights the flagged pixel to 13/22")


def check_nonlocal_identity(report) -> None:
    rng = np.random.default_rng(5)
    block = NonLocalBlock(4, rng)
    x = Tensor(rng.random((1, 4, 6, 6)))
    out = block(x)
    assert np.array_equal(out.data, x.data), "fresh attention block not identity"
    report("fresh non-local block is an exact identity")


def check_uncertainty_stationary_point(report) -> None:
    for k in (0.1, 0.5, 2.0):
        e_star = math.log(2.0 * k)
        vals = [loss_in_e(k, e_star + d) for d in (-1e-4, 0.0, 1e-4)]
        assert vals[1] < vals[0] and vals[1] < vals[2], f"k={k} not a minimum"
        want = 0.5 * (1.0 + math.log(2.0 * k))
        assert abs(vals[1] - want) < 1e-12
    report("per-source loss bottoms out at e = ln(2 KLD)")


CHECKS = (
    check_conv,
    check_cross_entropy_identity,
    check_knowledge_embedding,
    check_nonlocal_identity,
    check_uncertainty_stationary_point,
)


def run_selftest(report=print) -> int:
    for check in CHECKS:
        check(lambda msg: report(f"ok: {msg}"))
    report(f"{len(CHECKS)} checks passed")
    return 0
