"""Central finite-difference checks of every differentiable op (double precision)."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ctan import attention, ops
from ctan.backbone import BackboneConfig, StageConfig, classify_action, discriminate_domain, extract_features, init_model
from ctan.tensor import Tensor, backward

STEP = 1e-4
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over elements of ``|a - g| / max(1e-8, |a| + |g|)``."""
    a, g = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return float(np.max(np.abs(a - g) / np.maximum(1e-8, np.abs(a) + np.abs(g))))


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


@dataclass
class Case:
    """A tape objective plus the finite-difference oracle it must match.

    By default the oracle differentiates ``build`` itself.  A reversal layer
    makes the tape gradient differ from the derivative of the forward
    function, so such cases give reversal-free ``terms`` and, per input, the
    factor each term's numerical gradient is scaled by.
    """

    build: Callable[[Sequence[Tensor]], Tensor]
    arrays: list[np.ndarray]
    terms: Callable[[Sequence[Tensor]], list[Tensor]] | None = None
    scales: list[list[float]] | None = None


def check_graph(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                step: float = STEP, seed: int = 0, terms=None, scales=None) -> float:
    """Max relative error between tape and finite-difference gradients of
    ``sum(w * build(inputs))`` for a fixed random projection ``w``, over all inputs."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(leaves)
    w = Tensor(np.random.default_rng(seed).uniform(0.5, 1.5, out.shape), dtype=np.float64)

    def project(y):
        return ops.sum_all(ops.broadcast_mul(w, y)) if y.shape else y

    backward(project(build(leaves)))
    if terms is None:
        terms, scales = (lambda ts: [build(ts)]), [[1.0]] * len(leaves)
    worst = 0.0
    for leaf, leaf_scales in zip(leaves, scales):
        numeric = np.zeros_like(leaf.data)
        for k, s in enumerate(leaf_scales):
            def f():
                return project(terms([Tensor(l.data, dtype=np.float64) for l in leaves])[k]).item()

            if s != 0.0:
                numeric += s * numerical_gradient(f, leaf.data, step)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _fixed_rng_dropout(p, seed):
    # the same mask on every re-evaluation, so finite differences see one function
    return lambda x: ops.dropout(x, p, True, np.random.default_rng(seed))


def _composite_case(rng):
    cfg = BackboneConfig(stages=(StageConfig(3, (3, 3, 3), (1, 2, 2), (1, 1, 1)),
                                 StageConfig(4, (1, 3, 3), (1, 1, 1), (0, 1, 1)),
                                 StageConfig(4, (1, 1, 1), (1, 1, 1), (0, 0, 0))),
                         cta_after=(2,), variant="CT", r=2, frames=4, height=5, width=5,
                         hidden_action=5, hidden_domain=5)
    bundle = init_model(cfg, 3, seed=7, dtype=np.float64)
    names = list(bundle.params)
    # nonzero biases so every bias gradient path is exercised away from init
    arrays = [bundle.params[n].data + (rng.uniform(-0.2, 0.2, bundle.params[n].shape) if n.endswith(("b1", "b2", "bias")) else 0)
              for n in names]
    x = rng.uniform(0, 1, (2, 4, 1, 5, 5))
    labels = np.array([0, 2])

    lam = 0.7

    def parts(ts, reverse):
        for n, t in zip(names, ts[1:]):
            bundle.params[n] = t
        feats = extract_features(ts[0], bundle, True)
        logits = classify_action(feats, bundle, True, rng=np.random.default_rng(3))
        l_y = ops.softmax_cross_entropy(logits, labels)
        l_d = ops.softmax_cross_entropy(discriminate_domain(feats, bundle, lam, reverse), np.array([1, 0]))
        return [l_y, l_d]

    def build(ts):
        return ops.add(*parts(ts, True))

    # the reversal negates and scales L_d's gradient everywhere upstream of the domain head
    scales = [[1.0, -lam]] + [[1.0, 1.0 if n.startswith(("domain.", "action.")) else -lam] for n in names]
    return Case(build, [x] + arrays, lambda ts: parts(ts, False), scales)


def gradcheck_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    cp = attention.init_channel_params(8, 4, rng, np.float64)
    tp = attention.init_temporal_params(4, 2, rng, np.float64)
    cp_arrays = [a.data + rng.uniform(-0.3, 0.3, a.shape) for a in (cp.w1, cp.w2, cp.b1, cp.b2)]
    tp_arrays = [a.data + rng.uniform(-0.3, 0.3, a.shape) for a in (tp.w1, tp.w2, tp.b1, tp.b2)]
    video = rng.normal(0, 1, (2, 4, 8, 3, 3))

    def ca(ts):
        p = attention.ChannelAttentionParams(w1=ts[1], w2=ts[2], b1=ts[3], b2=ts[4], r=4)
        return attention.channel_attention(ts[0], p)[0]

    def ta(ts):
        p = attention.TemporalAttentionParams(w1=ts[1], w2=ts[2], b1=ts[3], b2=ts[4], r=2)
        return attention.temporal_attention(ts[0], p)[0]

    def cta(ts):
        c = attention.ChannelAttentionParams(w1=ts[1], w2=ts[2], b1=ts[3], b2=ts[4], r=4)
        t = attention.TemporalAttentionParams(w1=ts[5], w2=ts[6], b1=ts[7], b2=ts[8], r=2)
        return attention.cta_forward(ts[0], "CT", c, t)

    cases: dict = {
        "avg_pool_axes": (lambda ts: ops.avg_pool_axes(ts[0], (1, 3, 4)), [rng.normal(size=(2, 3, 4, 2, 2))]),
        "linear": (lambda ts: ops.linear(ts[0], ts[1], ts[2]),
                   [rng.normal(size=(4, 6)), rng.normal(size=4), rng.normal(size=(2, 5, 6))]),
        "relu": (lambda ts: ops.relu(ts[0]), [_away_from_zero(rng, (3, 7))]),
        "sigmoid": (lambda ts: ops.sigmoid(ts[0]), [rng.normal(0, 2, (3, 7))]),
        "broadcast_mul": (lambda ts: ops.broadcast_mul(ts[0], ts[1]),
                          [rng.normal(size=(2, 1, 3, 1, 1)), rng.normal(size=(2, 4, 3, 2, 2))]),
        "add": (lambda ts: ops.add(ts[0], ts[1]), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "scale": (lambda ts: ops.scale(ts[0], -2.5), [rng.normal(size=(5,))]),
        "standardize": (lambda ts: ops.standardize(ts[0], 0.3, 0.2), [rng.normal(size=(2, 3))]),
        "sample_standardize": (lambda ts: ops.sample_standardize(ts[0]), [rng.normal(size=(2, 3, 4))]),
        "sum_all": (lambda ts: ops.sum_all(ts[0]), [rng.normal(size=(2, 3))]),
        "reshape": (lambda ts: ops.reshape(ts[0], (6, 2)), [rng.normal(size=(3, 4))]),
        "concat": (lambda ts: ops.concat([ts[0], ts[1]]), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
        "conv3d": (lambda ts: ops.conv3d(ts[0], ts[1], ts[2], (1, 2, 2), (1, 1, 1)),
                   [rng.normal(size=(1, 4, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)]),
        "softmax_cross_entropy": (lambda ts: ops.softmax_cross_entropy(ts[0], np.array([0, 3, 1])),
                                  [rng.normal(0, 2, (3, 4))]),
        "grad_reverse": Case(lambda ts: ops.grad_reverse(ts[0], 0.6), [rng.normal(size=(4, 3))],
                             lambda ts: [ts[0]], [[-0.6]]),
        "dropout": (lambda ts: _fixed_rng_dropout(0.5, 11)(ts[0]), [rng.normal(size=(4, 5))]),
        "channel_attention": (ca, [video] + cp_arrays),
        "temporal_attention": (ta, [video] + tp_arrays),
        "cta_block": (cta, [video] + cp_arrays + tp_arrays),
        "cta_block+heads": _composite_case(rng),
    }
    return {k: v if isinstance(v, Case) else Case(*v) for k, v in cases.items()}


@dataclass
class GradcheckRow:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_gradcheck(seed: int = 0, names: Sequence[str] | None = None) -> list[GradcheckRow]:
    rows = []
    for name, case in gradcheck_cases(seed).items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        err = check_graph(case.build, case.arrays, terms=case.terms, scales=case.scales)
        rows.append(GradcheckRow(name, err, time.perf_counter() - t0))
    return rows


def format_report(rows: Sequence[GradcheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{r.name.ljust(width)}  max_rel_err={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}"
             for r in rows]
    lines.append(f"{'all' if all(r.passed for r in rows) else 'some'} ops "
                 f"{'pass' if all(r.passed for r in rows) else 'FAIL'} (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
