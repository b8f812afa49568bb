"""Gradient verification suites.

Two layers of checking: every differentiable primitive against central
finite differences at seeded generic points (target 1e-6), and the full
tiny model through the composite loss (target 1e-4). Generic points
matter: zero-initialized sampling offsets sit exactly on bilinear-
interpolation kinks, so the model check nudges them off first, and
clamp-style ops are only probed away from their kinks.
"""

from __future__ import annotations

import contextlib
import time

import numpy as np

from . import tensor as T
from .config import RunConfig, TINY_PRESET
from .data import HoiAnnotation
from .errors import ConfigError
from .heads import composite_loss, match_batch
from .model import HoiModel
from .tensor import Tensor

PER_OP_TARGET = 1e-6
MODEL_TARGET = 1e-4
PARAM_CAP = 200_000


def _leaf(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weigher(rng, shape):
    """A fixed random projection to a scalar, frozen at creation time so
    repeated objective evaluations see the same function."""
    w = Tensor(rng.normal(size=shape))
    return lambda x: T.reduce_sum(x * w)


def _op_checks(rng):
    """Yield (name, objective, leaves) triples covering every primitive."""
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 5))
    w = _weigher(rng, (3, 5))
    yield "matmul", lambda: w(T.matmul(a, b)), [a, b]

    x = _leaf(rng, (4, 6))
    w = _weigher(rng, (4, 6))
    yield "softmax", lambda: w(T.softmax(x, axis=1)), [x]

    # keep probes clear of the clamp kinks at +-3
    hs = Tensor(np.array([-2.7, -1.1, 0.2, 1.4, 2.8, -4.5, 5.0]), requires_grad=True)
    w = _weigher(rng, (7,))
    yield "hard_sigmoid", lambda: w(T.hard_sigmoid(hs)), [hs]

    fmap = _leaf(rng, (5, 6, 3))
    pts = Tensor(rng.uniform(0.15, 0.85, size=(8, 2)), requires_grad=True)
    w = _weigher(rng, (8, 3))
    yield "bilinear_sample", lambda: w(T.bilinear_sample(fmap, pts)), [fmap, pts]

    d = 8
    mha = T.MultiHeadAttention(
        2,
        T.Parameter(rng.normal(size=(d, d)) * 0.4, "gc.wq"),
        T.Parameter(rng.normal(size=(d, d)) * 0.4, "gc.wk"),
        T.Parameter(rng.normal(size=(d, d)) * 0.4, "gc.wv"),
        T.Parameter(rng.normal(size=(d, d)) * 0.4, "gc.wo"))
    q = _leaf(rng, (3, d), -1, 1)
    kv = _leaf(rng, (4, d), -1, 1)
    w = _weigher(rng, (3, d))
    yield "multi_head_attention", lambda: w(mha(q, kv, kv)), [q, kv] + mha.params()

    # elementwise ops at points away from their kinks
    r = Tensor(rng.uniform(0.1, 2.0, size=9) * rng.choice([-1, 1], size=9),
               requires_grad=True)
    w = _weigher(rng, (9,))
    yield "relu", lambda: w(T.relu(r)), [r]
    yield "abs", lambda: w(T.absolute(r)), [r]

    s = _leaf(rng, (9,), -3, 3)
    yield "sigmoid", lambda: w(T.sigmoid(s)), [s]
    yield "log_sigmoid", lambda: w(T.log_sigmoid(s)), [s]
    yield "exp", lambda: w(T.exp(s)), [s]

    pos = Tensor(rng.uniform(0.2, 3.0, size=7), requires_grad=True)
    w7 = _weigher(rng, (7,))
    yield "log", lambda: w7(T.log(pos)), [pos]
    yield "power", lambda: w7(T.power(pos, -0.5)), [pos]

    m1 = _leaf(rng, (6,))
    m2 = Tensor(m1.data + rng.uniform(0.2, 1.0, size=6) * rng.choice([-1, 1], size=6),
                requires_grad=True)
    w6 = _weigher(rng, (6,))
    yield "maximum", lambda: w6(T.maximum(m1, m2)), [m1, m2]
    yield "minimum", lambda: w6(T.minimum(m1, m2)), [m1, m2]

    u = _leaf(rng, (3, 5))
    v = _leaf(rng, (3, 5))
    w35 = _weigher(rng, (3, 5))
    yield "add", lambda: w35(u + v), [u, v]
    yield "sub", lambda: w35(u - v), [u, v]
    yield "mul", lambda: w35(u * v), [u, v]
    offset = Tensor(v.data + np.where(np.abs(v.data) < 0.5, 1.0, 0.0), requires_grad=True)
    yield "div", lambda: w35(u / offset), [u, offset]

    w5 = _weigher(rng, (5,))
    w3 = _weigher(rng, (3,))
    yield "sum", lambda: w5(T.reduce_sum(u, axis=0)), [u]
    yield "mean", lambda: w3(T.reduce_mean(u, axis=1)), [u]
    mx = Tensor(rng.permutation(15).astype(float).reshape(3, 5) * 0.37,
                requires_grad=True)  # distinct entries: max has a unique argmax
    yield "max", lambda: w3(T.reduce_max(mx, axis=1)), [mx]

    wcat = _weigher(rng, (3, 10))
    wstk = _weigher(rng, (2, 3, 5))
    yield "concat", lambda: wcat(T.concat([u, v], axis=1)), [u, v]
    yield "stack", lambda: wstk(T.stack([u, v], axis=0)), [u, v]
    yield "reshape", lambda: w35(T.reshape(u, (5, 3)).reshape(3, 5)), [u]
    yield "transpose", lambda: w35(T.transpose(T.transpose(u, (1, 0)), (1, 0))), [u]
    wslice = _weigher(rng, (2, 3))
    yield "getitem", lambda: wslice(u[1:, 2:]), [u]
    wtake = _weigher(rng, (3,))
    yield "take_pairs", lambda: wtake(
        T.take_pairs(u, np.array([0, 2, 0]), np.array([1, 3, 1]))), [u]

    g = T.Parameter(rng.uniform(0.5, 1.5, size=5), "gc.ln.g")
    bb = T.Parameter(rng.uniform(-0.5, 0.5, size=5), "gc.ln.b")
    ln = T.LayerNorm(g, bb)
    yield "layer_norm", lambda: w35(ln(u)), [u, g, bb]


def check_ops(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Max relative FD error per primitive op."""
    results = {}
    for name, f, leaves in _op_checks(np.random.default_rng(seed)):
        results[name] = T.finite_diff_check(f, leaves, eps=eps)
    return results


def check_model(seed: int = 0, eps: float = 1e-5, coords_per_group: int = 4,
                cfg: RunConfig | None = None) -> tuple[dict[str, float], int]:
    """FD-check the full tiny model through matching-frozen composite loss.

    Samples ``coords_per_group`` coordinates per parameter tensor.
    Returns (per-component max error, parameter count).
    """
    cfg = cfg or RunConfig(seed=seed, **TINY_PRESET)
    model = HoiModel(cfg)
    if model.param_count() > PARAM_CAP:
        raise ConfigError(
            f"gradient check refused: {model.param_count()} parameters exceed "
            f"the {PARAM_CAP} cap; use a smaller config")

    # generic point: move sampling offsets off the bilinear kinks
    jitter = np.random.default_rng(seed + 1)
    for name, p in model.store.params.items():
        if "offsets" in name:
            p.data = p.data + jitter.uniform(-0.35, 0.35, size=p.data.shape)

    img_rng = np.random.default_rng(seed + 2)
    side = 8 * 2 ** (cfg.n_levels - 1)
    images = img_rng.uniform(0, 1, size=(1, 2 * side, 2 * side, 3))
    gts = [[HoiAnnotation(
        human_box=np.array([0.35, 0.45, 0.25, 0.3]),
        object_box=np.array([0.6, 0.5, 0.2, 0.25]),
        object_class=min(1, cfg.num_objects - 1),
        verb_vector=(np.arange(cfg.num_verbs) % 2 == 1).astype(float)
        if cfg.num_verbs > 1 else np.ones(1))]]

    pred0, _, _ = model.forward(images)
    matchings = match_batch(pred0, gts, cfg)

    def objective():
        pred, _, _ = model.forward(images)
        return composite_loss(pred, gts, matchings, cfg)[0]

    coord_rng = np.random.default_rng(seed + 3)
    errors = {}
    for group, plist in model.parameter_groups().items():
        errors[group] = T.finite_diff_check(objective, plist, eps=eps,
                                            max_coords=coords_per_group,
                                            rng=coord_rng)
    return errors, model.param_count()


def run_suite(seed: int = 0, corrupt: bool = False) -> dict:
    """Full gradient suite; the report mirrors what the CLI prints."""
    t0 = time.time()
    with _corrupted_relu() if corrupt else contextlib.nullcontext():
        op_errors = check_ops(seed=seed)
        model_errors, n_params = check_model(seed=seed)
    worst_op = max(op_errors.values())
    worst_model = max(model_errors.values())
    return {
        "ops": {k: float(v) for k, v in sorted(op_errors.items())},
        "model": {k: float(v) for k, v in sorted(model_errors.items())},
        "max_op_rel_err": float(worst_op),
        "max_model_rel_err": float(worst_model),
        "op_target": PER_OP_TARGET,
        "model_target": MODEL_TARGET,
        "param_count": int(n_params),
        "passed": bool(worst_op < PER_OP_TARGET and worst_model < MODEL_TARGET),
        "runtime_s": round(time.time() - t0, 2),
    }


@contextlib.contextmanager
def _corrupted_relu():
    """Negative control: scale the relu gradient so the suite must fail."""
    original = T.relu

    def bad_relu(x):
        mask = (x.data > 0) * 1.001
        return T._record("relu", (x,), np.where(x.data > 0, x.data, 0.0),
                         lambda g: (g * mask,))

    T.relu = bad_relu
    try:
        yield
    finally:
        T.relu = original
