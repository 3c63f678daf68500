"""Gradient-integrity battery.

Runs :func:`m3ad.numerics.grad_check` (central finite differences) over
every primitive op and over the composite pieces of the network, all in
double precision. The battery is shared by the ``gradcheck`` CLI command
and the acceptance tests; thresholds are 1e-5 for primitives and 1e-3
for composites.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .backbone import M3ADBlock, WindowAttention
from .config import ModelConfig
from .heads_losses import finetune_loss
from .model import M3ADNet
from .moe import MMoELayer, task_routing
from .numerics import Tensor, grad_check
from .priors import Fusion, PriorEncoder
from .tokmlp import TokMLPBlock, conv3x3, dwconv3x3

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-3


def _t(rng, *shape, positive=False, away_from_zero=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    if away_from_zero:
        data = np.where(np.abs(data) < 0.2, data + 0.4 * np.sign(data) + 0.2, data)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _weight(rng, shape):
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)


def check_primitives(rng: np.random.Generator | None = None) -> dict[str, float]:
    """Max relative gradient error per primitive op."""
    rng = rng or np.random.default_rng(7)
    out: dict[str, float] = {}

    def run(name, f, params):
        out[name] = grad_check(f, params, rng=rng)

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    w = _weight(rng, (3, 4))
    run("add", lambda: nm.mul(nm.add(a, b), w).sum(), [a, b])
    run("sub", lambda: nm.mul(nm.sub(a, b), w).sum(), [a, b])
    run("mul", lambda: nm.mul(nm.mul(a, b), w).sum(), [a, b])
    bp = _t(rng, 3, 4, positive=True)
    run("div", lambda: nm.mul(nm.div(a, bp), w).sum(), [a, bp])
    run("neg", lambda: nm.mul(nm.neg(a), w).sum(), [a])

    row = _t(rng, 1, 4)
    run("add_broadcast", lambda: nm.mul(nm.add(a, row), w).sum(), [a, row])

    m1, m2 = _t(rng, 3, 5), _t(rng, 5, 2)
    wm = _weight(rng, (3, 2))
    run("matmul", lambda: nm.mul(nm.matmul(m1, m2), wm).sum(), [m1, m2])
    mb1, mb2 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
    wb = _weight(rng, (2, 3, 2))
    run("matmul_batched", lambda: nm.mul(nm.matmul(mb1, mb2), wb).sum(), [mb1, mb2])

    x = _t(rng, 4, 5)
    wx = _weight(rng, (4, 5))
    run("exp", lambda: nm.mul(nm.exp(x), wx).sum(), [x])
    xp = _t(rng, 4, 5, positive=True)
    run("log", lambda: nm.mul(nm.log(xp), wx).sum(), [xp])
    run("sqrt", lambda: nm.mul(nm.sqrt(xp), wx).sum(), [xp])
    xz = _t(rng, 4, 5, away_from_zero=True)
    run("abs", lambda: nm.mul(nm.absolute(xz), wx).sum(), [xz])
    run("relu", lambda: nm.mul(nm.relu(xz), wx).sum(), [xz])
    run("clamp_min", lambda: nm.mul(nm.clamp_min(xz, 0.1), wx).sum(), [xz])
    run("sigmoid", lambda: nm.mul(nm.sigmoid(x), wx).sum(), [x])
    run("softplus", lambda: nm.mul(nm.softplus(x), wx).sum(), [x])
    run("gelu", lambda: nm.mul(nm.gelu(x), wx).sum(), [x])

    w0 = _weight(rng, (5,))
    run("sum_axis", lambda: nm.mul(nm.tsum(x, axis=0), w0).sum(), [x])
    run("mean_axis", lambda: nm.mul(nm.tmean(x, axis=0), w0).sum(), [x])
    run("mean_all", lambda: x.mean(), [x])

    run("reshape", lambda: nm.mul(nm.reshape(x, (2, 10)), _w_cached(rng, "rs", (2, 10))).sum(), [x])
    run("transpose", lambda: nm.mul(nm.transpose(x, (1, 0)), _w_cached(rng, "tp", (5, 4))).sum(), [x])
    run("getitem", lambda: nm.mul(x[1:3, ::2], _w_cached(rng, "gi", (2, 3))).sum(), [x])
    table = _t(rng, 6, 3)
    idx = np.array([0, 2, 2, 5, 1])
    run("take", lambda: nm.mul(nm.take(table, idx), _w_cached(rng, "tk", (5, 3))).sum(), [table])
    run("concat", lambda: nm.mul(nm.concat([a, b], axis=1), _w_cached(rng, "cc", (3, 8))).sum(), [a, b])
    g4 = _t(rng, 2, 4, 4, 3)
    w4 = _weight(rng, (2, 4, 4, 3))
    run("roll", lambda: nm.mul(nm.roll(g4, (1, -2), axis=(1, 2)), w4).sum(), [g4])
    run("pad2d", lambda: nm.mul(nm.pad2d(x, 1, 2, 0, 1), _w_cached(rng, "pd", (7, 6))).sum(), [x])
    run("broadcast_to", lambda: nm.mul(nm.broadcast_to(row, (3, 4)), w).sum(), [row])

    run("softmax", lambda: nm.mul(nm.softmax(x, axis=-1), wx).sum(), [x])
    gamma, beta = _t(rng, 5), _t(rng, 5)
    run("layer_norm", lambda: nm.mul(nm.layer_norm(x, gamma, beta), wx).sum(), [x, gamma, beta])
    logits = _t(rng, 4, 3)
    labels = np.array([0, 2, 1, 1])
    run("cross_entropy", lambda: nm.cross_entropy(logits, labels), [logits])

    img = _t(rng, 2, 4, 4, 3)
    cw, cb = _t(rng, 3, 3, 3, 2), _t(rng, 2)
    wconv = _weight(rng, (2, 4, 4, 2))
    run("conv3x3", lambda: nm.mul(conv3x3(img, cw, cb), wconv).sum(), [img, cw, cb])
    dw, db = _t(rng, 3, 3, 3), _t(rng, 3)
    run("dwconv3x3", lambda: nm.mul(dwconv3x3(img, dw, db), w4).sum(), [img, dw, db])
    return out


_W_CACHE: dict[str, np.ndarray] = {}


def _w_cached(rng, key, shape):
    if key not in _W_CACHE:
        _W_CACHE[key] = _weight(rng, shape)
    return _W_CACHE[key]


def _toy_cfg(**overrides) -> ModelConfig:
    base = dict(embed_dim=8, depths=(2, 1, 1, 1), num_heads=(1, 2, 4, 8),
                window=4, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base).validate()


def check_composites(rng: np.random.Generator | None = None) -> dict[str, float]:
    """Max relative gradient error per composite component, double
    precision, on toy extents (embed dim 8, 2-sample batches)."""
    rng = rng or np.random.default_rng(11)
    out: dict[str, float] = {}
    dt = np.float64

    def run(name, f, module, coords=4):
        params = list(module.named_parameters().values()) if hasattr(module, "named_parameters") else module
        out[name] = grad_check(f, params, coords_per_tensor=coords, rng=rng)

    # attention-mixer block, shifted, with gate routing
    mrng = np.random.default_rng(3)
    attn = WindowAttention(mrng, 8, 2, 4, dt)
    moe = MMoELayer(mrng, 8, 8, 2, 2, 1.0, dt)
    block = M3ADBlock(attn, moe, 8, dt, shifted=True, window=4)
    xg = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(dt))
    wg = _weight(rng, (2, 8, 8, 8))
    run("m3ad_block_attention",
        lambda: nm.mul(block(xg, task_routing("diagnosis")), wg).sum(), block)

    tok = TokMLPBlock(mrng, 8, dt)
    x4 = Tensor(rng.standard_normal((2, 4, 4, 8)).astype(dt))
    wt = _weight(rng, (2, 4, 4, 8))
    run("tokmlp_block", lambda: nm.mul(tok(x4), wt).sum(), tok)

    enc = PriorEncoder(mrng, 8, dt)
    pv = Tensor(rng.standard_normal((2, 3)).astype(dt))
    we = _weight(rng, (2, 8))
    run("prior_encoder", lambda: nm.mul(enc(pv), we).sum(), enc, coords=3)

    tokens = Tensor(rng.standard_normal((2, 6, 8)).astype(dt))
    clin = Tensor(rng.standard_normal((2, 8)).astype(dt))
    wf = _weight(rng, (2, 6, 8))
    for kind in ("adaptive", "concat", "add", "hadamard"):
        fus = Fusion(np.random.default_rng(5), kind, 8, dt)
        run(f"fusion_{kind}", lambda fus=fus: nm.mul(fus(tokens, clin), wf).sum(), fus)

    model = M3ADNet(_toy_cfg(), seed=13)
    images = rng.standard_normal((2, 32, 32)).astype(dt)
    priors = rng.standard_normal((2, 3)).astype(dt)
    diag_y = np.array([0, 2])
    change_y = np.array([1, 0])

    def full_loss():
        dl, cl = model.dual_task_logits(images, priors)
        return finetune_loss(dl, cl, diag_y, change_y)

    run("finetune_loss_full", full_loss, model, coords=2)
    return out


def run_battery() -> tuple[dict[str, float], dict[str, float]]:
    return check_primitives(), check_composites()
