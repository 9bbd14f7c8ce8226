"""Small ReLU networks with hand-written backprop, Adam, and a mixture density head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import Diverged, IdentityCollapse
from .gaussian import chol_logdet, spd_inverse

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-5


# ---------------------------------------------------------------- MLP


@dataclass
class Mlp:
    """Affine layers with ReLU between them; ``W[i]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: Literal["linear", "relu"] = "linear"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"incompatible layer shapes {a.shape} -> {b.shape}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(list(params[0::2]), list(params[1::2]), self.output_activation)

    def to_json(self) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "output_activation": self.output_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Mlp":
        dims = obj["layer_dims"]
        ws = [np.asarray(w, dtype=float).reshape(dims[i], dims[i + 1]) for i, w in enumerate(obj["weights"])]
        bs = [np.asarray(b, dtype=float) for b in obj["biases"]]
        return cls(ws, bs, obj.get("output_activation", "linear"))


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator,
             output_activation: Literal["linear", "relu"] = "linear") -> Mlp:
    ws = [glorot_uniform(a, b, rng) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    bs = [np.zeros(b) for b in layer_dims[1:]]
    return Mlp(ws, bs, output_activation)


@dataclass
class MlpCache:
    net: Mlp
    inputs: list[np.ndarray]
    pre: list[np.ndarray]


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    h = np.atleast_2d(np.asarray(x, dtype=float))
    if h.shape[1] != net.weights[0].shape[0]:
        raise ValueError(f"input width {h.shape[1]} != first layer {net.weights[0].shape[0]}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = a if (i == last and net.output_activation == "linear") else np.maximum(a, 0.0)
    return h, MlpCache(net, inputs, pre)


def mlp_backward(cache: MlpCache, grad_output: np.ndarray) -> MlpGrads:
    net = cache.net
    g = np.asarray(grad_output, dtype=float)
    last = len(net.weights) - 1
    gw: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        if not (i == last and net.output_activation == "linear"):
            g = g * (cache.pre[i] > 0)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(0)
        g = g @ net.weights[i].T
    return MlpGrads(gw, gb, g)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: Sequence[np.ndarray]) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------- training config


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-2
    epochs: int = 1200
    k: int = 3
    sigma_floor: float = SIGMA_FLOOR
    ema_momentum: float = 0.99
    entropy_max: bool = False


def _as_column(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def jepa_mse_train(x_c: np.ndarray, x_t: np.ndarray, config: TrainConfig | None = None,
                   rng: np.random.Generator | None = None) -> tuple[Mlp, list[float]]:
    """Full-batch MSE regression ``x_c -> x_t``; returns the net and per-epoch losses."""
    cfg = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    xc, xt = _as_column(x_c), _as_column(x_t)
    net = init_mlp([xc.shape[1], *cfg.hidden, xt.shape[1]], rng)
    params = net.params()
    state = adam_init(params)
    losses: list[float] = []
    for _ in range(cfg.epochs):
        net = net.with_params(params)
        pred, cache = mlp_forward(net, xc)
        resid = pred - xt
        loss = float(np.mean(resid**2))
        if not math.isfinite(loss):
            raise Diverged(f"MSE became {loss} at epoch {len(losses)}")
        losses.append(loss)
        grads = mlp_backward(cache, 2.0 * resid / resid.size)
        params, state = adam_step(params, grads.params(), state, lr=cfg.lr)
    return net.with_params(params), losses


# ---------------------------------------------------------------- MDN


@dataclass
class MdnHead:
    """Linear heads on trunk features: ``K`` logits, ``K x d_t`` means, ``K`` log-sigmas."""

    context_dim: int
    target_dim: int
    k: int
    w_logit: np.ndarray
    b_logit: np.ndarray
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_sig: np.ndarray
    b_sig: np.ndarray
    sigma_floor: float = SIGMA_FLOOR

    def params(self) -> list[np.ndarray]:
        return [self.w_logit, self.b_logit, self.w_mu, self.b_mu, self.w_sig, self.b_sig]

    def with_params(self, p: Sequence[np.ndarray]) -> "MdnHead":
        return MdnHead(self.context_dim, self.target_dim, self.k, *p, sigma_floor=self.sigma_floor)

    def to_json(self) -> dict:
        return {
            "context_dim": self.context_dim,
            "target_dim": self.target_dim,
            "k": self.k,
            "feature_dim": int(self.w_logit.shape[0]),
            "sigma_floor": self.sigma_floor,
            **{n: np.asarray(p).ravel().tolist()
               for n, p in zip(("w_logit", "b_logit", "w_mu", "b_mu", "w_sig", "b_sig"), self.params())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MdnHead":
        f, k, dt = obj["feature_dim"], obj["k"], obj["target_dim"]
        shapes = [(f, k), (k,), (f, k * dt), (k * dt,), (f, k), (k,)]
        names = ("w_logit", "b_logit", "w_mu", "b_mu", "w_sig", "b_sig")
        arrs = [np.asarray(obj[n], dtype=float).reshape(s) for n, s in zip(names, shapes)]
        return cls(obj["context_dim"], dt, k, *arrs, sigma_floor=obj["sigma_floor"])


def init_mdn(
    context_dim: int,
    target_dim: int,
    k: int = 3,
    hidden: Sequence[int] = (64, 64),
    rng: np.random.Generator | None = None,
    sigma_floor: float = SIGMA_FLOOR,
    conditioning: Literal["context", "joint"] = "context",
) -> tuple[Mlp, MdnHead]:
    """Trunk plus head. Only the context may feed the trunk; a joint input is refused
    because the head could then copy ``z_t`` and shrink every sigma to zero."""
    if conditioning != "context":
        raise IdentityCollapse("the MDN must condition on z_c alone, not on the joint [z_c, z_t]")
    rng = rng if rng is not None else np.random.default_rng(0)
    trunk = init_mlp([context_dim, *hidden], rng, output_activation="relu")
    f = hidden[-1]
    head = MdnHead(
        context_dim, target_dim, k,
        glorot_uniform(f, k, rng), np.zeros(k),
        glorot_uniform(f, k * target_dim, rng), np.zeros(k * target_dim),
        glorot_uniform(f, k, rng), np.zeros(k),
        sigma_floor,
    )
    return trunk, head


@dataclass
class MdnParams:
    logits: np.ndarray  # (N, K)
    log_alpha: np.ndarray
    mu: np.ndarray  # (N, K, d_t)
    raw_sigma: np.ndarray  # (N, K), pre-exp
    sigma: np.ndarray
    features: np.ndarray = field(repr=False)
    trunk_cache: MlpCache | None = field(default=None, repr=False)

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)


def mdn_forward(trunk: Mlp, head: MdnHead, x: np.ndarray) -> MdnParams:
    x = _as_column(x)
    if x.shape[1] != head.context_dim:
        raise IdentityCollapse(f"MDN input width {x.shape[1]} != context width {head.context_dim}")
    feats, cache = mlp_forward(trunk, x)
    logits = feats @ head.w_logit + head.b_logit
    mu = (feats @ head.w_mu + head.b_mu).reshape(x.shape[0], head.k, head.target_dim)
    raw = feats @ head.w_sig + head.b_sig
    sigma = np.exp(raw) + head.sigma_floor
    return MdnParams(logits, log_softmax(logits, axis=1), mu, raw, sigma, feats, cache)


def _component_logpdf(p: MdnParams, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = p.mu.shape[2]
    sq = np.sum((t[:, None, :] - p.mu) ** 2, axis=2)
    return -0.5 * d * LOG_2PI - d * np.log(p.sigma) - 0.5 * sq / p.sigma**2, sq


def mdn_nll(params: MdnParams, targets: np.ndarray) -> float:
    """Mean over rows of ``-log sum_k alpha_k N(t | mu_k, sigma_k^2 I)``."""
    t = _as_column(targets)
    logphi, _ = _component_logpdf(params, t)
    return -float(np.mean(logsumexp(params.log_alpha + logphi, axis=1)))


def mdn_nll_grads(params: MdnParams, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`mdn_nll` w.r.t. logits, means and raw log-sigmas."""
    t = _as_column(targets)
    n, _, d = params.mu.shape
    logphi, sq = _component_logpdf(params, t)
    post = softmax(params.log_alpha + logphi, axis=1)
    g_logits = (params.alpha - post) / n
    s2 = params.sigma**2
    g_mu = -post[:, :, None] * (t[:, None, :] - params.mu) / s2[:, :, None] / n
    g_sigma = post * (d / params.sigma - sq / (s2 * params.sigma)) / n
    g_raw = g_sigma * np.exp(params.raw_sigma)
    return g_logits, g_mu, g_raw


def mdn_backward(trunk: Mlp, head: MdnHead, params: MdnParams,
                 g_logits: np.ndarray, g_mu: np.ndarray, g_raw: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Chain head gradients into every trunk and head parameter; also returns ``dL/dx``."""
    f = params.features
    g_mu2 = g_mu.reshape(g_mu.shape[0], -1)
    head_grads = [f.T @ g_logits, g_logits.sum(0), f.T @ g_mu2, g_mu2.sum(0), f.T @ g_raw, g_raw.sum(0)]
    g_feat = g_logits @ head.w_logit.T + g_mu2 @ head.w_mu.T + g_raw @ head.w_sig.T
    tg = mlp_backward(params.trunk_cache, g_feat)  # type: ignore[arg-type]
    return tg.params() + head_grads, tg.input


@dataclass
class EmaCovariance:
    cov: np.ndarray
    momentum: float = 0.99
    jitter: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def ema_cov_update(ema: EmaCovariance, zc_batch: np.ndarray) -> EmaCovariance:
    """``cov <- m cov + (1 - m)(Z^T Z / N + jitter I)``."""
    z = _as_column(zc_batch)
    if z.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    batch = z.T @ z / z.shape[0] + ema.jitter * np.eye(z.shape[1])
    m = ema.momentum
    return EmaCovariance(m * ema.cov + (1.0 - m) * batch, m, ema.jitter)


@dataclass
class LossResult:
    value: float
    param_grads: list[np.ndarray]
    zc_grad: np.ndarray
    marginal: float
    conditional: float


def gmje_mdn_loss(trunk: Mlp, head: MdnHead, zc_batch: np.ndarray, zt_batch: np.ndarray,
                  ema: EmaCovariance, entropy_max: bool = False) -> LossResult:
    """Marginal Gaussian term on ``z_c`` (``Sigma`` frozen) plus the MDN conditional NLL.

    With ``entropy_max`` the log-determinant enters with a minus sign.
    """
    zc, zt = _as_column(zc_batch), _as_column(zt_batch)
    _, logdet = chol_logdet(ema.cov)
    prec = spd_inverse(ema.cov)
    n = zc.shape[0]
    maha = np.einsum("ni,ij,nj->n", zc, prec, zc)
    marginal = 0.5 * float(np.mean(maha)) + (-0.5 if entropy_max else 0.5) * logdet
    p = mdn_forward(trunk, head, zc)
    cond = mdn_nll(p, zt)
    grads, g_in = mdn_backward(trunk, head, p, *mdn_nll_grads(p, zt))
    return LossResult(marginal + cond, grads, zc @ prec / n + g_in, marginal, cond)


@dataclass
class MdnModel:
    trunk: Mlp
    head: MdnHead
    ema: EmaCovariance

    def to_json(self) -> dict:
        return {"trunk": self.trunk.to_json(), "head": self.head.to_json(),
                "ema": {"cov": self.ema.cov.ravel().tolist(), "momentum": self.ema.momentum,
                        "jitter": self.ema.jitter}}

    @classmethod
    def from_json(cls, obj: dict) -> "MdnModel":
        head = MdnHead.from_json(obj["head"])
        e = obj["ema"]
        cov = np.asarray(e["cov"], dtype=float).reshape(head.context_dim, head.context_dim)
        return cls(Mlp.from_json(obj["trunk"]), head, EmaCovariance(cov, e["momentum"], e["jitter"]))


def train_gmje_mdn(x_c: np.ndarray, x_t: np.ndarray, config: TrainConfig | None = None,
                   rng: np.random.Generator | None = None) -> tuple[MdnModel, list[float]]:
    """Full-batch Adam on :func:`gmje_mdn_loss`, refreshing the EMA covariance every epoch."""
    cfg = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    xc, xt = _as_column(x_c), _as_column(x_t)
    trunk, head = init_mdn(xc.shape[1], xt.shape[1], cfg.k, cfg.hidden, rng, cfg.sigma_floor)
    ema = EmaCovariance(xc.T @ xc / xc.shape[0], cfg.ema_momentum)
    n_trunk = len(trunk.params())
    params = trunk.params() + head.params()
    state = adam_init(params)
    losses: list[float] = []
    for _ in range(cfg.epochs):
        trunk = trunk.with_params(params[:n_trunk])
        head = head.with_params(params[n_trunk:])
        res = gmje_mdn_loss(trunk, head, xc, xt, ema, cfg.entropy_max)
        if not math.isfinite(res.value):
            raise Diverged(f"loss became {res.value} at epoch {len(losses)}")
        losses.append(res.value)
        params, state = adam_step(params, res.param_grads, state, lr=cfg.lr)
        ema = ema_cov_update(ema, xc)
    trunk = trunk.with_params(params[:n_trunk])
    head = head.with_params(params[n_trunk:])
    return MdnModel(trunk, head, ema), losses
