"""Low-rank sink-attention gate: forward scoring and analytic gradients.

The gate maps a hidden state h ∈ R^D to per-KV-head importance scores in
(0,1). Projected queries/keys are RMS-normalized with learnable per-dim
scales; the score for head h is the mean over group members j of

    exp(e) / (exp(e) + Σ_r exp(c_r) + b)

where e = q_j·k, c_r = q_j·k_sink_r, and b = softplus(β) ≥ 0. No 1/√D′
scaling on the dot products. The gate sees no positional information.

Ablation variants: no_denominator (Σ exp(c)+b ≡ 1, i.e. sigmoid of e),
a two-layer SwiGLU MLP with matched parameter count, and a plain linear
head.

All math runs in f64; parameters live in f64 and serialize as f32.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import serial

SCORE_CLAMP = 1e-7

VARIANTS = ("sink_attention", "no_denominator", "mlp", "linear")


@dataclass(frozen=True)
class GateConfig:
    d_model: int
    n_kv_heads: int
    group_size: int
    d_low: int = 16
    n_sinks: int = 16
    variant: str = "sink_attention"
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_low < 1:
            raise ValueError("d_low must be >= 1")
        if self.n_sinks < 0:
            raise ValueError("n_sinks must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown gate variant {self.variant!r}")


class GateParams:
    """Named parameter tensors of one gate instance (f64 in memory)."""

    def __init__(self, config: GateConfig, tensors):
        self.config = config
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite gate parameter {name}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self):
        return GateParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())

    def allclose(self, other):
        return sorted(self.names()) == sorted(other.names()) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def sink_attention_param_count(config: GateConfig):
    c = config
    return (c.n_kv_heads * c.d_low * c.d_model
            + c.group_size * c.n_kv_heads * c.d_low * c.d_model
            + 2 * c.d_low
            + c.n_sinks * c.n_kv_heads * c.d_low
            + c.group_size * c.n_kv_heads)


def mlp_hidden_width(config: GateConfig):
    """Hidden width matching the sink-attention parameter count within 2%."""
    target = sink_attention_param_count(config)
    width = max(1, round((target - config.n_kv_heads)
                         / (2 * config.d_model + config.n_kv_heads)))
    return width


def init_gate(config: GateConfig, seed: int) -> GateParams:
    """Projections and sinks ~ normal(0, 0.02); γ = 1; β = 0 so b = ln 2."""
    rng = np.random.default_rng(seed)
    c = config

    def draw(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    if c.variant == "sink_attention":
        tensors = {
            "w_k": draw(c.n_kv_heads * c.d_low, c.d_model),
            "w_q": draw(c.group_size * c.n_kv_heads * c.d_low, c.d_model),
            "gamma_k": np.ones(c.d_low),
            "gamma_q": np.ones(c.d_low),
            "k_sink": draw(c.n_sinks, c.n_kv_heads, c.d_low),
            "beta": np.zeros((c.group_size, c.n_kv_heads)),
        }
    elif c.variant == "no_denominator":
        tensors = {
            "w_k": draw(c.n_kv_heads * c.d_low, c.d_model),
            "w_q": draw(c.group_size * c.n_kv_heads * c.d_low, c.d_model),
            "gamma_k": np.ones(c.d_low),
            "gamma_q": np.ones(c.d_low),
        }
    elif c.variant == "mlp":
        width = mlp_hidden_width(c)
        tensors = {
            "w_gate": draw(width, c.d_model),
            "w_up": draw(width, c.d_model),
            "w_out": draw(c.n_kv_heads, width),
            "bias": np.zeros(c.n_kv_heads),
        }
    else:  # linear
        tensors = {
            "w": draw(c.n_kv_heads, c.d_model),
            "bias": np.zeros(c.n_kv_heads),
        }
    return GateParams(c, tensors)


def _rms_forward(x, gamma, eps):
    """Returns (y, r) with y = gamma * x / r, r = sqrt(mean x² + eps)."""
    r = np.sqrt(np.mean(x ** 2, axis=-1, keepdims=True) + eps)
    return gamma * x / r, r


def _rms_backward(dy, x, gamma, r):
    """Gradients of y = gamma*x/r w.r.t. x and gamma."""
    d = x.shape[-1]
    dgamma = np.sum(dy * x / r, axis=tuple(range(x.ndim - 1)))
    gdy = gamma * dy
    dx = gdy / r - x * np.sum(gdy * x, axis=-1, keepdims=True) / (d * r ** 3)
    return dx, dgamma


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _project(x, w):
    """x @ w.T via unoptimized einsum: per-row reduction order does not
    depend on the batch size, keeping gate_forward bitwise stateless."""
    return np.einsum("td,kd->tk", x, w, optimize=False)


def _sink_intermediates(hiddens, params, config):
    """Shared forward computation for the sink-attention variant."""
    c = config
    T = hiddens.shape[0]
    # einsum keeps the reduction order independent of T, so scoring a
    # batch equals scoring its rows one by one, bitwise
    kx = _project(hiddens, params["w_k"]).reshape(T, c.n_kv_heads, c.d_low)
    qx = _project(hiddens, params["w_q"]).reshape(T, c.group_size, c.n_kv_heads, c.d_low)
    k, rk = _rms_forward(kx, params["gamma_k"], c.norm_eps)
    q, rq = _rms_forward(qx, params["gamma_q"], c.norm_eps)

    e = np.einsum("tghd,thd->tgh", q, k)  # (T,G,H)
    b = _softplus(params["beta"])  # (G,H)
    if c.n_sinks > 0:
        cc = np.einsum("tghd,rhd->tghr", q, params["k_sink"])  # (T,G,H,S)
        m = np.maximum(np.maximum(e, cc.max(axis=-1)), 0.0)
    else:
        cc = np.zeros((T, c.group_size, c.n_kv_heads, 0))
        m = np.maximum(e, 0.0)
    # shifted frame: b enters multiplied by exp(-m), value unchanged
    en = np.exp(e - m)
    cn = np.exp(cc - m[..., None])
    un = np.exp(-m)
    denom = en + cn.sum(axis=-1) + b[None] * un
    frac = en / denom  # (T,G,H)
    s = frac.mean(axis=1)  # (T,H)
    return dict(kx=kx, qx=qx, k=k, rk=rk, q=q, rq=rq, e=e, b=b, cc=cc,
                en=en, cn=cn, un=un, denom=denom, frac=frac, s=s)


def gate_forward(hiddens, params: GateParams, config: GateConfig):
    """Score a (T, D) batch of hidden states; returns (T, H) in (0,1).

    Stateless and position-independent: each row is scored alone.
    """
    hiddens = np.asarray(hiddens, dtype=np.float64)
    c = config
    if hiddens.ndim != 2 or hiddens.shape[1] != c.d_model:
        raise ValueError(f"expected (T, {c.d_model}) hiddens, got {hiddens.shape}")
    T = hiddens.shape[0]

    if c.variant == "sink_attention":
        return _sink_intermediates(hiddens, params, c)["s"]
    if c.variant == "no_denominator":
        kx = _project(hiddens, params["w_k"]).reshape(T, c.n_kv_heads, c.d_low)
        qx = _project(hiddens, params["w_q"]).reshape(T, c.group_size, c.n_kv_heads, c.d_low)
        k, _ = _rms_forward(kx, params["gamma_k"], c.norm_eps)
        q, _ = _rms_forward(qx, params["gamma_q"], c.norm_eps)
        e = np.einsum("tghd,thd->tgh", q, k)
        return _sigmoid(e).mean(axis=1)
    if c.variant == "mlp":
        g = _project(hiddens, params["w_gate"])
        u = _project(hiddens, params["w_up"])
        z = _project(_sigmoid(g) * g * u, params["w_out"]) + params["bias"]
        return _sigmoid(z)
    # linear
    return _sigmoid(_project(hiddens, params["w"]) + params["bias"])


def bce_loss(pred, target):
    """Mean soft-label binary cross-entropy with prediction clamping."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))))


def gate_loss_and_grad(params: GateParams, hiddens, targets, config: GateConfig):
    """BCE loss and analytic gradients for every parameter tensor.

    Reverse-mode by hand through projection → RMS-norm → sink fraction →
    BCE; β receives its gradient through the softplus chain rule.
    """
    hiddens = np.asarray(hiddens, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if not (np.all(np.isfinite(hiddens)) and np.all(np.isfinite(targets))):
        raise ValueError("non-finite inputs")
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("targets must lie in [0,1]")
    c = config
    T = hiddens.shape[0]
    n = T * c.n_kv_heads

    if c.variant == "sink_attention":
        f = _sink_intermediates(hiddens, params, c)
        s = f["s"]
    else:
        s = gate_forward(hiddens, params, c)
    sc = np.clip(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = float(np.mean(-(targets * np.log(sc) + (1 - targets) * np.log(1 - sc))))
    ds = np.where((s > SCORE_CLAMP) & (s < 1.0 - SCORE_CLAMP),
                  (sc - targets) / (sc * (1.0 - sc)) / n, 0.0)  # (T,H)

    grads = {}
    if c.variant == "sink_attention":
        dfrac = np.repeat(ds[:, None, :], c.group_size, axis=1) / c.group_size
        frac, denom = f["frac"], f["denom"]
        de = dfrac * frac * (1.0 - frac)
        # sink and bias shares of the denominator
        g_r = f["cn"] / denom[..., None]
        dcc = -dfrac[..., None] * frac[..., None] * g_r
        db = -(dfrac * frac * f["un"] / denom).sum(axis=0)  # (G,H)
        grads["beta"] = db * _sigmoid(params["beta"])

        dq = de[..., None] * f["k"][:, None]  # (T,G,H,Dl)
        dk = (de[..., None] * f["q"]).sum(axis=1)  # (T,H,Dl)
        if c.n_sinks > 0:
            dq += np.einsum("tghr,rhd->tghd", dcc, params["k_sink"])
            grads["k_sink"] = np.einsum("tghr,tghd->rhd", dcc, f["q"])
        else:
            grads["k_sink"] = np.zeros_like(params["k_sink"])

        dqx, grads["gamma_q"] = _rms_backward(dq, f["qx"], params["gamma_q"], f["rq"])
        dkx, grads["gamma_k"] = _rms_backward(dk, f["kx"], params["gamma_k"], f["rk"])
        grads["w_q"] = dqx.reshape(T, -1).T @ hiddens
        grads["w_k"] = dkx.reshape(T, -1).T @ hiddens

    elif c.variant == "no_denominator":
        kx = (hiddens @ params["w_k"].T).reshape(T, c.n_kv_heads, c.d_low)
        qx = (hiddens @ params["w_q"].T).reshape(T, c.group_size, c.n_kv_heads, c.d_low)
        k, rk = _rms_forward(kx, params["gamma_k"], c.norm_eps)
        q, rq = _rms_forward(qx, params["gamma_q"], c.norm_eps)
        e = np.einsum("tghd,thd->tgh", q, k)
        sig = _sigmoid(e)
        de = (ds[:, None, :] / c.group_size) * sig * (1.0 - sig)
        dq = de[..., None] * k[:, None]
        dk = (de[..., None] * q).sum(axis=1)
        dqx, grads["gamma_q"] = _rms_backward(dq, qx, params["gamma_q"], rq)
        dkx, grads["gamma_k"] = _rms_backward(dk, kx, params["gamma_k"], rk)
        grads["w_q"] = dqx.reshape(T, -1).T @ hiddens
        grads["w_k"] = dkx.reshape(T, -1).T @ hiddens

    elif c.variant == "mlp":
        g = hiddens @ params["w_gate"].T
        u = hiddens @ params["w_up"].T
        sg = _sigmoid(g)
        act = sg * g  # silu
        hid = act * u
        z = hid @ params["w_out"].T + params["bias"]
        sig = _sigmoid(z)
        dz = ds * sig * (1.0 - sig)
        grads["bias"] = dz.sum(axis=0)
        grads["w_out"] = dz.T @ hid
        dhid = dz @ params["w_out"]
        du = dhid * act
        dact = dhid * u
        dg = dact * (sg + g * sg * (1.0 - sg))
        grads["w_gate"] = dg.T @ hiddens
        grads["w_up"] = du.T @ hiddens

    else:  # linear
        z = hiddens @ params["w"].T + params["bias"]
        sig = _sigmoid(z)
        dz = ds * sig * (1.0 - sig)
        grads["bias"] = dz.sum(axis=0)
        grads["w"] = dz.T @ hiddens

    return loss, grads


def save_gates(gates, path, provenance=None):
    """Write per-layer gate parameters as an FKVZ container."""
    header = {
        "layers": [asdict(g.config) for g in gates],
        "provenance": provenance or {},
    }
    tensors = []
    for i, g in enumerate(gates):
        for name in sorted(g.tensors):
            tensors.append((f"layer{i}.{name}", g.tensors[name].astype(np.float32)))
    serial.write_container(path, serial.MAGIC_GATES, header, tensors)


def load_gates(path):
    """Read an FKVZ container; returns (list of GateParams, provenance)."""
    header, tensors = serial.read_container(path, serial.MAGIC_GATES)
    gates = []
    for i, cfg_dict in enumerate(header["layers"]):
        config = GateConfig(**cfg_dict)
        prefix = f"layer{i}."
        layer_tensors = {name[len(prefix):]: arr for name, arr in tensors.items()
                         if name.startswith(prefix)}
        gates.append(GateParams(config, layer_tensors))
    return gates, header.get("provenance", {})
