"""Autoregressive multi-embedding query encoder with manual backpropagation.

A small pre-LN causal transformer over a sequence of d-dimensional vectors.
Position 0 receives the (raw) input vector; position t >= 1 receives either a
ground-truth target embedding (teacher forcing, in a per-example random order)
or the unit-normalized prediction emitted at position t - 1. Every position
emits a raw d-vector which is normalized before it is fed back or scored.

Shapes: B batch, T sequence positions, d embedding dim, h hidden width,
H heads, hd = h / H.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from amerlab.errors import ConfigError, DimMismatch, FormatError, NoRecordedForward, TooLong
from amerlab.fileio import Reader, atomic_open, pack_string
from amerlab.kernels import gelu_pair
from amerlab.tensor_core import as_rng

CKPT_MAGIC = b"AMERCKPT"
CKPT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d: int
    h: int = 128
    layers: int = 2
    heads: int = 4
    max_len: int = 6
    mlp_ratio: int = 4
    bias: bool = True

    def validate(self):
        for name in ("d", "h", "layers", "heads", "max_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.h % self.heads:
            raise ConfigError("model.h must be divisible by model.heads")
        return self


TEACHER = "teacher"
SCHEDULED = "scheduled"
PREDICTED = "predicted"


@dataclass(frozen=True)
class StepInputPolicy:
    """How positions t >= 1 are fed during training.

    ``teacher``: always a ground-truth target; ``scheduled``: the model's own
    previous prediction with probability ``p`` (per example, per step);
    ``predicted``: always the previous prediction.
    """

    mode: str = TEACHER
    p: float = 0.0

    def __post_init__(self):
        if self.mode not in (TEACHER, SCHEDULED, PREDICTED):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("scheduled-sampling p must lie in [0, 1]")

    @property
    def feed_prob(self) -> float:
        if self.mode == TEACHER:
            return 0.0
        if self.mode == PREDICTED:
            return 1.0
        return self.p


def param_shapes(cfg: ModelConfig) -> dict:
    d, h, f = cfg.d, cfg.h, cfg.h * cfg.mlp_ratio
    shapes = {"in_proj.W": (d, h)}
    if cfg.bias:
        shapes["in_proj.b"] = (h,)
    shapes["pos_emb"] = (cfg.max_len, h)
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (h,)
        shapes[p + "ln1.b"] = (h,)
        for nm in ("q", "k", "v", "o"):
            shapes[p + f"attn.W{nm}"] = (h, h)
            # a key bias only shifts each softmax row by a constant
            if cfg.bias and nm != "k":
                shapes[p + f"attn.b{nm}"] = (h,)
        shapes[p + "ln2.g"] = (h,)
        shapes[p + "ln2.b"] = (h,)
        shapes[p + "mlp.W1"] = (h, f)
        if cfg.bias:
            shapes[p + "mlp.b1"] = (f,)
        shapes[p + "mlp.W2"] = (f, h)
        if cfg.bias:
            shapes[p + "mlp.b2"] = (h,)
    shapes["ln_f.g"] = (h,)
    shapes["ln_f.b"] = (h,)
    shapes["out_proj.W"] = (h, d)
    if cfg.bias:
        shapes["out_proj.b"] = (d,)
    return shapes


def n_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_model(cfg: ModelConfig, rng) -> dict:
    """Gaussian weights with std 1/sqrt(fan_in); zero biases; unit LN gains."""
    cfg.validate()
    g = as_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos_emb":
            params[name] = g.standard_normal(shape) / np.sqrt(cfg.h)
        elif leaf.startswith("W"):
            params[name] = g.standard_normal(shape) / np.sqrt(shape[0])
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ------------------------------------------------------------------ layers


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def _ln_dx(dy, g, xhat, rstd):
    gh = dy * g
    return (gh - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * rstd


def _affine(x, params, wname, bname):
    y = x @ params[wname]
    b = params.get(bname)
    return y if b is None else y + b


def _unit(o):
    n = np.sqrt(np.sum(o * o, axis=-1, keepdims=True))
    return o / n, n


def _unit_bwd(g, q, n):
    return (g - q * np.sum(g * q, axis=-1, keepdims=True)) / n


class Tape:
    """Activations of one incremental forward pass, consumed by :func:`backward`.

    ``fed[:, t]`` marks examples whose input at position t was the normalized
    prediction from position t - 1.
    """

    def __init__(self, cfg, B, T, dtype):
        h, f, H = cfg.h, cfg.h * cfg.mlp_ratio, cfg.heads
        hd = h // H

        def z(*shape):
            return np.zeros(shape, dtype=dtype)

        self.X = z(B, T, cfg.d)
        self.layers = [
            dict(A=z(B, T, h), XH1=z(B, T, h), RS1=z(B, T, 1),
                 Q=z(B, H, T, hd), K=z(B, H, T, hd), V=z(B, H, T, hd), P=z(B, H, T, T),
                 O=z(B, T, h), C=z(B, T, h), XH2=z(B, T, h), RS2=z(B, T, 1),
                 U=z(B, T, f), GU=z(B, T, f), DG=z(B, T, f))
            for _ in range(cfg.layers)
        ]
        self.F = z(B, T, h)
        self.XHF = z(B, T, h)
        self.RSF = z(B, T, 1)
        self.preds = z(B, T, cfg.d)
        self.norms = z(B, T, 1)
        self.fed = np.zeros((B, T), dtype=bool)
        self.detach = False


def _run(params, cfg: ModelConfig, X, fed, detach=False) -> Tape:
    """Incremental causal forward over positions 0..T-1 of ``X`` (B, T, d).

    Rows with ``fed[:, t]`` have their input at t overwritten by the unit
    prediction of position t - 1 as soon as it is available.
    """
    dtype = params["in_proj.W"].dtype
    B, T, d = X.shape
    if d != cfg.d:
        raise DimMismatch(f"input dim {d} vs model dim {cfg.d}")
    if T > cfg.max_len:
        raise TooLong(f"sequence length {T} exceeds max_len {cfg.max_len}")
    H = cfg.heads
    hd = cfg.h // H
    scale = dtype.type(1.0 / np.sqrt(hd))
    tp = Tape(cfg, B, T, dtype)
    tp.X[:] = X
    tp.fed[:] = fed
    tp.detach = detach
    for t in range(T):
        e = _affine(tp.X[:, t], params, "in_proj.W", "in_proj.b") + params["pos_emb"][t]
        for i, L in enumerate(tp.layers):
            p = f"layer{i}."
            a, L["XH1"][:, t], L["RS1"][:, t] = _ln(e, params[p + "ln1.g"], params[p + "ln1.b"])
            L["A"][:, t] = a
            q = _affine(a, params, p + "attn.Wq", p + "attn.bq").reshape(B, H, 1, hd)
            L["Q"][:, :, t] = q[:, :, 0]
            L["K"][:, :, t] = _affine(a, params, p + "attn.Wk", p + "attn.bk").reshape(B, H, hd)
            L["V"][:, :, t] = _affine(a, params, p + "attn.Wv", p + "attn.bv").reshape(B, H, hd)
            s = (q @ L["K"][:, :, : t + 1].transpose(0, 1, 3, 2)) * scale
            s = np.exp(s - s.max(axis=-1, keepdims=True))
            s /= s.sum(axis=-1, keepdims=True)
            L["P"][:, :, t : t + 1, : t + 1] = s
            o = (s @ L["V"][:, :, : t + 1]).reshape(B, cfg.h)
            L["O"][:, t] = o
            e = e + _affine(o, params, p + "attn.Wo", p + "attn.bo")
            c, L["XH2"][:, t], L["RS2"][:, t] = _ln(e, params[p + "ln2.g"], params[p + "ln2.b"])
            L["C"][:, t] = c
            u = _affine(c, params, p + "mlp.W1", p + "mlp.b1")
            L["U"][:, t] = u
            gu, L["DG"][:, t] = gelu_pair(u)
            L["GU"][:, t] = gu
            e = e + _affine(gu, params, p + "mlp.W2", p + "mlp.b2")
        fo, tp.XHF[:, t], tp.RSF[:, t] = _ln(e, params["ln_f.g"], params["ln_f.b"])
        tp.F[:, t] = fo
        qt, nt = _unit(_affine(fo, params, "out_proj.W", "out_proj.b"))
        tp.preds[:, t] = qt
        tp.norms[:, t] = nt
        if t + 1 < T:
            rows = fed[:, t + 1]
            if rows.any():
                tp.X[rows, t + 1] = qt[rows]
    return tp


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def backward(params, cfg: ModelConfig, tape: Tape, dpreds, grads=None):
    """Exact gradients of a scalar loss given ``dpreds = dL/dpreds`` (B, m, d).

    A single reverse sweep over positions; the gradient reaching a fed-back
    input at t + 1 is routed into the output at t (through its normalization)
    before position t is processed, unless the tape was recorded with
    ``detach``. Returns the gradient dict (accumulated into ``grads`` if given).
    """
    if tape is None or not isinstance(tape, Tape):
        raise NoRecordedForward("backward called without a recorded forward pass")
    dtype = tape.X.dtype
    dpreds = np.asarray(dpreds, dtype=dtype)
    if dpreds.ndim == 2:
        dpreds = dpreds[None]
    if grads is None:
        grads = zeros_like_params(params)
    B, T, _ = tape.X.shape
    H = cfg.heads
    hd = cfg.h // H
    scale = dtype.type(1.0 / np.sqrt(hd))
    dout = _unit_bwd(dpreds, tape.preds, tape.norms)
    dX = np.zeros_like(tape.X)
    DF = np.zeros_like(tape.F)
    DE0 = np.zeros_like(tape.F)
    bufs = [
        dict(GO=np.zeros_like(L["A"]), DU=np.zeros_like(L["U"]), DC=np.zeros_like(L["A"]),
             GM=np.zeros_like(L["A"]), DA=np.zeros_like(L["A"]), DQ=np.zeros_like(L["A"]),
             DK=np.zeros_like(L["K"]), DV=np.zeros_like(L["V"]))
        for L in tape.layers
    ]
    Wout_T = params["out_proj.W"].T
    for t in range(T - 1, -1, -1):
        if not tape.detach and t + 1 < T:
            rows = tape.fed[:, t + 1]
            if rows.any():
                dout[rows, t] += _unit_bwd(dX[rows, t + 1], tape.preds[rows, t], tape.norms[rows, t])
        df = dout[:, t] @ Wout_T
        DF[:, t] = df
        de = _ln_dx(df, params["ln_f.g"], tape.XHF[:, t], tape.RSF[:, t])
        for i in range(cfg.layers - 1, -1, -1):
            p = f"layer{i}."
            L, G = tape.layers[i], bufs[i]
            G["GO"][:, t] = de
            du = (de @ params[p + "mlp.W2"].T) * L["DG"][:, t]
            G["DU"][:, t] = du
            dc = du @ params[p + "mlp.W1"].T
            G["DC"][:, t] = dc
            de = de + _ln_dx(dc, params[p + "ln2.g"], L["XH2"][:, t], L["RS2"][:, t])
            G["GM"][:, t] = de
            do = (de @ params[p + "attn.Wo"].T).reshape(B, H, 1, hd)
            pr = L["P"][:, :, t : t + 1, : t + 1]
            dpr = do @ L["V"][:, :, : t + 1].transpose(0, 1, 3, 2)
            G["DV"][:, :, : t + 1] += pr.transpose(0, 1, 3, 2) @ do
            ds = pr * (dpr - (dpr * pr).sum(axis=-1, keepdims=True)) * scale
            dq = (ds @ L["K"][:, :, : t + 1]).reshape(B, cfg.h)
            G["DK"][:, :, : t + 1] += ds.transpose(0, 1, 3, 2) @ L["Q"][:, :, t : t + 1]
            G["DQ"][:, t] = dq
            # key/value gradients at t are complete: later queries are done
            da = (dq @ params[p + "attn.Wq"].T
                  + G["DK"][:, :, t].reshape(B, cfg.h) @ params[p + "attn.Wk"].T
                  + G["DV"][:, :, t].reshape(B, cfg.h) @ params[p + "attn.Wv"].T)
            G["DA"][:, t] = da
            de = de + _ln_dx(da, params[p + "ln1.g"], L["XH1"][:, t], L["RS1"][:, t])
        DE0[:, t] = de
        dX[:, t] = de @ params["in_proj.W"].T

    def acc(name, value):
        if name in grads:
            grads[name] += value

    acc("out_proj.W", _flat(tape.F).T @ _flat(dout))
    acc("out_proj.b", _flat(dout).sum(axis=0))
    acc("ln_f.g", _flat(DF * tape.XHF).sum(axis=0))
    acc("ln_f.b", _flat(DF).sum(axis=0))
    for i, (L, G) in enumerate(zip(tape.layers, bufs)):
        p = f"layer{i}."
        dk = G["DK"].transpose(0, 2, 1, 3).reshape(B, T, cfg.h)
        dv = G["DV"].transpose(0, 2, 1, 3).reshape(B, T, cfg.h)
        acc(p + "mlp.W2", _flat(L["GU"]).T @ _flat(G["GO"]))
        acc(p + "mlp.b2", _flat(G["GO"]).sum(axis=0))
        acc(p + "mlp.W1", _flat(L["C"]).T @ _flat(G["DU"]))
        acc(p + "mlp.b1", _flat(G["DU"]).sum(axis=0))
        acc(p + "ln2.g", _flat(G["DC"] * L["XH2"]).sum(axis=0))
        acc(p + "ln2.b", _flat(G["DC"]).sum(axis=0))
        acc(p + "attn.Wo", _flat(L["O"]).T @ _flat(G["GM"]))
        acc(p + "attn.bo", _flat(G["GM"]).sum(axis=0))
        acc(p + "attn.Wq", _flat(L["A"]).T @ _flat(G["DQ"]))
        acc(p + "attn.bq", _flat(G["DQ"]).sum(axis=0))
        acc(p + "attn.Wk", _flat(L["A"]).T @ _flat(dk))
        acc(p + "attn.Wv", _flat(L["A"]).T @ _flat(dv))
        acc(p + "attn.bv", _flat(dv).sum(axis=0))
        acc(p + "ln1.g", _flat(G["DA"] * L["XH1"]).sum(axis=0))
        acc(p + "ln1.b", _flat(G["DA"]).sum(axis=0))
    grads["pos_emb"][:T] += DE0.sum(axis=0)
    acc("in_proj.W", _flat(tape.X).T @ _flat(DE0))
    acc("in_proj.b", _flat(DE0).sum(axis=0))
    return grads


# -------------------------------------------------------------- sequences


def _draws(rng, B, m):
    # identical draws for every policy so p=0 / p=1 reproduce teacher / predicted
    g = as_rng(rng)
    order = np.argsort(g.random((B, m)), axis=1, kind="stable")
    coins = g.random((B, m))
    return order, coins


def stack_outputs(params, cfg: ModelConfig, X):
    """Unit outputs for fixed inputs X (B, T, d), no feedback."""
    return _run(params, cfg, np.asarray(X), np.zeros(X.shape[:2], dtype=bool)).preds


def forward_sequence(params, cfg: ModelConfig, x, targets, policy: StepInputPolicy, rng,
                     m=None, detach=False):
    """Emit ``m`` unit predictions per example.

    ``x`` is (B, d) raw inputs, ``targets`` (B, m, d) unit targets (ignored
    under the ``predicted`` policy). A single example may be passed without the
    batch axis. Returns ``(preds, tape)``.
    """
    dtype = params["in_proj.W"].dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    if single:
        x = x[None]
        targets = None if targets is None else np.asarray(targets)[None]
    B, d = x.shape
    if d != cfg.d:
        raise DimMismatch(f"input dim {d} vs model dim {cfg.d}")
    if m is None:
        m = targets.shape[1]
    if m > cfg.max_len:
        raise TooLong(f"{m} predictions exceed max_len {cfg.max_len}")
    order, coins = _draws(rng, B, m)
    fed = np.zeros((B, m), dtype=bool)
    if policy.mode == PREDICTED:
        fed[:, 1:] = True
    else:
        fed[:, 1:] = coins[:, 1:] < policy.feed_prob
    X = np.zeros((B, m, d), dtype=dtype)
    X[:, 0] = x
    if m > 1 and not fed[:, 1:].all():
        targets = np.asarray(targets, dtype=dtype)
        if targets.shape != (B, m, d):
            raise DimMismatch(f"targets shape {targets.shape} vs expected {(B, m, d)}")
        shuffled = np.take_along_axis(targets, order[:, :, None], axis=1)
        X[:, 1:] = shuffled[:, : m - 1]
    tape = _run(params, cfg, X, fed, detach=detach)
    preds = tape.preds.astype(np.float64)
    return (preds[0] if single else preds), tape


def decode(params, cfg: ModelConfig, x, m_pred: int):
    """Free-running generation of ``m_pred`` unit query embeddings."""
    if m_pred < 1:
        raise ValueError("m_pred must be >= 1")
    if m_pred > cfg.max_len:
        raise TooLong(f"m_pred {m_pred} exceeds max_len {cfg.max_len}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    preds, _ = forward_sequence(params, cfg, x, None, StepInputPolicy(PREDICTED), 0, m=m_pred)
    return preds[0] if single else preds


# ------------------------------------------------------------- checkpoints


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = pack_string(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, cfg: ModelConfig, params, config_text="", moments=None, step=0):
    """Write ``AMERCKPT``: version, model config, archived run config, tensors.

    ``moments`` is an optional ``(first, second)`` pair of optimizer dicts.
    """
    tensors = [(k, v) for k, v in params.items()]
    if moments is not None:
        m1, m2 = moments
        tensors += [(f"adam.m.{k}", m1[k]) for k in params]
        tensors += [(f"adam.v.{k}", m2[k]) for k in params]
    cfg_fields = asdict(cfg)
    cfg_blob = ";".join(f"{k}={int(v)}" for k, v in cfg_fields.items()).encode()
    text = config_text.encode("utf-8")
    with atomic_open(path) as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)) + cfg_blob)
        fh.write(struct.pack("<I", len(text)) + text)
        fh.write(struct.pack("<QI", int(step), len(tensors)))
        for name, arr in tensors:
            fh.write(_pack_tensor(name, arr))


def load_checkpoint(path):
    """Returns ``(cfg, params, info)``; ``info`` has ``config_text``, ``step``,
    and ``moments`` (or ``None``). Parameters come back as float64."""
    with open(path, "rb") as fh:
        r = Reader(fh.read(), f"checkpoint {path}")
    r.magic(CKPT_MAGIC)
    version = r.unpack("I")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    blob = bytes(r.take(r.unpack("I"))).decode()
    fields = dict(kv.split("=") for kv in blob.split(";"))
    cfg = ModelConfig(
        d=int(fields["d"]), h=int(fields["h"]), layers=int(fields["layers"]),
        heads=int(fields["heads"]), max_len=int(fields["max_len"]),
        mlp_ratio=int(fields["mlp_ratio"]), bias=bool(int(fields["bias"])),
    )
    text = bytes(r.take(r.unpack("I"))).decode("utf-8")
    step, count = r.unpack("QI")
    tensors = {}
    for _ in range(count):
        name = r.string()
        ndim = r.unpack("B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        tensors[name] = r.array("<f4", int(np.prod(shape))).reshape(shape).astype(np.float64)
    r.done()
    params = {k: tensors[k] for k in param_shapes(cfg)}
    moments = None
    if any(k.startswith("adam.") for k in tensors):
        moments = ({k: tensors[f"adam.m.{k}"] for k in params}, {k: tensors[f"adam.v.{k}"] for k in params})
    return cfg, params, {"config_text": text, "step": step, "moments": moments}
