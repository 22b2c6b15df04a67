"""Recurrent sequence encoders with temporal attention and exact BPTT gradients.

Cells follow the standard gate formulations: logistic gates, tanh squashing,
element-wise products. Layers may be bidirectional (per-step concatenation of
a forward and a reversed-sequence pass) and stacked; per-step outputs go
through ReLU. The sequence is pooled into a fixed-dimension context vector,
either by additive attention (scores u . tanh(W h_n), softmax-normalized) or
by a uniform mean when the model has no attention head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

GATE_COUNT = {"lstm": 4, "gru": 3}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


@dataclass(frozen=True)
class CellParams:
    """Gate weights of one recurrent cell, packed row-wise by gate.

    LSTM rows: input, forget, output, candidate. GRU rows: update, reset,
    candidate. Per-gate views are exposed as properties.
    """

    kind: str
    W: np.ndarray  # (gates*H, input_dim)
    U: np.ndarray  # (gates*H, H)
    b: np.ndarray  # (gates*H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def _block(self, which: np.ndarray, idx: int) -> np.ndarray:
        h = self.hidden
        return which[idx * h:(idx + 1) * h]

    # LSTM gate views
    @property
    def W_i(self): return self._block(self.W, 0)
    @property
    def W_f(self): return self._block(self.W, 1)
    @property
    def W_o(self): return self._block(self.W, 2)
    @property
    def W_s(self): return self._block(self.W, 3)
    @property
    def U_i(self): return self._block(self.U, 0)
    @property
    def U_f(self): return self._block(self.U, 1)
    @property
    def U_o(self): return self._block(self.U, 2)
    @property
    def U_s(self): return self._block(self.U, 3)

    # GRU gate views (update, reset, candidate)
    @property
    def W_z(self): return self._block(self.W, 0)
    @property
    def W_r(self): return self._block(self.W, 1)
    @property
    def W_h(self): return self._block(self.W, 2)
    @property
    def U_z(self): return self._block(self.U, 0)
    @property
    def U_r(self): return self._block(self.U, 1)
    @property
    def U_h(self): return self._block(self.U, 2)


def lstm_step(params: CellParams, a_t: np.ndarray, h_prev: np.ndarray,
              s_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update: returns (h_t, s_t)."""
    if params.kind != "lstm":
        raise ValueError(f"expected lstm params, got {params.kind!r}")
    a_t = np.asarray(a_t, dtype=float)
    if a_t.shape != (params.input_dim,):
        raise ValueError(f"input dim {a_t.shape} != ({params.input_dim},)")
    if h_prev.shape != (params.hidden,) or s_prev.shape != (params.hidden,):
        raise ValueError("state dim mismatch")
    h = params.hidden
    z = params.W @ a_t + params.U @ h_prev + params.b
    i = _sigmoid(z[:h])
    f = _sigmoid(z[h:2 * h])
    o = _sigmoid(z[2 * h:3 * h])
    g = np.tanh(z[3 * h:])
    s_t = i * g + f * s_prev
    h_t = o * np.tanh(s_t)
    return h_t, s_t


def gru_step(params: CellParams, a_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU update (update/reset gates): returns h_t."""
    if params.kind != "gru":
        raise ValueError(f"expected gru params, got {params.kind!r}")
    a_t = np.asarray(a_t, dtype=float)
    if a_t.shape != (params.input_dim,):
        raise ValueError(f"input dim {a_t.shape} != ({params.input_dim},)")
    if h_prev.shape != (params.hidden,):
        raise ValueError("state dim mismatch")
    h = params.hidden
    zin = params.W @ a_t + params.b
    z = _sigmoid(zin[:h] + params.U_z @ h_prev)
    r = _sigmoid(zin[h:2 * h] + params.U_r @ h_prev)
    cand = np.tanh(zin[2 * h:] + params.U_h @ (r * h_prev))
    return z * cand + (1.0 - z) * h_prev


@dataclass(frozen=True)
class LayerSpec:
    kind: str            # "lstm" | "gru"
    hidden: int
    bidirectional: bool = False
    relu: bool = True

    @property
    def width(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    layers: tuple[LayerSpec, ...]
    attention_units: int | None = 32   # None: mean pooling over steps
    dropout_recurrent: float = 0.5
    dropout_activation: float = 0.5
    dropout_attention: float = 0.1
    init_seed: int = 0

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    def to_json(self) -> str:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        d = json.loads(text)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)


class EncoderModel:
    """Parameter container for a stacked recurrent encoder."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: EncoderConfig) -> "EncoderModel":
        rng = np.random.default_rng(config.init_seed)

        def uniform(shape, fan_in):
            lim = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        params: dict[str, np.ndarray] = {}
        d_in = config.input_dim
        for li, spec in enumerate(config.layers):
            gates = GATE_COUNT[spec.kind]
            h = spec.hidden
            for direction in (("f", "b") if spec.bidirectional else ("f",)):
                prefix = f"l{li}.{direction}"
                params[f"{prefix}.W"] = uniform((gates * h, d_in), d_in)
                params[f"{prefix}.U"] = uniform((gates * h, h), h)
                b = np.zeros(gates * h)
                if spec.kind == "lstm":
                    b[h:2 * h] = 1.0  # forget-gate bias: remember by default
                params[f"{prefix}.b"] = b
            d_in = spec.width
        if config.attention_units is not None:
            a = config.attention_units
            params["att.W"] = uniform((a, d_in), d_in)
            params["att.u"] = uniform((a,), a)
        return cls(config, params)

    def cell(self, layer: int, direction: str = "f") -> CellParams:
        prefix = f"l{layer}.{direction}"
        return CellParams(kind=self.config.layers[layer].kind,
                          W=self.params[f"{prefix}.W"],
                          U=self.params[f"{prefix}.U"],
                          b=self.params[f"{prefix}.b"])

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k][...] = params[k]

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        if extra:
            arrays.update({f"extra/{k}": v for k, v in extra.items()})
        np.savez(path, config_json=np.array(self.config.to_json()), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["EncoderModel", dict[str, np.ndarray]]:
        with np.load(path, allow_pickle=False) as data:
            config = EncoderConfig.from_json(str(data["config_json"]))
            params = {k[len("param/"):]: data[k] for k in data.files
                      if k.startswith("param/")}
            extra = {k[len("extra/"):]: data[k] for k in data.files
                     if k.startswith("extra/")}
        model = cls(config, params)
        return model, extra


# hidden sizes follow the 64/32 first/second layer sizing; attention head 32
ARCHITECTURES = ("lstm2l", "lstm2l_a", "gru2l", "gru2l_a",
                 "blstm1l_a", "blstm2l", "blstm2l_a")


def build_architecture(name: str, input_dim: int, seed: int = 0,
                       hidden: tuple[int, ...] | None = None,
                       attention_units: int | None = None,
                       dropout_recurrent: float = 0.5,
                       dropout_activation: float = 0.5,
                       dropout_attention: float = 0.1) -> EncoderModel:
    """Instantiate one of the named encoder variants."""
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    kind = "gru" if name.startswith("gru") else "lstm"
    bi = name.startswith("blstm")
    n_layers = 1 if "1l" in name else 2
    with_attention = name.endswith("_a")
    sizes = hidden if hidden is not None else (64, 32)[:n_layers]
    if len(sizes) != n_layers:
        raise ValueError(f"{name} needs {n_layers} hidden sizes, got {sizes}")
    att = None
    if with_attention:
        att = attention_units if attention_units is not None else 32
    layers = tuple(LayerSpec(kind=kind, hidden=h, bidirectional=bi) for h in sizes)
    config = EncoderConfig(input_dim=input_dim, layers=layers, attention_units=att,
                           dropout_recurrent=dropout_recurrent,
                           dropout_activation=dropout_activation,
                           dropout_attention=dropout_attention,
                           init_seed=seed)
    return EncoderModel.build(config)


@dataclass
class EncodeResult:
    context: np.ndarray
    alpha: np.ndarray
    cache: dict


def _dropout_mask(rng, shape, p: float) -> np.ndarray:
    if p <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def _run_cell_forward(W, U, b, X, rec_mask, kind):
    """Forward one direction of one layer over the whole sequence."""
    n = len(X)
    h_dim = U.shape[1]
    zin = X @ W.T + b
    cache = {"X": X, "HM": np.empty((n, h_dim))}
    H = np.empty((n, h_dim))
    if kind == "lstm":
        for key in ("i", "f", "o", "g", "S", "TS"):
            cache[key] = np.empty((n, h_dim))
        h = np.zeros(h_dim)
        s = np.zeros(h_dim)
        for t in range(n):
            hm = rec_mask * h
            cache["HM"][t] = hm
            z = zin[t] + U @ hm
            i = _sigmoid(z[:h_dim])
            f = _sigmoid(z[h_dim:2 * h_dim])
            o = _sigmoid(z[2 * h_dim:3 * h_dim])
            g = np.tanh(z[3 * h_dim:])
            s = i * g + f * s
            ts = np.tanh(s)
            h = o * ts
            cache["i"][t], cache["f"][t], cache["o"][t], cache["g"][t] = i, f, o, g
            cache["S"][t], cache["TS"][t] = s, ts
            H[t] = h
    else:  # gru
        for key in ("z", "r", "hc", "RHM", "Hprev"):
            cache[key] = np.empty((n, h_dim))
        h = np.zeros(h_dim)
        u_z, u_r, u_h = U[:h_dim], U[h_dim:2 * h_dim], U[2 * h_dim:]
        for t in range(n):
            hm = rec_mask * h
            cache["HM"][t] = hm
            z = _sigmoid(zin[t, :h_dim] + u_z @ hm)
            r = _sigmoid(zin[t, h_dim:2 * h_dim] + u_r @ hm)
            rhm = r * hm
            hc = np.tanh(zin[t, 2 * h_dim:] + u_h @ rhm)
            cache["z"][t], cache["r"][t], cache["hc"][t] = z, r, hc
            cache["RHM"][t], cache["Hprev"][t] = rhm, h
            h = z * hc + (1.0 - z) * h
            H[t] = h
    cache["H"] = H
    return H, cache


def _run_cell_backward(W, U, cache, dH, rec_mask, kind):
    """BPTT for one direction of one layer. Returns (dX, dW, dU, db)."""
    n, h_dim = dH.shape
    X = cache["X"]
    if kind == "lstm":
        dZ = np.empty((n, 4 * h_dim))
        i, f, o, g = cache["i"], cache["f"], cache["o"], cache["g"]
        S, TS = cache["S"], cache["TS"]
        dh_rec = np.zeros(h_dim)
        ds_rec = np.zeros(h_dim)
        for t in range(n - 1, -1, -1):
            dh = dH[t] + dh_rec
            do = dh * TS[t]
            ds = ds_rec + dh * o[t] * (1.0 - TS[t] ** 2)
            di = ds * g[t]
            dg = ds * i[t]
            s_prev = S[t - 1] if t > 0 else np.zeros(h_dim)
            df = ds * s_prev
            ds_rec = ds * f[t]
            dz = dZ[t]
            dz[:h_dim] = di * i[t] * (1.0 - i[t])
            dz[h_dim:2 * h_dim] = df * f[t] * (1.0 - f[t])
            dz[2 * h_dim:3 * h_dim] = do * o[t] * (1.0 - o[t])
            dz[3 * h_dim:] = dg * (1.0 - g[t] ** 2)
            dh_rec = rec_mask * (U.T @ dz)
        dU = dZ.T @ cache["HM"]
    else:  # gru
        dZ = np.empty((n, 3 * h_dim))
        z, r, hc = cache["z"], cache["r"], cache["hc"]
        HM, RHM, Hprev = cache["HM"], cache["RHM"], cache["Hprev"]
        u_z, u_r, u_h = U[:h_dim], U[h_dim:2 * h_dim], U[2 * h_dim:]
        dh_rec = np.zeros(h_dim)
        for t in range(n - 1, -1, -1):
            dh = dH[t] + dh_rec
            dz_gate = dh * (hc[t] - Hprev[t])
            dhc = dh * z[t]
            dah = dhc * (1.0 - hc[t] ** 2)
            drhm = u_h.T @ dah
            dr = drhm * HM[t]
            dhm = drhm * r[t]
            daz = dz_gate * z[t] * (1.0 - z[t])
            dar = dr * r[t] * (1.0 - r[t])
            dhm = dhm + u_z.T @ daz + u_r.T @ dar
            dh_rec = dh * (1.0 - z[t]) + rec_mask * dhm
            dZ[t, :h_dim] = daz
            dZ[t, h_dim:2 * h_dim] = dar
            dZ[t, 2 * h_dim:] = dah
        dU = np.empty_like(U)
        dU[:h_dim] = dZ[:, :h_dim].T @ HM
        dU[h_dim:2 * h_dim] = dZ[:, h_dim:2 * h_dim].T @ HM
        dU[2 * h_dim:] = dZ[:, 2 * h_dim:].T @ RHM
    dW = dZ.T @ X
    db = dZ.sum(axis=0)
    dX = dZ @ W
    return dX, dW, dU, db


def encode(model: EncoderModel, traj, mode: str = "infer",
           rng: np.random.Generator | None = None) -> EncodeResult:
    """Run the encoder over a feature sequence.

    traj may be an (N, input_dim) array or any object with a .matrix() method.
    In train mode dropout masks are sampled from rng and recorded in the cache
    so that backward() can replay them exactly; inference applies no dropout
    and is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    X = traj.matrix() if hasattr(traj, "matrix") else np.asarray(traj, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("sequence must be a non-empty (N, input_dim) array")
    cfg = model.config
    if X.shape[1] != cfg.input_dim:
        raise ValueError(f"feature dim {X.shape[1]} != model input dim {cfg.input_dim}")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng()

    layer_caches = []
    for li, spec in enumerate(cfg.layers):
        lc = {"spec": spec, "input": X, "dir": {}}
        outputs = []
        for direction in (("f", "b") if spec.bidirectional else ("f",)):
            rec_mask = (_dropout_mask(rng, spec.hidden, cfg.dropout_recurrent)
                        if train else np.ones(spec.hidden))
            x_dir = X[::-1] if direction == "b" else X
            H, cache = _run_cell_forward(model.params[f"l{li}.{direction}.W"],
                                         model.params[f"l{li}.{direction}.U"],
                                         model.params[f"l{li}.{direction}.b"],
                                         x_dir, rec_mask, spec.kind)
            lc["dir"][direction] = {"cache": cache, "rec_mask": rec_mask}
            outputs.append(H[::-1] if direction == "b" else H)
        h_cat = np.concatenate(outputs, axis=1) if len(outputs) > 1 else outputs[0]
        lc["h_cat"] = h_cat
        y = np.maximum(h_cat, 0.0) if spec.relu else h_cat
        act_mask = (_dropout_mask(rng, y.shape, cfg.dropout_activation)
                    if train else None)
        if act_mask is not None:
            y = y * act_mask
        lc["act_mask"] = act_mask
        layer_caches.append(lc)
        X = y

    n = X.shape[0]
    att = {"input": X}
    if cfg.attention_units is not None:
        proj = np.tanh(X @ model.params["att.W"].T)
        att_mask = (_dropout_mask(rng, proj.shape, cfg.dropout_attention)
                    if train else None)
        q = proj * att_mask if att_mask is not None else proj
        scores = q @ model.params["att.u"]
        alpha = softmax(scores)
        att.update(proj=proj, mask=att_mask, q=q, alpha=alpha)
    else:
        alpha = np.full(n, 1.0 / n)
        att.update(alpha=alpha)
    context = alpha @ X
    cache = {"model": model, "mode": mode, "layers": layer_caches, "att": att}
    return EncodeResult(context=context, alpha=alpha, cache=cache)


def backward(model: EncoderModel, cache: dict,
             grad_wrt_c: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the context vector w.r.t. every model parameter."""
    if cache.get("model") is not model:
        raise ValueError("cache does not belong to this model")
    grad_wrt_c = np.asarray(grad_wrt_c, dtype=float)
    if grad_wrt_c.shape != (model.output_dim,):
        raise ValueError(f"grad shape {grad_wrt_c.shape} != ({model.output_dim},)")
    cfg = model.config
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    att = cache["att"]
    y = att["input"]
    alpha = att["alpha"]
    if cfg.attention_units is not None:
        d_alpha = y @ grad_wrt_c
        d_y = np.outer(alpha, grad_wrt_c)
        d_scores = alpha * (d_alpha - float(alpha @ d_alpha))
        grads["att.u"] += att["q"].T @ d_scores
        d_q = np.outer(d_scores, model.params["att.u"])
        d_proj = d_q * att["mask"] if att["mask"] is not None else d_q
        d_pre = d_proj * (1.0 - att["proj"] ** 2)
        grads["att.W"] += d_pre.T @ y
        d_y = d_y + d_pre @ model.params["att.W"]
    else:
        d_y = np.outer(alpha, grad_wrt_c)

    for li in range(len(cfg.layers) - 1, -1, -1):
        lc = cache["layers"][li]
        spec = lc["spec"]
        if lc["act_mask"] is not None:
            d_y = d_y * lc["act_mask"]
        if spec.relu:
            d_y = d_y * (lc["h_cat"] > 0.0)
        d_x = None
        offset = 0
        for direction in (("f", "b") if spec.bidirectional else ("f",)):
            d_h = d_y[:, offset:offset + spec.hidden]
            offset += spec.hidden
            dc = lc["dir"][direction]
            if direction == "b":
                d_h = d_h[::-1]
            dX, dW, dU, db = _run_cell_backward(
                model.params[f"l{li}.{direction}.W"],
                model.params[f"l{li}.{direction}.U"],
                dc["cache"], d_h, dc["rec_mask"], spec.kind)
            if direction == "b":
                dX = dX[::-1]
            grads[f"l{li}.{direction}.W"] += dW
            grads[f"l{li}.{direction}.U"] += dU
            grads[f"l{li}.{direction}.b"] += db
            d_x = dX if d_x is None else d_x + dX
        d_y = d_x
    return grads
