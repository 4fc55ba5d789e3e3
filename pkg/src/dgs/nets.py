"""Small dense networks with hand-written backward passes.

Three architectures cover every trainable object in the package:

* `DenoiserNet` - an MLP denoiser D(x, sigma) with the usual variance-aware
  input/output scalings (c_in, c_skip, c_out, log-sigma features), optionally
  carrying a second encoder branch for a conditioning pair (y, sigma_y) whose
  hidden features merge into the trunk through magnitude-preserving sums.
* `DiscriminatorNet` - two feature encoders (one for the diffused state, one
  for the conditioning observation) feeding a linear head; logits are clamped
  to +-15 so a confident mistake costs a bounded loss.
* `ScalarNet` - a scalar function of log t used as a per-noise-level
  uncertainty weight.

Gradients are hard-wired per architecture rather than traced; every backward
is validated against central finite differences in the test suite. Parameters
live in flat dicts of float64 arrays, so the optimizer and EMA are dict maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit as _sigmoid

__all__ = [
    "mp_sum",
    "precondition",
    "noise_features",
    "DenoiserNet",
    "generator_forward",
    "generator_backward",
    "DiscriminatorNet",
    "ScalarNet",
    "AdamState",
    "adam_init",
    "adam_step",
    "ema_init",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "LOGIT_CLAMP",
]

Params = Dict[str, np.ndarray]

CHECKPOINT_VERSION = 1
LOGIT_CLAMP = 15.0
_MERGE_RAW_INIT = -4.0  # sigmoid(-4) ~ 0.018: conditioning branch starts almost silent


# ----------------------------------------------------------------------
# primitive ops


def mp_sum(a: np.ndarray, b: np.ndarray, w) -> np.ndarray:
    """Magnitude-preserving convex sum ((1-w) a + w b) / sqrt((1-w)^2 + w^2).

    For independent unit-variance inputs the output is unit variance for any
    w in [0, 1]; w=0 returns a, w=1 returns b.
    """
    w = np.asarray(w, dtype=float)
    norm = np.sqrt((1.0 - w) ** 2 + w**2)
    return ((1.0 - w) * a + w * b) / norm


def _mp_sum_backward(a, b, w, dout):
    """Gradients of mp_sum for scalar w: returns (da, db, dw)."""
    norm = np.sqrt((1.0 - w) ** 2 + w**2)
    da = dout * ((1.0 - w) / norm)
    db = dout * (w / norm)
    y = ((1.0 - w) * a + w * b) / norm
    dy_dw = (b - a) / norm - y * (2.0 * w - 1.0) / (norm * norm)
    dw = float(np.sum(dout * dy_dw))
    return da, db, dw


def precondition(sigma, sigma_data: float = 0.5):
    """Variance-aware scalings (c_skip, c_out, c_in, c_noise) for level sigma."""
    sigma = np.asarray(sigma, dtype=float)
    total = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def noise_features(c_noise: np.ndarray, n_freq: int) -> np.ndarray:
    """[u, sin(2^j u), cos(2^j u)]_{j<n_freq} for u = c_noise; shape (n, 1+2F)."""
    u = np.asarray(c_noise, dtype=float).reshape(-1, 1)
    freqs = 2.0 ** np.arange(n_freq)
    angles = u * freqs[None, :]
    return np.concatenate([u, np.sin(angles), np.cos(angles)], axis=1)


def _silu(x):
    s = _sigmoid(x)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _as_rows(x, dim, name):
    arr = np.asarray(x, dtype=float)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got shape {np.shape(x)}")
    return arr, squeeze


def _sigma_rows(sigma, n):
    sig = np.asarray(sigma, dtype=float)
    sig = np.broadcast_to(sig, (n,)).astype(float)
    if np.any(~np.isfinite(sig)) or np.any(sig <= 0.0):
        raise ValueError("noise levels must be positive and finite")
    return sig


def _check_finite_grads(grads: Params, where: str) -> Params:
    for key, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite gradient for {where} parameter {key!r}")
    return grads


# ----------------------------------------------------------------------
# denoiser MLP with optional conditioning branch


@dataclass(frozen=True)
class DenoiserNet:
    """Architecture descriptor for an MLP denoiser.

    The trunk consumes (c_in * x, log-sigma features); each hidden activation
    is optionally merged with the matching activation of a conditioning
    encoder (same widths, separate weights) through mp_sum with a learnable
    scalar weight per layer, stored in raw (pre-sigmoid) form.
    """

    dim: int
    hidden: Tuple[int, ...] = (256, 256, 256)
    n_freq: int = 6
    sigma_data: float = 0.5
    conditional: bool = False

    @property
    def in_features(self) -> int:
        return self.dim + 1 + 2 * self.n_freq

    def describe(self) -> dict:
        return {
            "kind": "denoiser",
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_freq": self.n_freq,
            "sigma_data": self.sigma_data,
            "conditional": self.conditional,
        }

    def init(self, rng: np.random.Generator) -> Params:
        """He-style hidden layers, zero output layer so D(x, sigma) = c_skip x."""
        params: Params = {}
        fan = self.in_features
        for i, width in enumerate(self.hidden):
            params[f"t{i}.W"] = rng.standard_normal((width, fan)) * np.sqrt(2.0 / fan)
            params[f"t{i}.b"] = np.zeros(width)
            fan = width
        params["out.W"] = np.zeros((self.dim, fan))
        params["out.b"] = np.zeros(self.dim)
        if self.conditional:
            fan = self.in_features
            for i, width in enumerate(self.hidden):
                params[f"c{i}.W"] = rng.standard_normal((width, fan)) * np.sqrt(2.0 / fan)
                params[f"c{i}.b"] = np.zeros(width)
                params[f"m{i}"] = np.array(_MERGE_RAW_INIT)
                fan = width
        return params

    def merge_weights(self, params: Params) -> np.ndarray:
        """Current per-layer merge weights w = sigmoid(raw), each in (0, 1)."""
        if not self.conditional:
            return np.zeros(0)
        return _sigmoid(np.array([float(params[f"m{i}"]) for i in range(len(self.hidden))]))

    def _embed(self, x, sigma):
        c_skip, c_out, c_in, c_noise = precondition(sigma, self.sigma_data)
        feats = np.concatenate([c_in[:, None] * x, noise_features(c_noise, self.n_freq)], axis=1)
        return feats, c_skip, c_out, c_in

    def forward(self, params: Params, x, sigma, cond=None, want_cache: bool = False):
        """Apply the denoiser.

        Parameters
        ----------
        x : (n, D) or (D,) points at noise level sigma.
        sigma : scalar or (n,) positive levels.
        cond : None or (y, sigma_y) with y (n, D) or (D,) and sigma_y scalar
            or (n,). Required iff the net was built conditional.
        want_cache : return (out, cache) for a later backward call.
        """
        if self.conditional and cond is None:
            raise ValueError("conditional net needs cond=(y, sigma_y)")
        if not self.conditional and cond is not None:
            raise ValueError("unconditional net got a conditioning pair")
        x_rows, squeeze = _as_rows(x, self.dim, "x")
        n = x_rows.shape[0]
        sig = _sigma_rows(sigma, n)
        feats, c_skip, c_out, c_in = self._embed(x_rows, sig)

        cache = {"x": x_rows, "c_skip": c_skip, "c_out": c_out, "c_in": c_in, "trunk": [], "cond": []}
        h = feats
        g = None
        if self.conditional:
            y_rows, _ = _as_rows(cond[0], self.dim, "cond y")
            if y_rows.shape[0] == 1 and n > 1:
                y_rows = np.broadcast_to(y_rows, (n, self.dim))
            sig_c = _sigma_rows(cond[1], n)
            g, _, _, _ = self._embed(y_rows, sig_c)

        for i in range(len(self.hidden)):
            pre = h @ params[f"t{i}.W"].T + params[f"t{i}.b"]
            act, s = _silu(pre)
            layer = {"h_in": h, "pre": pre, "s": s, "act": act}
            if self.conditional:
                pre_c = g @ params[f"c{i}.W"].T + params[f"c{i}.b"]
                act_c, s_c = _silu(pre_c)
                w = float(_sigmoid(params[f"m{i}"]))
                merged = mp_sum(act, act_c, w)
                cache["cond"].append({"g_in": g, "pre": pre_c, "s": s_c, "act": act_c, "w": w})
                g = act_c
                h = merged
                layer["merged"] = merged
            else:
                h = act
            cache["trunk"].append(layer)

        raw = h @ params["out.W"].T + params["out.b"]
        out = c_skip[:, None] * x_rows + c_out[:, None] * raw
        cache["h_last"] = h
        cache["raw"] = raw
        if squeeze:
            out = out[0]
        if want_cache:
            return out, cache
        return out

    def backward(self, params: Params, cache: dict, dout) -> Tuple[Params, np.ndarray]:
        """Backpropagate dL/dout; returns (param grads, dL/dx).

        Gradients with respect to the conditioning inputs are not needed by
        any caller and are not computed.
        """
        dout = np.asarray(dout, dtype=float)
        if dout.ndim == 1:
            dout = dout[None, :]
        c_skip, c_out, c_in = cache["c_skip"], cache["c_out"], cache["c_in"]
        grads: Params = {}

        draw = dout * c_out[:, None]
        dx = dout * c_skip[:, None]
        grads["out.W"] = draw.T @ cache["h_last"]
        grads["out.b"] = draw.sum(axis=0)
        dh = draw @ params["out.W"]

        dg = None  # gradient flowing down the conditioning branch
        for i in reversed(range(len(self.hidden))):
            layer = cache["trunk"][i]
            if self.conditional:
                cl = cache["cond"][i]
                da, dc, dw = _mp_sum_backward(layer["act"], cl["act"], cl["w"], dh)
                if dg is not None:
                    dc = dc + dg
                raw_w = cl["w"] * (1.0 - cl["w"])
                grads[f"m{i}"] = np.array(dw * raw_w)
                dpre_c = dc * _silu_grad(cl["pre"], cl["s"])
                grads[f"c{i}.W"] = dpre_c.T @ cl["g_in"]
                grads[f"c{i}.b"] = dpre_c.sum(axis=0)
                dg = dpre_c @ params[f"c{i}.W"]
            else:
                da = dh
            dpre = da * _silu_grad(layer["pre"], layer["s"])
            grads[f"t{i}.W"] = dpre.T @ layer["h_in"]
            grads[f"t{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ params[f"t{i}.W"]

        dx = dx + dh[:, : self.dim] * c_in[:, None]
        return _check_finite_grads(grads, "denoiser"), dx


def generator_forward(net: DenoiserNet, params: Params, y, sigma, z, gamma: float, want_cache: bool = False):
    """One-step generative denoiser: re-noise the observation, then denoise.

    The observation y at level sigma is pushed up to sigma_hat = (1 + gamma)
    sigma by adding sqrt(sigma_hat^2 - sigma^2) z with z ~ N(0, I); the net is
    evaluated at (y_hat, sigma_hat) conditioned on the original (y, sigma), so
    z is the latent making the output stochastic.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    y_rows, squeeze = _as_rows(y, net.dim, "y")
    n = y_rows.shape[0]
    sig = _sigma_rows(sigma, n)
    z_rows, _ = _as_rows(z, net.dim, "z")
    sigma_hat = (1.0 + gamma) * sig
    widen = np.sqrt(sigma_hat**2 - sig**2)
    y_hat = y_rows + widen[:, None] * z_rows
    out = net.forward(params, y_hat, sigma_hat, cond=(y_rows, sig), want_cache=want_cache)
    if want_cache:
        out, cache = out
    result = out[0] if squeeze else out
    return (result, cache) if want_cache else result


def generator_backward(net: DenoiserNet, params: Params, cache: dict, dout) -> Params:
    """Parameter gradients of generator_forward; inputs need no gradients."""
    grads, _ = net.backward(params, cache, dout)
    return grads


# ----------------------------------------------------------------------
# discriminator


@dataclass(frozen=True)
class DiscriminatorNet:
    """Classifier over (diffused state, conditioning observation) pairs.

    Each input pair goes through its own encoder MLP; the concatenated
    features feed a zero-initialized linear head, so the net starts exactly
    undecided (probability 1/2). Logits are clamped to +-LOGIT_CLAMP.
    """

    dim: int
    hidden: Tuple[int, ...] = (128, 128)
    n_freq: int = 6
    sigma_data: float = 0.5

    @property
    def in_features(self) -> int:
        return self.dim + 1 + 2 * self.n_freq

    def describe(self) -> dict:
        return {
            "kind": "discriminator",
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_freq": self.n_freq,
            "sigma_data": self.sigma_data,
        }

    def init(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        for branch in ("a", "b"):
            fan = self.in_features
            for i, width in enumerate(self.hidden):
                params[f"{branch}{i}.W"] = rng.standard_normal((width, fan)) * np.sqrt(2.0 / fan)
                params[f"{branch}{i}.b"] = np.zeros(width)
                fan = width
        params["head.W"] = np.zeros((1, 2 * self.hidden[-1]))
        params["head.b"] = np.zeros(1)
        return params

    def _embed(self, x, sigma):
        _, _, c_in, c_noise = precondition(sigma, self.sigma_data)
        return np.concatenate([c_in[:, None] * x, noise_features(c_noise, self.n_freq)], axis=1), c_in

    def _encode(self, params: Params, branch: str, feats):
        layers = []
        h = feats
        for i in range(len(self.hidden)):
            pre = h @ params[f"{branch}{i}.W"].T + params[f"{branch}{i}.b"]
            act, s = _silu(pre)
            layers.append({"h_in": h, "pre": pre, "s": s})
            h = act
        return h, layers

    def forward(self, params: Params, x_t, t, y, sigma, want_cache: bool = False):
        """Probability in (0, 1) that (x_t, y) is a real pair, shape (n,)."""
        x_rows, squeeze = _as_rows(x_t, self.dim, "x_t")
        n = x_rows.shape[0]
        t_rows = _sigma_rows(t, n)
        y_rows, _ = _as_rows(y, self.dim, "y")
        if y_rows.shape[0] == 1 and n > 1:
            y_rows = np.broadcast_to(y_rows, (n, self.dim))
        sig_rows = _sigma_rows(sigma, n)

        feats_a, c_in_a = self._embed(x_rows, t_rows)
        feats_b, _ = self._embed(y_rows, sig_rows)
        fa, layers_a = self._encode(params, "a", feats_a)
        fb, layers_b = self._encode(params, "b", feats_b)
        joint = np.concatenate([fa, fb], axis=1)
        raw_logit = (joint @ params["head.W"].T + params["head.b"])[:, 0]
        logit = np.clip(raw_logit, -LOGIT_CLAMP, LOGIT_CLAMP)
        prob = _sigmoid(logit)
        if squeeze:
            prob = prob[0]
        if not want_cache:
            return prob
        cache = {
            "layers_a": layers_a,
            "layers_b": layers_b,
            "joint": joint,
            "raw_logit": raw_logit,
            "c_in_a": c_in_a,
            "n": n,
        }
        return prob, cache

    def logits(self, params: Params, x_t, t, y, sigma) -> np.ndarray:
        prob = self.forward(params, x_t, t, y, sigma)
        return np.log(prob) - np.log1p(-prob)

    def backward(self, params: Params, cache: dict, dlogit) -> Tuple[Params, np.ndarray]:
        """Backpropagate dL/dlogit; returns (param grads, dL/dx_t)."""
        dlogit = np.asarray(dlogit, dtype=float).reshape(cache["n"])
        # The clamp kills gradients strictly outside the linear window.
        mask = np.abs(cache["raw_logit"]) < LOGIT_CLAMP
        dlogit = dlogit * mask
        grads: Params = {}
        grads["head.W"] = (dlogit[None, :] @ cache["joint"])
        grads["head.b"] = np.array([dlogit.sum()])
        djoint = dlogit[:, None] @ params["head.W"]
        width = self.hidden[-1]
        d_branch = {"a": djoint[:, :width], "b": djoint[:, width:]}
        dx = None
        for branch in ("a", "b"):
            dh = d_branch[branch]
            layers = cache[f"layers_{branch}"]
            for i in reversed(range(len(self.hidden))):
                layer = layers[i]
                dpre = dh * _silu_grad(layer["pre"], layer["s"])
                grads[f"{branch}{i}.W"] = dpre.T @ layer["h_in"]
                grads[f"{branch}{i}.b"] = dpre.sum(axis=0)
                dh = dpre @ params[f"{branch}{i}.W"]
            if branch == "a":
                dx = dh[:, : self.dim] * cache["c_in_a"][:, None]
        return _check_finite_grads(grads, "discriminator"), dx


# ----------------------------------------------------------------------
# scalar uncertainty head


@dataclass(frozen=True)
class ScalarNet:
    """Scalar function of log t; zero-initialized head makes it start at 0."""

    hidden: int = 64

    def describe(self) -> dict:
        return {"kind": "scalar", "hidden": self.hidden}

    def init(self, rng: np.random.Generator) -> Params:
        return {
            "in.W": rng.standard_normal((self.hidden, 1)),
            "in.b": np.zeros(self.hidden),
            "out.W": np.zeros((1, self.hidden)),
            "out.b": np.zeros(1),
        }

    def forward(self, params: Params, t, want_cache: bool = False):
        t_rows = _sigma_rows(t, np.size(t))
        u = np.log(t_rows)[:, None]
        pre = u @ params["in.W"].T + params["in.b"]
        act, s = _silu(pre)
        out = (act @ params["out.W"].T + params["out.b"])[:, 0]
        if not want_cache:
            return out
        return out, {"u": u, "pre": pre, "s": s, "act": act}

    def backward(self, params: Params, cache: dict, dout) -> Params:
        dout = np.asarray(dout, dtype=float).reshape(-1)
        grads: Params = {
            "out.W": dout[None, :] @ cache["act"],
            "out.b": np.array([dout.sum()]),
        }
        dact = dout[:, None] @ params["out.W"]
        dpre = dact * _silu_grad(cache["pre"], cache["s"])
        grads["in.W"] = dpre.T @ cache["u"]
        grads["in.b"] = dpre.sum(axis=0)
        return _check_finite_grads(grads, "uncertainty")


# ----------------------------------------------------------------------
# optimizer and averaging


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0


def adam_init(params: Params) -> AdamState:
    zeros = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
    return AdamState(m=zeros, v={k: np.zeros_like(v) for k, v in zeros.items()}, step=0)


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> Params:
    """One bias-corrected moment update; mutates state, returns new params."""
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise KeyError(f"gradient keys do not match parameters: {sorted(missing)}")
    state.step += 1
    t = state.step
    out: Params = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=float)
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / (1.0 - beta1**t)
        v_hat = state.v[k] / (1.0 - beta2**t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def ema_init(params: Params) -> Params:
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


def ema_update(shadow: Params, params: Params, beta: float) -> Params:
    """shadow <- beta * shadow + (1 - beta) * params (functional)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return {k: beta * shadow[k] + (1.0 - beta) * np.asarray(params[k], dtype=float) for k in shadow}


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, nets: Dict[str, Params], meta: dict, adam: Optional[Dict[str, AdamState]] = None) -> None:
    """Write a single .npz with a mandatory format version.

    `nets` maps names to parameter dicts (EMA shadows are just another entry);
    `meta` is any JSON-serializable payload (configs, counters, seeds).
    """
    payload = {"version": CHECKPOINT_VERSION, "meta": meta}
    arrays = {"__meta__": np.array(json.dumps(payload))}
    for name, params in nets.items():
        for k, v in params.items():
            arrays[f"net:{name}:{k}"] = np.asarray(v, dtype=float)
    if adam:
        for name, state in adam.items():
            arrays[f"adamstep:{name}"] = np.array(state.step)
            for k, v in state.m.items():
                arrays[f"adamm:{name}:{k}"] = v
            for k, v in state.v.items():
                arrays[f"adamv:{name}:{k}"] = v
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Read a checkpoint; returns (nets, meta, adam). Rejects unknown versions."""
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz:
            raise ValueError(f"{path} is not a checkpoint (missing metadata)")
        payload = json.loads(str(npz["__meta__"][()]))
        version = payload.get("version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
        nets: Dict[str, Params] = {}
        adam: Dict[str, AdamState] = {}
        steps: Dict[str, int] = {}
        for key in npz.files:
            if key == "__meta__":
                continue
            tag, rest = key.split(":", 1)
            if tag == "net":
                name, pkey = rest.split(":", 1)
                nets.setdefault(name, {})[pkey] = npz[key]
            elif tag == "adamm":
                name, pkey = rest.split(":", 1)
                adam.setdefault(name, AdamState(m={}, v={})).m[pkey] = npz[key]
            elif tag == "adamv":
                name, pkey = rest.split(":", 1)
                adam.setdefault(name, AdamState(m={}, v={})).v[pkey] = npz[key]
            elif tag == "adamstep":
                steps[rest] = int(npz[key])
        for name, step in steps.items():
            adam.setdefault(name, AdamState(m={}, v={})).step = step
    return nets, payload["meta"], adam
