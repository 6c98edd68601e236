"""Denoising network and action-value network.

The denoiser maps a partially masked sequence plus conditioning (diffusion
step index and environment state features) to per-position logits over the
*clean* alphabet — the mask token is structurally excluded from the output.
Conditioning enters only through feature-wise modulation layers
(``norm(h) * (scale + 1) + shift`` with gated residuals) whose heads start
at zero, so at initialization the output is independent of step and state.

Two variants share one interface: a small transformer (default) and a flat
MLP for the tiniest problems.  The value network is an MLP over state
features concatenated with per-position one-hot encodings of a fully
unmasked action sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, init_params
from .schedule import Vocab

__all__ = [
    "DenoiserConfig",
    "DenoiserOutput",
    "QNetConfig",
    "denoiser_forward",
    "denoiser_logits",
    "init_denoiser",
    "init_qnet",
    "mu_theta",
    "onehot_actions",
    "qnet_forward",
    "qnet_value",
    "timestep_embedding",
]


@dataclass(frozen=True)
class DenoiserConfig:
    seq_len: int
    n_actions: int
    state_dim: int
    arch: str = "transformer"
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    ffn_mult: int = 2
    t_embed_dim: int = 8
    use_positions: bool = True

    def __post_init__(self) -> None:
        if self.arch not in ("transformer", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be even")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_actions)

    @property
    def cond_dim(self) -> int:
        return self.t_embed_dim + self.state_dim


@dataclass(frozen=True)
class DenoiserOutput:
    """Per-position logits over the clean alphabet, shape (K, n_actions)."""

    logits: np.ndarray


@dataclass(frozen=True)
class QNetConfig:
    state_dim: int
    seq_len: int
    n_actions: int
    hidden: int = 64


def timestep_embedding(n: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step index, shape (..., dim)."""
    n = np.asarray(n, dtype=np.float64)
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.power(10000.0, -exponents)
    ang = n[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _denoiser_shapes(cfg: DenoiserConfig) -> tuple[dict[str, tuple[int, ...]], set]:
    nt = cfg.vocab.n_tokens
    d, c = cfg.d_model, cfg.cond_dim
    shapes: dict[str, tuple[int, ...]] = {}
    zero: set[str] = set()
    if cfg.arch == "transformer":
        shapes["emb"] = (nt, d)
        if cfg.use_positions:
            shapes["pos"] = (cfg.seq_len, d)
        ffn = cfg.ffn_mult * d
        for i in range(cfg.n_blocks):
            p = f"blk{i}."
            shapes[p + "wq"] = (d, d)
            shapes[p + "wk"] = (d, d)
            shapes[p + "wv"] = (d, d)
            shapes[p + "wo"] = (d, d)
            shapes[p + "film_w"] = (c, 6 * d)
            shapes[p + "film_b"] = (6 * d,)
            zero.add(p + "film_w")
            shapes[p + "ffn_w1"] = (d, ffn)
            shapes[p + "ffn_b1"] = (ffn,)
            shapes[p + "ffn_w2"] = (ffn, d)
            shapes[p + "ffn_b2"] = (d,)
        shapes["head_w"] = (d, cfg.n_actions)
        shapes["head_b"] = (cfg.n_actions,)
    else:
        h = cfg.d_model
        shapes["mlp.w1"] = (cfg.seq_len * nt, h)
        shapes["mlp.b1"] = (h,)
        shapes["mlp.film_w"] = (c, 2 * h)
        shapes["mlp.film_b"] = (2 * h,)
        zero.add("mlp.film_w")
        shapes["mlp.w2"] = (h, h)
        shapes["mlp.b2"] = (h,)
        shapes["mlp.w3"] = (h, cfg.seq_len * cfg.n_actions)
        shapes["mlp.b3"] = (cfg.seq_len * cfg.n_actions,)
    return shapes, zero


def init_denoiser(cfg: DenoiserConfig, rng: np.random.Generator) -> ParamStore:
    shapes, zero = _denoiser_shapes(cfg)
    return init_params(shapes, rng, zero=zero)


def _cond_features(
    cfg: DenoiserConfig, n: np.ndarray, states: np.ndarray
) -> np.ndarray:
    temb = timestep_embedding(n, cfg.t_embed_dim)
    return np.concatenate([temb, states], axis=-1)


def _attention(leaves, prefix: str, h: Tensor, cfg: DenoiserConfig) -> Tensor:
    r, k = h.shape[0], cfg.seq_len
    nh = cfg.n_heads
    dh = cfg.d_model // nh
    q = ad.matmul(h, leaves[prefix + "wq"])
    kk = ad.matmul(h, leaves[prefix + "wk"])
    v = ad.matmul(h, leaves[prefix + "wv"])
    if nh > 1:
        q = ad.permute(ad.reshape(q, (r, k, nh, dh)), (0, 2, 1, 3))
        kk = ad.permute(ad.reshape(kk, (r, k, nh, dh)), (0, 2, 1, 3))
        v = ad.permute(ad.reshape(v, (r, k, nh, dh)), (0, 2, 1, 3))
    scores = ad.mul(ad.matmul(q, ad.transpose_last2(kk)), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)
    if nh > 1:
        out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (r, k, cfg.d_model))
    return ad.matmul(out, leaves[prefix + "wo"])


def _film_chunks(leaves, prefix: str, cond: np.ndarray, d: int, count: int):
    film = ad.add(
        ad.matmul(Tensor(cond), leaves[prefix + "film_w"]), leaves[prefix + "film_b"]
    )
    return [ad.narrow_last(film, i * d, d) for i in range(count)]


def _transformer_logits(
    leaves, cfg: DenoiserConfig, tokens: np.ndarray, cond: np.ndarray
) -> Tensor:
    r = tokens.shape[0]
    x = ad.embedding(leaves["emb"], tokens)
    if cfg.use_positions:
        x = ad.add(x, leaves["pos"])
    d = cfg.d_model
    for i in range(cfg.n_blocks):
        p = f"blk{i}."
        chunks = _film_chunks(leaves, p, cond, d, 6)
        scale1, shift1, gate1, scale2, shift2, gate2 = [
            ad.reshape(ch, (r, 1, d)) for ch in chunks
        ]
        h = ad.layer_norm(x)
        h = ad.add(ad.mul(h, ad.add(scale1, 1.0)), shift1)
        a = _attention(leaves, p, h, cfg)
        x = ad.add(x, ad.mul(a, ad.add(gate1, 1.0)))
        h = ad.layer_norm(x)
        h = ad.add(ad.mul(h, ad.add(scale2, 1.0)), shift2)
        f = ad.relu(ad.add(ad.matmul(h, leaves[p + "ffn_w1"]), leaves[p + "ffn_b1"]))
        f = ad.add(ad.matmul(f, leaves[p + "ffn_w2"]), leaves[p + "ffn_b2"])
        x = ad.add(x, ad.mul(f, ad.add(gate2, 1.0)))
    x = ad.layer_norm(x)
    return ad.add(ad.matmul(x, leaves["head_w"]), leaves["head_b"])


def _mlp_logits(
    leaves, cfg: DenoiserConfig, tokens: np.ndarray, cond: np.ndarray
) -> Tensor:
    r = tokens.shape[0]
    nt = cfg.vocab.n_tokens
    x = np.eye(nt)[tokens].reshape(r, cfg.seq_len * nt)
    h = ad.add(ad.matmul(Tensor(x), leaves["mlp.w1"]), leaves["mlp.b1"])
    h = ad.layer_norm(h)
    scale, shift = _film_chunks(leaves, "mlp.", cond, cfg.d_model, 2)
    h = ad.tanh(ad.add(ad.mul(h, ad.add(scale, 1.0)), shift))
    h = ad.tanh(ad.add(ad.matmul(h, leaves["mlp.w2"]), leaves["mlp.b2"]))
    out = ad.add(ad.matmul(h, leaves["mlp.w3"]), leaves["mlp.b3"])
    return ad.reshape(out, (r, cfg.seq_len, cfg.n_actions))


def denoiser_logits(
    leaves: dict[str, Tensor],
    cfg: DenoiserConfig,
    tokens: np.ndarray,
    n,
    states: np.ndarray,
) -> Tensor:
    """Batched logits, shape (R, K, n_actions).

    ``tokens`` is (R, K) int64 (mask ids allowed), ``n`` a scalar or (R,)
    step index, ``states`` (R, state_dim).  Pass leaves from
    ``ParamStore.leaves()``; gradients flow to leaves that require them.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ValueError(f"tokens must be (R, {cfg.seq_len}), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() > cfg.vocab.mask_id:
        raise ValueError("token id outside alphabet")
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != cfg.state_dim:
        raise ValueError(f"states must be (R, {cfg.state_dim}), got {states.shape}")
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), (tokens.shape[0],))
    cond = _cond_features(cfg, n, states)
    if cfg.arch == "transformer":
        return _transformer_logits(leaves, cfg, tokens, cond)
    return _mlp_logits(leaves, cfg, tokens, cond)


def denoiser_forward(
    store: ParamStore, cfg: DenoiserConfig, tokens: np.ndarray, n: int, state: np.ndarray
) -> DenoiserOutput:
    """Single-sequence convenience wrapper (no gradients)."""
    t = denoiser_logits(
        store.leaves(requires_grad=False),
        cfg,
        np.asarray(tokens)[None, :],
        n,
        np.asarray(state, dtype=np.float64)[None, :],
    )
    return DenoiserOutput(logits=t.data[0])


def mu_theta(output: DenoiserOutput, tokens: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Predicted clean-token distribution per position, shape (K, n_actions).

    Masked positions get the softmax of their logits; unmasked positions get
    a one-hot spike on their current token (the model never edits them).
    """
    from . import kernels

    tokens = np.asarray(tokens, dtype=np.int64)
    probs = kernels.softmax_rows(np.ascontiguousarray(output.logits))
    unmasked = tokens != vocab.mask_id
    if unmasked.any():
        probs[unmasked] = 0.0
        probs[unmasked, tokens[unmasked]] = 1.0
    return probs


def onehot_actions(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """(R, Kq) int tokens -> (R, Kq * n_actions) float one-hot features."""
    actions = np.asarray(actions, dtype=np.int64)
    if actions.min() < 0 or actions.max() >= n_actions:
        raise ValueError("value network input must be fully unmasked actions")
    r = actions.shape[0]
    return np.eye(n_actions)[actions].reshape(r, -1)


def _qnet_shapes(cfg: QNetConfig) -> dict[str, tuple[int, ...]]:
    in_dim = cfg.state_dim + cfg.seq_len * cfg.n_actions
    h = cfg.hidden
    return {
        "q.w1": (in_dim, h),
        "q.b1": (h,),
        "q.w2": (h, h),
        "q.b2": (h,),
        "q.w3": (h, 1),
        "q.b3": (1,),
    }


def init_qnet(cfg: QNetConfig, rng: np.random.Generator) -> ParamStore:
    return init_params(_qnet_shapes(cfg), rng)


def qnet_value(
    leaves: dict[str, Tensor],
    cfg: QNetConfig,
    states: np.ndarray,
    actions: np.ndarray,
) -> Tensor:
    """Batched Q(s, a), shape (R,)."""
    states = np.asarray(states, dtype=np.float64)
    x = np.concatenate([states, onehot_actions(actions, cfg.n_actions)], axis=1)
    h = ad.tanh(ad.add(ad.matmul(Tensor(x), leaves["q.w1"]), leaves["q.b1"]))
    h = ad.tanh(ad.add(ad.matmul(h, leaves["q.w2"]), leaves["q.b2"]))
    out = ad.add(ad.matmul(h, leaves["q.w3"]), leaves["q.b3"])
    return ad.reshape(out, (states.shape[0],))


def qnet_forward(
    store: ParamStore, cfg: QNetConfig, state: np.ndarray, action: np.ndarray
) -> float:
    """Single (state, action) value (no gradients)."""
    t = qnet_value(
        store.leaves(requires_grad=False),
        cfg,
        np.asarray(state, dtype=np.float64)[None, :],
        np.asarray(action)[None, :],
    )
    return float(t.data[0])
