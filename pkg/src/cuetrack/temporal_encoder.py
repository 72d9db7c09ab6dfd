"""Track-token temporal encoder over per-frame history features."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import FFN, LayerNorm, Module, Parameter, Tensor


class TemporalLayer(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        scale = 1.0 / math.sqrt(d)
        self.d = d
        self.WQ = Parameter(rng.normal(0, scale, (d, d)))
        self.WK = Parameter(rng.normal(0, scale, (d, d)))
        self.WV = Parameter(rng.normal(0, scale, (d, d)))
        self.ln = LayerNorm(d)
        self.ffn = FFN(d, rng)


def lag_encoding(lags: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal code of how many frames ago each history row was observed: [..., d]."""
    enc = nx.sinusoidal_encoding(np.asarray(lags, dtype=np.float64)[..., None], bands=d // 2)
    if enc.shape[-1] < d:
        enc = np.concatenate([enc, np.zeros(enc.shape[:-1] + (d - enc.shape[-1],))], axis=-1)
    return enc


def causal_token_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """[M, width, width] mask for rows laid out as [history..., token, padding...].

    Row i sees columns j <= i, and nothing past the token, so the token (at index T')
    sees the whole history while history rows never see later frames.
    """
    i = np.arange(width)
    causal = i[None, :] <= i[:, None]
    live = i[None, :] <= np.asarray(lengths)[:, None]  # [M, width]
    return causal[None] & live[:, None, :]


def temporal_encode(Z: Tensor, token: Tensor, layer: TemporalLayer, lags: np.ndarray | None = None):
    """Summarise one history Z [T', d] with the shared track token.

    Returns (z_hat [d], Z_hat [T', d], attention scores [T'+1, T'+1]).
    """
    Z = nx.as_tensor(Z)
    T = Z.shape[0]
    if T == 0:
        raise nx.ContractError("temporal_encode needs at least one history row")
    if lags is None:
        lags = np.arange(T, 0, -1)
    X = nx.concat([Z + lag_encoding(lags, layer.d), token], axis=0)
    out, scores = _block(X, causal_token_mask(np.array([T]), T + 1)[0], layer)
    return out[T], out[:T], scores


def _block(X: Tensor, mask: np.ndarray, layer: TemporalLayer):
    attn, scores = nx.attention(X @ layer.WQ, X @ layer.WK, X @ layer.WV, mask=mask)
    return layer.ffn(layer.ln(X + attn)), scores


def temporal_encode_batch(rows: Tensor, lengths: np.ndarray, offsets: np.ndarray, lags: np.ndarray,
                          token: Tensor, layer: TemporalLayer):
    """All tracks at once from flattened history rows [R, d].

    Histories are padded to a common width behind the token; the mask keeps every track's
    result identical to running ``temporal_encode`` on it alone.
    Returns (z_hat [M, d], Z_hat rows [R, d]).
    """
    d = layer.d
    M = len(lengths)
    if M == 0:
        return Tensor(np.zeros((0, d))), Tensor(np.zeros((0, d)))
    width = int(lengths.max()) + 1
    R = rows.shape[0]
    src = nx.concat([rows + lag_encoding(lags, d), token, Tensor(np.zeros((1, d)))], axis=0)
    token_row, pad_row = R, R + 1
    gather = np.full((M, width), pad_row, dtype=int)
    flat_m, flat_t = [], []
    for m, (n, off) in enumerate(zip(lengths, offsets)):
        gather[m, :n] = np.arange(off, off + n)
        gather[m, n] = token_row
        flat_m.extend([m] * n)
        flat_t.extend(range(n))
    X = src[gather]  # [M, width, d]
    out, _ = _block(X, causal_token_mask(lengths, width), layer)
    z_hat = out[np.arange(M), lengths]
    Z_hat = out[np.asarray(flat_m, dtype=int), np.asarray(flat_t, dtype=int)]
    return z_hat, Z_hat
