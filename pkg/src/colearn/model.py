"""Shared-encoder transformer with an autoregressive and a masked (iterative) decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIAL = 4
NEG_INF = -1e9

PE_KINDS = ("sinusoidal", "learnable")
PARAM_GROUPS = ("enc", "enc_nar", "ar", "nar", "hyb", "len")


@dataclass
class ModelConfig:
    vocab_size: int = 24
    d_model: int = 64
    d_hidden: int = 128
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 32
    dropout: float = 0.1
    enc_pe: str = "sinusoidal"
    ar_pe: str = "sinusoidal"
    nar_pe: str = "learnable"
    share_encoder: bool = True
    hybrid_enabled: bool = False
    nar_variant: str = "cmlm"

    def __post_init__(self):
        for f in ("vocab_size", "d_model", "d_hidden", "n_heads", "n_enc_layers",
                  "n_dec_layers", "max_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size must exceed the 4 reserved special ids")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for f in ("enc_pe", "ar_pe", "nar_pe"):
            if getattr(self, f) not in PE_KINDS:
                raise ValueError(f"{f} must be one of {PE_KINDS}")
        if self.nar_variant not in ("cmlm", "disco"):
            raise ValueError("nar_variant must be 'cmlm' or 'disco'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def sinusoidal_pe(n_positions: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos table: column 2i is sin(pos / 10000^(2i/d)), 2i+1 the cos."""
    if d_model % 2:
        raise ValueError("sinusoidal position embeddings need an even d_model")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((n_positions, d_model))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Parameters:
    """Named parameter tensors stored as views into one flat buffer.

    The flat layout lets the optimiser, clipping and checkpointing work on a
    single array; ``grad_flat`` is laid out the same way.
    """

    def __init__(self, shapes: dict[str, tuple[int, ...]], dtype=np.float64):
        self.shapes = dict(shapes)
        self.offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, size)
            off += size
        self.flat = np.zeros(off, dtype=dtype)
        self.grad_flat = np.zeros(off, dtype=dtype)
        self.tensors: dict[str, Tensor] = {}
        for name, shape in self.shapes.items():
            o, s = self.offsets[name]
            self.tensors[name] = Tensor(self.flat[o:o + s].reshape(shape), requires_grad=True, name=name)
        self.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.shapes)

    def zero_grad(self) -> None:
        self.grad_flat[:] = 0
        for name, t in self.tensors.items():
            o, s = self.offsets[name]
            t.grad = self.grad_flat[o:o + s].reshape(self.shapes[name])

    def grad(self, name: str) -> np.ndarray:
        o, s = self.offsets[name]
        return self.grad_flat[o:o + s].reshape(self.shapes[name])

    def group_slice_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.flat.size, dtype=bool)
        for name in self.names():
            if param_group(name) == group:
                o, s = self.offsets[name]
                mask[o:o + s] = True
        return mask

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class DualStates:
    """Decoder outputs for one batch (batched over the leading axis)."""

    E: Tensor
    H_ar: Tensor | None
    H_nar: Tensor | None
    logp_ar: Tensor | None
    logp_nar: Tensor | None
    H_hyb: Tensor | None = None
    logp_hyb: Tensor | None = None

    @property
    def P_ar(self) -> np.ndarray:
        return np.exp(self.logp_ar.data)

    @property
    def P_nar(self) -> np.ndarray:
        return np.exp(self.logp_nar.data)

    @property
    def P_hyb(self) -> np.ndarray:
        return np.exp(self.logp_hyb.data)


def padding_mask(ids: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive key mask [B, 1, N]: -1e9 on padding slots."""
    return np.where(ids == PAD, NEG_INF, 0.0).astype(dtype)[:, None, :]


class DualDecoderModel:
    """One (or two, when unshared) encoders feeding an AR and a NAR decoder.

    Inputs are token-id arrays of shape [B, N]; a 1-D array is treated as a
    batch of one and the leading axis is squeezed from the result.
    """

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0,
                 dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = Parameters(self._param_shapes(), dtype=self.dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._init_weights(rng)
        self.dropout_rng: np.random.Generator | None = None
        self._spe = sinusoidal_pe(config.max_len + 2, config.d_model).astype(self.dtype)

    # ------------------------------------------------------------ construction

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        d, h, V = c.d_model, c.d_hidden, c.vocab_size
        shapes: dict[str, tuple[int, ...]] = {}

        def lin(name, n_in, n_out):
            shapes[f"{name}.w"] = (n_in, n_out)
            shapes[f"{name}.b"] = (n_out,)

        def ln(name):
            shapes[f"{name}.g"] = (d,)
            shapes[f"{name}.b"] = (d,)

        def attn(name):
            for p in ("q", "k", "v", "o"):
                lin(f"{name}.{p}", d, d)

        def ffn(name):
            lin(f"{name}.fc1", d, h)
            lin(f"{name}.fc2", h, d)

        encoders = ["enc"] if c.share_encoder else ["enc", "enc_nar"]
        for enc in encoders:
            shapes[f"{enc}.embed"] = (V, d)
            if c.enc_pe == "learnable":
                shapes[f"{enc}.pos"] = (c.max_len + 2, d)
            for i in range(c.n_enc_layers):
                attn(f"{enc}.l{i}.self")
                ln(f"{enc}.l{i}.ln1")
                ffn(f"{enc}.l{i}.ffn")
                ln(f"{enc}.l{i}.ln2")
        for dec, pe in (("ar", c.ar_pe), ("nar", c.nar_pe)):
            shapes[f"{dec}.embed"] = (V, d)
            if pe == "learnable":
                shapes[f"{dec}.pos"] = (c.max_len + 2, d)
            for i in range(c.n_dec_layers):
                attn(f"{dec}.l{i}.self")
                ln(f"{dec}.l{i}.ln1")
                attn(f"{dec}.l{i}.cross")
                ln(f"{dec}.l{i}.ln2")
                ffn(f"{dec}.l{i}.ffn")
                ln(f"{dec}.l{i}.ln3")
            lin(f"{dec}.out", d, V)
        if c.hybrid_enabled:
            lin("hyb.fc1", 2 * d, d)
            lin("hyb.fc2", d, d)
            lin("hyb.out", d, V)
        lin("len.out", d, c.max_len)
        return shapes

    def _init_weights(self, rng: np.random.Generator) -> None:
        for name, shape in self.params.shapes.items():
            t = self.params[name].data
            leaf = name.rsplit(".", 1)[1]
            if leaf == "g":
                t[...] = 1.0
            elif leaf == "b":
                t[...] = 0.0
            else:
                t[...] = truncated_normal(rng, shape)

    # ------------------------------------------------------------ building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return tc.linear(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return tc.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _drop(self, x: Tensor, train: bool) -> Tensor:
        return tc.dropout(x, self.config.dropout, self.dropout_rng, train)

    def _mha(self, x: Tensor, kv: Tensor, name: str, add_mask, keep=None, kv_in: Tensor | None = None) -> Tensor:
        src = kv if kv_in is None else kv_in
        q = self._lin(x, f"{name}.q")
        k = self._lin(src, f"{name}.k")
        v = self._lin(src, f"{name}.v")
        a = tc.attention(q, k, v, self.config.n_heads, add_mask, keep)
        return self._lin(a, f"{name}.o")

    def _ffn(self, x: Tensor, name: str, train: bool) -> Tensor:
        hid = tc.gelu(self._lin(x, f"{name}.fc1"))
        return self._lin(hid, f"{name}.fc2")

    def _embed(self, ids: np.ndarray, prefix: str, pe_kind: str) -> Tensor:
        n = ids.shape[1]
        if n > self.config.max_len + 2:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = tc.scale(tc.embedding(self._p(f"{prefix}.embed"), ids), math.sqrt(self.config.d_model))
        if pe_kind == "sinusoidal":
            return tc.add(x, self._spe[:n])
        return tc.add(x, tc.embedding(self._p(f"{prefix}.pos"), np.arange(n)))

    @staticmethod
    def _batched(ids) -> tuple[np.ndarray, bool]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            return ids[None, :], True
        return ids, False

    def _check_ids(self, ids: np.ndarray) -> None:
        bad = np.argwhere((ids < 0) | (ids >= self.config.vocab_size))
        if bad.size:
            raise ValueError(f"token id out of vocabulary at position {tuple(int(i) for i in bad[0])}")

    # ------------------------------------------------------------ public forward API

    def encoder_prefix(self, side: str = "ar") -> str:
        if self.config.share_encoder or side == "ar":
            return "enc"
        return "enc_nar"

    def encode(self, src, train: bool = False, side: str = "ar") -> Tensor:
        """Source states [B, M, d] from the (shared) encoder."""
        ids, single = self._batched(src)
        self._check_ids(ids)
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"source length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        prefix = self.encoder_prefix(side)
        mask = padding_mask(ids, self.dtype)
        x = self._drop(self._embed(ids, prefix, self.config.enc_pe), train)
        for i in range(self.config.n_enc_layers):
            p = f"{prefix}.l{i}"
            x = self._ln(tc.add(x, self._drop(self._mha(x, x, f"{p}.self", mask), train)), f"{p}.ln1")
            x = self._ln(tc.add(x, self._drop(self._ffn(x, f"{p}.ffn", train), train)), f"{p}.ln2")
        return tc.reshape(x, x.shape[1:]) if single else x

    def _decode(self, prefix: str, pe_kind: str, E: Tensor, src_ids: np.ndarray | None,
                y: np.ndarray, self_mask: np.ndarray, train: bool,
                keep: np.ndarray | None = None, kv_ids: np.ndarray | None = None) -> Tensor:
        if E.data.ndim == 2:
            E = tc.reshape(E, (1,) + E.shape)
        B, M = E.shape[0], E.shape[1]
        cross_mask = (padding_mask(src_ids, self.dtype) if src_ids is not None
                      else np.zeros((B, 1, M), dtype=self.dtype))
        x = self._drop(self._embed(y, prefix, pe_kind), train)
        kv_in = None
        if kv_ids is not None:
            kv_in = self._embed(kv_ids, prefix, pe_kind)
        for i in range(self.config.n_dec_layers):
            p = f"{prefix}.l{i}"
            sa = self._mha(x, x, f"{p}.self", self_mask, keep, kv_in=kv_in)
            x = self._ln(tc.add(x, self._drop(sa, train)), f"{p}.ln1")
            ca = self._mha(x, E, f"{p}.cross", cross_mask)
            x = self._ln(tc.add(x, self._drop(ca, train)), f"{p}.ln2")
            x = self._ln(tc.add(x, self._drop(self._ffn(x, f"{p}.ffn", train), train)), f"{p}.ln3")
        return x

    def ar_states(self, E: Tensor, y_in, src=None, train: bool = False, causal: bool = True) -> Tensor:
        """AR decoder states for a <bos>-shifted target; position t sees y_in[:t+1]."""
        y, single = self._batched(y_in)
        self._check_ids(y)
        n = y.shape[1]
        if n > self.config.max_len + 1:
            raise ValueError(f"target length {n} exceeds max_len {self.config.max_len}")
        mask = padding_mask(y, self.dtype)
        if causal:
            mask = mask + np.triu(np.full((n, n), NEG_INF, dtype=self.dtype), k=1)[None]
        src_ids = None if src is None else self._batched(src)[0]
        H = self._decode("ar", self.config.ar_pe, E, src_ids, y, mask, train)
        return tc.reshape(H, H.shape[1:]) if single else H

    def nar_states(self, E: Tensor, y_obs, src=None, train: bool = False,
                   contexts: np.ndarray | None = None, y_full=None) -> Tensor:
        """Bidirectional decoder states for an input with [M] at masked slots.

        With the DisCo variant, ``contexts`` [B, N, N] (1 = visible) restricts
        what each position attends to and keys/values come from ``y_full``.
        """
        y, single = self._batched(y_obs)
        self._check_ids(y)
        n = y.shape[1]
        if n > self.config.max_len + 1:
            raise ValueError(f"target length {n} exceeds max_len {self.config.max_len}")
        mask = padding_mask(y, self.dtype)
        keep = None
        kv_ids = None
        if self.config.nar_variant == "disco":
            if contexts is None:
                contexts = (y != MASK)[:, None, :] & ~np.eye(n, dtype=bool)[None]
            contexts = np.asarray(contexts, dtype=bool)
            if contexts.ndim == 2:
                contexts = contexts[None]
            visible = contexts & (y != PAD)[:, None, :]
            mask = np.where(visible, 0.0, NEG_INF).astype(self.dtype)
            keep = visible.astype(self.dtype)
            kv_ids = y if y_full is None else self._batched(y_full)[0]
            kv_ids = np.where(visible.any(axis=1), kv_ids, MASK)
            y = np.where(y == PAD, PAD, MASK)
        src_ids = None if src is None else self._batched(src)[0]
        H = self._decode("nar", self.config.nar_pe, E, src_ids, y, mask, train, keep, kv_ids)
        return tc.reshape(H, H.shape[1:]) if single else H

    def hybrid_states(self, H_ar: Tensor, H_nar: Tensor) -> Tensor:
        """Per-position fusion MLP over the concatenated AR/NAR states."""
        if not self.config.hybrid_enabled:
            raise ValueError("hybrid head is disabled in this model")
        if H_ar.shape != H_nar.shape:
            raise ValueError(f"state shapes differ: {H_ar.shape} vs {H_nar.shape}")
        h = tc.gelu(self._lin(tc.concat([H_ar, H_nar], axis=-1), "hyb.fc1"))
        return self._lin(h, "hyb.fc2")

    def output_logits(self, H: Tensor, head: str) -> Tensor:
        if head not in ("ar", "nar", "hyb"):
            raise ValueError(f"unknown head {head!r}")
        if head == "hyb" and not self.config.hybrid_enabled:
            raise ValueError("hybrid head is disabled in this model")
        return self._lin(H, f"{head}.out")

    def output_logprobs(self, H: Tensor, head: str) -> Tensor:
        return tc.log_softmax(self.output_logits(H, head))

    def output_distribution(self, H: Tensor, head: str) -> Tensor:
        """Row-stochastic distribution over the vocabulary for each position."""
        return tc.softmax_rows(self.output_logits(H, head))

    def predict_length(self, E: Tensor, src=None) -> Tensor:
        """Length logits (index k means length k+1) from the mean-pooled encoder states."""
        if E.data.ndim == 2:
            E = tc.reshape(E, (1,) + E.shape)
            single = True
        else:
            single = False
        B, M = E.shape[0], E.shape[1]
        if src is None:
            weights = np.full((B, M, 1), 1.0 / M)
        else:
            ids = self._batched(src)[0]
            real = (ids != PAD).astype(self.dtype)
            weights = (real / real.sum(axis=1, keepdims=True))[..., None]
        pooled = tc.sum(tc.mul(E, weights.astype(self.dtype)), axis=1)
        logits = self._lin(pooled, "len.out")
        return tc.reshape(logits, (self.config.max_len,)) if single else logits

    # ------------------------------------------------------------ utilities

    def copy(self) -> "DualDecoderModel":
        other = DualDecoderModel.__new__(DualDecoderModel)
        other.config = self.config
        other.dtype = self.dtype
        other.params = Parameters(self.params.shapes, dtype=self.dtype)
        other.params.flat[:] = self.params.flat
        other.dropout_rng = None
        other._spe = self._spe
        return other

    def n_parameters(self) -> int:
        return int(self.params.flat.size)
