"""Encoder-decoder transformer with switchable activation modes.

Pre-norm blocks, learned absolute positions, a unit-norm projection head on
the encoder [CLS] output, a two-class matching head on the decoder, and
cross-attention only in the top-L decoder layers.  Parameters carry
per-name trainable flags; DECODER_ONLY mode freezes the encoder and
cross-attention and caches the constant [CLM] encoder pass.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import CLM, EOS, PAD

LN_EPS = 1e-5
_FORMAT_VERSION = 1
# fixed zip entry timestamp so identical states produce identical archives
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Mode(enum.Enum):
    ENCODER_ONLY = "encoder_only"
    DECODER_ONLY = "decoder_only"
    SEQ2SEQ = "seq2seq"
    MATCHING = "matching"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_ff: int = 256
    max_positions: int = 640
    d_proj: int = 64
    cross_attn_top_L: int = 1
    # encoder tower may be narrower than the decoder (bolt-on composition)
    d_encoder: int | None = None
    encoder_n_heads: int | None = None
    encoder_d_ff: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if not 0 < self.cross_attn_top_L <= self.decoder_layers:
            raise ModelError("cross_attn_top_L must be in (0, decoder_layers]")
        if self.enc_dim % self.enc_heads != 0:
            raise ModelError("d_encoder must be divisible by encoder_n_heads")

    @property
    def enc_dim(self) -> int:
        return self.d_encoder if self.d_encoder is not None else self.d_model

    @property
    def enc_heads(self) -> int:
        return (self.encoder_n_heads if self.encoder_n_heads is not None
                else self.n_heads)

    @property
    def enc_ff(self) -> int:
        return self.encoder_d_ff if self.encoder_d_ff is not None else self.d_ff

    def cross_layers(self) -> list[int]:
        """Decoder layer indices carrying cross-attention (the top L)."""
        return list(range(self.decoder_layers - self.cross_attn_top_L,
                          self.decoder_layers))


class ParamStore:
    """Name -> Tensor map that records which parameters a forward touched."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.access_log: set[str] = set()

    def add(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ModelError(f"duplicate parameter {name}")
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        self.access_log.add(name)
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def raw(self, name: str) -> Tensor:
        """Access without touching the log (optimizer/checkpoint path)."""
        return self._params[name]

    def reset_access_log(self):
        self.access_log = set()


def _attn_param_names(prefix):
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.trainable: dict[str, bool] = {}
        self.mode = Mode.SEQ2SEQ
        self._flag_snapshot: dict[str, bool] | None = None
        self._clm_cache: np.ndarray | None = None
        self._build(np.random.default_rng(seed))

    # ---------------------------------------------------------------- build

    def _add(self, name, array):
        tensor = Tensor(array.astype(self.dtype), requires_grad=True)
        self.params.add(name, tensor)
        self.trainable[name] = True

    def _build(self, rng):
        cfg = self.config

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        def ln(prefix, dim):
            self._add(f"{prefix}.gamma", np.ones(dim))
            self._add(f"{prefix}.beta", np.zeros(dim))

        def attn(prefix, d_q, d_kv, d_out):
            self._add(f"{prefix}.wq", normal(d_q, d_out))
            self._add(f"{prefix}.wk", normal(d_kv, d_out))
            self._add(f"{prefix}.wv", normal(d_kv, d_out))
            self._add(f"{prefix}.wo", normal(d_out, d_out))

        def ffn(prefix, dim, hidden):
            self._add(f"{prefix}.w1", normal(dim, hidden))
            self._add(f"{prefix}.b1", np.zeros(hidden))
            self._add(f"{prefix}.w2", normal(hidden, dim))
            self._add(f"{prefix}.b2", np.zeros(dim))

        d_enc = cfg.enc_dim
        self._add("enc.tok_emb", normal(cfg.vocab_size, d_enc))
        self._add("enc.pos_emb", normal(cfg.max_positions, d_enc))
        for i in range(cfg.encoder_layers):
            ln(f"enc.layer{i}.ln1", d_enc)
            attn(f"enc.layer{i}.attn", d_enc, d_enc, d_enc)
            ln(f"enc.layer{i}.ln2", d_enc)
            ffn(f"enc.layer{i}.ffn", d_enc, cfg.enc_ff)
        ln("enc.ln_f", d_enc)
        self._add("proj.w", normal(d_enc, cfg.d_proj))  # no bias

        d = cfg.d_model
        cross = set(cfg.cross_layers())
        self._add("dec.tok_emb", normal(cfg.vocab_size, d))
        self._add("dec.pos_emb", normal(cfg.max_positions, d))
        for i in range(cfg.decoder_layers):
            ln(f"dec.layer{i}.ln1", d)
            attn(f"dec.layer{i}.self_attn", d, d, d)
            if i in cross:
                ln(f"dec.layer{i}.ln_cross", d)
                attn(f"dec.layer{i}.cross_attn", d, d_enc, d)
            ln(f"dec.layer{i}.ln2", d)
            ffn(f"dec.layer{i}.ffn", d, cfg.d_ff)
        ln("dec.ln_f", d)
        self._add("lm_head.w", normal(d, cfg.vocab_size))
        self._add("match_head.w", normal(d, 2))
        self._add("match_head.b", np.zeros(2))

    # ---------------------------------------------------------- flag plumbing

    def set_trainable(self, flags: dict[str, bool]):
        for name, flag in flags.items():
            if name not in self.params:
                raise ModelError(f"unknown parameter {name}")
            self.trainable[name] = bool(flag)
        self._sync_requires_grad()

    def _sync_requires_grad(self):
        for name in self.params.names():
            self.params.raw(name).requires_grad = self.trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self.params.names() if self.trainable[n]]

    # ------------------------------------------------------------------ modes

    def set_mode(self, mode: Mode):
        if mode == self.mode:
            return
        if self.mode == Mode.DECODER_ONLY:
            # leaving decoder-only restores the pre-entry flags
            self.trainable = dict(self._flag_snapshot)
            self._flag_snapshot = None
            self._clm_cache = None
            self._sync_requires_grad()
        if mode == Mode.DECODER_ONLY:
            self._flag_snapshot = dict(self.trainable)
            for name in self.params.names():
                if (name.startswith("enc.") or name.startswith("proj.")
                        or ".cross_attn." in name or ".ln_cross." in name):
                    self.trainable[name] = False
            self._sync_requires_grad()
            self._clm_cache = self._constant_clm_states()
        self.mode = mode

    def _constant_clm_states(self) -> np.ndarray:
        states, _ = self.encode(np.array([[CLM]]))
        return states.data.copy()

    # --------------------------------------------------------------- forward

    def _positions(self, batch, length):
        if length > self.config.max_positions:
            raise ModelError(
                f"sequence length {length} exceeds max_positions "
                f"{self.config.max_positions}")
        return np.broadcast_to(np.arange(length), (batch, length))

    def _split_heads(self, x: Tensor, n_heads: int) -> Tensor:
        b, t, d = x.data.shape
        x = T.reshape(x, (b, t, n_heads, d // n_heads))
        return T.transpose(x, (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.data.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _mha(self, prefix, x, kv, n_heads, mask):
        p = self.params
        q = self._split_heads(T.matmul(x, p[f"{prefix}.wq"]), n_heads)
        k = self._split_heads(T.matmul(kv, p[f"{prefix}.wk"]), n_heads)
        v = self._split_heads(T.matmul(kv, p[f"{prefix}.wv"]), n_heads)
        out = self._merge_heads(T.sdpa(q, k, v, mask=mask))
        return T.matmul(out, p[f"{prefix}.wo"])

    def _ln(self, prefix, x):
        p = self.params
        return T.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                            eps=LN_EPS)

    def _ffn(self, prefix, x):
        p = self.params
        h = T.gelu(T.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return T.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _key_pad_mask(self, pad_mask) -> np.ndarray | None:
        """(B, S) boolean pad flags -> (B, 1, 1, S) additive mask."""
        if pad_mask is None:
            return None
        pad_mask = np.asarray(pad_mask, dtype=bool)
        add = np.where(pad_mask, self.dtype.type(T.MASK_VALUE),
                       self.dtype.type(0.0))
        return add[:, None, None, :]

    def encode(self, tokens, pad_mask=None):
        """Bidirectional encoder pass.

        Returns (hidden states B x T x d_enc, cls_hidden B x d_enc).  Pads
        (derived from token id [PAD] when pad_mask is None) are masked out
        of attention entirely.
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if pad_mask is None:
            pad_mask = tokens == PAD
        b, t = tokens.shape
        p = self.params
        x = T.add(T.embedding(p["enc.tok_emb"], tokens),
                  T.embedding(p["enc.pos_emb"], self._positions(b, t)))
        mask = self._key_pad_mask(pad_mask)
        for i in range(self.config.encoder_layers):
            pre = f"enc.layer{i}"
            normed = self._ln(f"{pre}.ln1", x)
            x = T.add(x, self._mha(f"{pre}.attn", normed, normed,
                                   self.config.enc_heads, mask))
            x = T.add(x, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)))
        x = self._ln("enc.ln_f", x)
        return x, x[:, 0]

    def project_embed(self, cls_hidden: Tensor) -> Tensor:
        """Map encoder [CLS] hidden to a unit-norm d_proj embedding."""
        return T.l2_normalize(T.matmul(cls_hidden, self.params["proj.w"]),
                              axis=-1)

    def _decoder_hidden(self, prefix_ids, encoder_states, enc_pad_mask):
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        b, t = prefix_ids.shape
        p = self.params
        x = T.add(T.embedding(p["dec.tok_emb"], prefix_ids),
                  T.embedding(p["dec.pos_emb"], self._positions(b, t)))
        causal = np.triu(
            np.full((t, t), T.MASK_VALUE, dtype=self.dtype), k=1)
        cross_mask = self._key_pad_mask(enc_pad_mask)
        cross = set(self.config.cross_layers())
        per_layer = []
        for i in range(self.config.decoder_layers):
            pre = f"dec.layer{i}"
            normed = self._ln(f"{pre}.ln1", x)
            x = T.add(x, self._mha(f"{pre}.self_attn", normed, normed,
                                   self.config.n_heads, causal))
            if i in cross:
                x = T.add(x, self._mha(f"{pre}.cross_attn",
                                       self._ln(f"{pre}.ln_cross", x),
                                       encoder_states,
                                       self.config.n_heads, cross_mask))
            x = T.add(x, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)))
            per_layer.append(x)
        return self._ln("dec.ln_f", x), per_layer

    def _resolve_encoder_states(self, prefix_ids, encoder_states):
        if self.mode == Mode.ENCODER_ONLY:
            raise ModelError("decode is not available in ENCODER_ONLY mode")
        if encoder_states is None:
            if self.mode != Mode.DECODER_ONLY:
                raise ModelError(
                    f"encoder_states required in {self.mode.name} mode")
            if self._clm_cache is None:
                raise ModelError("decoder-only cache missing; call set_mode")
            b = np.atleast_2d(np.asarray(prefix_ids)).shape[0]
            states = np.broadcast_to(
                self._clm_cache, (b,) + self._clm_cache.shape[1:])
            return Tensor(np.ascontiguousarray(states))
        return encoder_states

    def decode(self, prefix_ids, encoder_states=None, enc_pad_mask=None,
               return_hidden=False):
        """Causal decoder pass over prefix_ids, cross-attending to
        encoder_states in the top-L layers.  In DECODER_ONLY mode the cached
        constant [CLM] encoder pass is used when encoder_states is omitted.
        """
        encoder_states = self._resolve_encoder_states(
            prefix_ids, encoder_states)
        hidden, per_layer = self._decoder_hidden(
            prefix_ids, encoder_states, enc_pad_mask)
        logits = T.matmul(hidden, self.params["lm_head.w"])
        if return_hidden:
            return logits, per_layer
        return logits

    def matching_forward(self, text_states, code_ids, enc_pad_mask=None):
        """Two-class matching logits from the decoder hidden state at the
        [EOS] position of [Match]+code+[EOS] inputs, cross-attending to the
        text encoder states.
        """
        if self.mode == Mode.ENCODER_ONLY:
            raise ModelError("matching is not available in ENCODER_ONLY mode")
        code_ids = np.atleast_2d(np.asarray(code_ids, dtype=np.int64))
        has_eos = (code_ids == EOS).any(axis=1)
        if not has_eos.all():
            raise ModelError("matching input rows must contain [EOS]")
        eos_pos = np.argmax(code_ids == EOS, axis=1)
        hidden, _ = self._decoder_hidden(code_ids, text_states, enc_pad_mask)
        rows = np.arange(code_ids.shape[0])
        eos_hidden = hidden[rows, eos_pos]
        return T.linear(eos_hidden, self.params["match_head.w"],
                        self.params["match_head.b"])

    # ------------------------------------------------------------- hashing

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(asdict(self.config),
                                 sort_keys=True).encode())
        for name in self.params.names():
            digest.update(name.encode())
            digest.update(self.params.raw(name).data.tobytes())
        return digest.hexdigest()


def compose_bolt_on(encoder_cfg: ModelConfig, decoder_model: Model,
                    L: int, seed: int = 0) -> Model:
    """Attach a fresh trainable encoder (and projection head) to a frozen
    copy of a pretrained decoder, inserting fresh cross-attention into the
    top-L decoder layers only.
    """
    src_cfg = decoder_model.config
    if not 1 <= L <= src_cfg.decoder_layers:
        raise ModelError(f"L must be in [1, {src_cfg.decoder_layers}]")
    cfg = ModelConfig(
        vocab_size=src_cfg.vocab_size,
        d_model=src_cfg.d_model,
        n_heads=src_cfg.n_heads,
        encoder_layers=encoder_cfg.encoder_layers,
        decoder_layers=src_cfg.decoder_layers,
        d_ff=src_cfg.d_ff,
        max_positions=src_cfg.max_positions,
        d_proj=encoder_cfg.d_proj,
        cross_attn_top_L=L,
        d_encoder=encoder_cfg.enc_dim,
        encoder_n_heads=encoder_cfg.enc_heads,
        encoder_d_ff=encoder_cfg.enc_ff)
    model = Model(cfg, seed=seed, dtype=decoder_model.dtype)
    flags = {}
    for name in model.params.names():
        decoder_side = (name.startswith("dec.") or name.startswith("lm_head.")
                        or name.startswith("match_head."))
        fresh_cross = ".cross_attn." in name or ".ln_cross." in name
        if decoder_side and not fresh_cross:
            if name in decoder_model.params:
                src = decoder_model.params.raw(name).data
                dst = model.params.raw(name)
                if src.shape != dst.data.shape:
                    raise ModelError(f"shape mismatch copying {name}")
                dst.data = src.copy()
            flags[name] = False
        else:
            flags[name] = True
    model.set_trainable(flags)
    return model


# ------------------------------------------------------------- checkpointing


def _write_archive(path, manifest: dict, arrays: dict[str, np.ndarray]):
    tmp = str(path) + ".tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr = arrays[name]
            info = zipfile.ZipInfo(f"tensors/{name}", date_time=_ZIP_DATE)
            zf.writestr(info, np.ascontiguousarray(arr).astype(
                arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def _read_archive(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blobs = {n[len("tensors/"):]: zf.read(n)
                     for n in zf.namelist() if n.startswith("tensors/")}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return manifest, blobs


def _decode_blob(blob, spec, name):
    arr = np.frombuffer(blob, dtype=np.dtype(spec["dtype"]).newbyteorder("<"))
    try:
        return arr.reshape(spec["shape"]).astype(spec["dtype"])
    except ValueError as exc:
        raise CheckpointError(f"bad tensor data for {name}") from exc


def save_model(model: Model, path, vocab_hash: str = ""):
    arrays = {name: model.params.raw(name).data
              for name in model.params.names()}
    manifest = {
        "format_version": _FORMAT_VERSION,
        "kind": "model",
        "config": asdict(model.config),
        "mode": model.mode.value,
        "trainable": model.trainable,
        "vocab_hash": vocab_hash,
        "tensors": {name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
                    for name, arr in arrays.items()},
    }
    _write_archive(path, manifest, arrays)


def load_model(path, expected_vocab_hash: str | None = None) -> Model:
    manifest, blobs = _read_archive(path)
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {manifest.get('format_version')}")
    if (expected_vocab_hash is not None
            and manifest["vocab_hash"] != expected_vocab_hash):
        raise CheckpointError("vocab hash mismatch")
    cfg = ModelConfig(**manifest["config"])
    model = Model(cfg, seed=0)
    specs = manifest["tensors"]
    if set(specs) != set(model.params.names()):
        raise CheckpointError("parameter names do not match config")
    for name, spec in specs.items():
        param = model.params.raw(name)
        arr = _decode_blob(blobs[name], spec, name)
        if arr.shape != param.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        param.data = arr
    model.dtype = np.dtype(next(iter(specs.values()))["dtype"])
    model.set_trainable(manifest["trainable"])
    mode = Mode(manifest["mode"])
    if mode == Mode.DECODER_ONLY:
        # flags already include the frozen set; rebuild only the cache
        model._flag_snapshot = dict(model.trainable)
        model._clm_cache = model._constant_clm_states()
        model.mode = mode
    else:
        model.mode = mode
    return model
