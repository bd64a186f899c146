"""The GOP-Transformer scorer, its LSTM counterpart, and checkpoint IO.

Input tokens are the sum of a dense projection of the 2P-dimensional GOP
vector, a canonical-phoneme embedding, and a trainable positional embedding.
The Transformer backbone prepends five trainable [cls] tokens, one per
utterance aspect, and runs post-norm encoder layers whose attention never
reads padded key positions. One regression head per label (five utterance,
three word, one phoneme), each a layer-norm plus a d-to-1 dense layer,
reads the encoder outputs. The LSTM backbone consumes the same token sum, stacks
unidirectional layers of the same width, and feeds all five utterance heads
from the hidden state at the last real timestep.

Forward passes are read-only on the parameters, so scoring distinct batches
concurrently is safe; training mutates parameters and must stay exclusive.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_FILL_VALUE, Tensor
from .errors import CapacityError, ContractError, DataFormatError, DimensionError
from .features import GopSequence

LN_EPS = 1e-5

_LOG = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GOPT"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")
_BACKBONES = ("gopt", "lstm")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both backbones.

    ``num_phones`` is the phone-inventory size P (GOP vectors are 2P wide),
    ``max_phones`` the longest scoreable utterance. ``num_cls`` is fixed at
    five, one [cls] token per utterance aspect. ``cls_positional`` extends
    the positional table over the [cls] positions as well; by default the
    [cls] tokens are standalone trainable vectors and positional rows cover
    phone positions only. ``use_phone_embedding`` exists for ablations.
    """

    num_phones: int = 42
    embed_dim: int = 24
    num_layers: int = 3
    num_heads: int = 1
    ffn_dim: int | None = None
    max_phones: int = 50
    num_cls: int = 5
    dropout: float = 0.0
    activation: str = "relu"
    cls_positional: bool = False
    use_phone_embedding: bool = True

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.embed_dim)
        if self.num_phones < 2:
            raise ContractError(f"num_phones must be >= 2, got {self.num_phones}")
        if self.embed_dim < 2 or self.num_layers < 1 or self.max_phones < 1:
            raise ContractError("embed_dim >= 2, num_layers >= 1, max_phones >= 1 required")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.num_cls != 5:
            raise ContractError(f"num_cls is fixed at 5, got {self.num_cls}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def feature_dim(self) -> int:
        return 2 * self.num_phones

    @property
    def padding_phone(self) -> int:
        """Index of the reserved padding row in the phone-embedding table."""
        return self.num_phones


@dataclass(frozen=True)
class Batch:
    """Padded utterances ready for a forward pass.

    ``mask`` is True at real phone positions; padded feature rows are zero
    and padded phone ids point at the reserved padding embedding row.
    """

    ids: tuple[str, ...]
    features: np.ndarray  # (B, N, 2P)
    phone_ids: np.ndarray  # (B, N)
    mask: np.ndarray  # (B, N) bool
    lengths: np.ndarray  # (B,)

    @property
    def num_utterances(self) -> int:
        return self.features.shape[0]

    @property
    def max_len(self) -> int:
        return self.features.shape[1]


@dataclass
class BatchOutput:
    """Per-granularity predictions for a batch, still as tape tensors."""

    utterance: Tensor  # (B, 5)
    phone: Tensor  # (B, N)
    word: Tensor  # (B, N, 3)
    mask: np.ndarray  # (B, N)


def make_batch(
    sequences: Sequence[GopSequence], config: ModelConfig, pad_to: int | None = None
) -> Batch:
    """Pad GOP sequences into one batch, validating capacity and widths."""
    if not sequences:
        raise ContractError("cannot build a batch from zero utterances")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    for seq, n in zip(sequences, lengths):
        if n == 0:
            raise ContractError(f"utterance {seq.utterance_id!r} has no phones")
        if n > config.max_phones:
            raise CapacityError(
                f"utterance {seq.utterance_id!r} has {n} phones, "
                f"model capacity is {config.max_phones}"
            )
        if seq.features.shape[1] != config.feature_dim:
            raise DimensionError(
                f"utterance {seq.utterance_id!r} has feature width {seq.features.shape[1]}, "
                f"expected {config.feature_dim}"
            )
    max_len = int(lengths.max()) if pad_to is None else int(pad_to)
    if max_len < int(lengths.max()):
        raise CapacityError(f"pad_to={pad_to} shorter than longest utterance {lengths.max()}")
    if max_len > config.max_phones:
        raise CapacityError(f"pad_to={max_len} exceeds model capacity {config.max_phones}")
    b = len(sequences)
    features = np.zeros((b, max_len, config.feature_dim), dtype=np.float64)
    phone_ids = np.full((b, max_len), config.padding_phone, dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=bool)
    for i, seq in enumerate(sequences):
        n = len(seq)
        features[i, :n] = seq.features
        phone_ids[i, :n] = seq.canonical_phones
        mask[i, :n] = True
    return Batch(
        ids=tuple(s.utterance_id for s in sequences),
        features=features,
        phone_ids=phone_ids,
        mask=mask,
        lengths=lengths,
    )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class _ScorerBase:
    """Parameter registry and head logic shared by both backbones."""

    backbone = "base"

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}

    def _add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def _init_embeddings(self, rng: np.random.Generator) -> None:
        """Input-side parameters, drawn in a fixed, documented order.

        All weights and embedding tables are uniform(-1/sqrt(d), 1/sqrt(d))
        with d the embedding dimension; biases and layer-norm offsets start
        at zero, layer-norm gains at one. The phone table carries one extra
        row used for padding positions.
        """
        cfg = self.config
        bound = 1.0 / math.sqrt(cfg.embed_dim)
        self._add_param(
            "gop_proj.weight", _uniform(rng, (cfg.feature_dim, cfg.embed_dim), bound)
        )
        self._add_param("gop_proj.bias", np.zeros(cfg.embed_dim))
        if cfg.use_phone_embedding:
            self._add_param(
                "phone_embedding", _uniform(rng, (cfg.num_phones + 1, cfg.embed_dim), bound)
            )
        rows = cfg.max_phones + (cfg.num_cls if cfg.cls_positional else 0)
        self._add_param("pos_embedding", _uniform(rng, (rows, cfg.embed_dim), bound))

    def _init_heads(self, rng: np.random.Generator) -> None:
        cfg = self.config
        bound = 1.0 / math.sqrt(cfg.embed_dim)
        names = [f"utterance.{a}" for a in ("accuracy", "completeness", "fluency", "prosodic", "total")]
        names += [f"word.{a}" for a in ("accuracy", "stress", "total")]
        names += ["phoneme.accuracy"]
        for name in names:
            self._add_param(f"head.{name}.norm.gain", np.ones(cfg.embed_dim))
            self._add_param(f"head.{name}.norm.bias", np.zeros(cfg.embed_dim))
            self._add_param(f"head.{name}.weight", _uniform(rng, (cfg.embed_dim, 1), bound))
            self._add_param(f"head.{name}.bias", np.zeros(1))

    def _input_tokens(self, batch: Batch) -> Tensor:
        """Projected GOP + phone embedding + positional rows, shape (B, N, d)."""
        cfg = self.config
        n = batch.max_len
        x = ad.matmul(Tensor(batch.features), self.params["gop_proj.weight"])
        x = ad.add(x, self.params["gop_proj.bias"])
        if cfg.use_phone_embedding:
            x = ad.add(x, ad.embedding(self.params["phone_embedding"], batch.phone_ids))
        offset = cfg.num_cls if cfg.cls_positional else 0
        pos = ad.slice_axis(self.params["pos_embedding"], 0, offset, offset + n)
        return ad.add(x, pos)

    def _head(self, name: str, x: Tensor) -> Tensor:
        """Layer-norm then d->1 dense; the trailing singleton axis is kept."""
        h = ad.layer_norm(
            x,
            self.params[f"head.{name}.norm.gain"],
            self.params[f"head.{name}.norm.bias"],
            LN_EPS,
        )
        return ad.add(ad.matmul(h, self.params[f"head.{name}.weight"]), self.params[f"head.{name}.bias"])

    def _sequence_heads(self, states: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        """Phone and word scores from per-position states of shape (B, N, d)."""
        b, n = batch.num_utterances, batch.max_len
        phone = ad.reshape(self._head("phoneme.accuracy", states), (b, n))
        word = ad.concat(
            [self._head(f"word.{a}", states) for a in ("accuracy", "stress", "total")], axis=2
        )
        return phone, word


class GoptModel(_ScorerBase):
    """Transformer scorer with five [cls] aspect tokens and eight heads."""

    backbone = "gopt"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        cfg = config
        bound = 1.0 / math.sqrt(cfg.embed_dim)
        self._init_embeddings(rng)
        self._add_param("cls_tokens", _uniform(rng, (cfg.num_cls, cfg.embed_dim), bound))
        for layer in range(cfg.num_layers):
            p = f"layers.{layer}"
            for proj in ("q", "k", "v", "out"):
                self._add_param(
                    f"{p}.attn.{proj}.weight", _uniform(rng, (cfg.embed_dim, cfg.embed_dim), bound)
                )
                self._add_param(f"{p}.attn.{proj}.bias", np.zeros(cfg.embed_dim))
            self._add_param(f"{p}.norm1.gain", np.ones(cfg.embed_dim))
            self._add_param(f"{p}.norm1.bias", np.zeros(cfg.embed_dim))
            self._add_param(f"{p}.ffn.w1", _uniform(rng, (cfg.embed_dim, cfg.ffn_dim), bound))
            self._add_param(f"{p}.ffn.b1", np.zeros(cfg.ffn_dim))
            self._add_param(f"{p}.ffn.w2", _uniform(rng, (cfg.ffn_dim, cfg.embed_dim), bound))
            self._add_param(f"{p}.ffn.b2", np.zeros(cfg.embed_dim))
            self._add_param(f"{p}.norm2.gain", np.ones(cfg.embed_dim))
            self._add_param(f"{p}.norm2.bias", np.zeros(cfg.embed_dim))
        self._init_heads(rng)
        _LOG.info("gopt scorer built: %d parameters", self.num_parameters())

    def _attention(self, layer: int, h: Tensor, mask_fill: np.ndarray) -> Tensor:
        cfg = self.config
        b, t, d = h.shape
        heads = cfg.num_heads
        dh = d // heads
        p = f"layers.{layer}.attn"

        def project(name: str) -> Tensor:
            y = ad.add(ad.matmul(h, self.params[f"{p}.{name}.weight"]), self.params[f"{p}.{name}.bias"])
            return ad.permute(ad.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

        q, k, v = project("q"), project("k"), project("v")
        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        scores = ad.add(scores, Tensor(mask_fill))
        weights = ad.softmax_rows(scores)
        ctx = ad.reshape(ad.permute(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return ad.add(ad.matmul(ctx, self.params[f"{p}.out.weight"]), self.params[f"{p}.out.bias"])

    def forward(self, batch: Batch, dropout_rng: np.random.Generator | None = None) -> BatchOutput:
        """Score one padded batch; deterministic whenever dropout is off.

        No query ever attends to a padded key: padded positions receive an
        additive MASK_FILL_VALUE before the softmax, which underflows to an
        exact zero weight.
        """
        cfg = self.config
        act = ad.relu if cfg.activation == "relu" else ad.tanh
        b, n = batch.num_utterances, batch.max_len
        x = self._input_tokens(batch)
        if cfg.cls_positional:
            cls = ad.add(
                self.params["cls_tokens"],
                ad.slice_axis(self.params["pos_embedding"], 0, 0, cfg.num_cls),
            )
        else:
            cls = self.params["cls_tokens"]
        h = ad.concat([ad.broadcast_to(cls, (b, cfg.num_cls, cfg.embed_dim)), x], axis=1)

        key_valid = np.concatenate([np.ones((b, cfg.num_cls), dtype=bool), batch.mask], axis=1)
        mask_fill = np.where(key_valid, 0.0, MASK_FILL_VALUE)[:, None, None, :]

        p_drop = cfg.dropout if dropout_rng is not None else 0.0
        for layer in range(cfg.num_layers):
            a = self._attention(layer, h, mask_fill)
            if p_drop:
                a = ad.dropout(a, p_drop, dropout_rng)
            h = ad.layer_norm(
                ad.add(h, a),
                self.params[f"layers.{layer}.norm1.gain"],
                self.params[f"layers.{layer}.norm1.bias"],
                LN_EPS,
            )
            f = ad.matmul(
                act(ad.add(ad.matmul(h, self.params[f"layers.{layer}.ffn.w1"]), self.params[f"layers.{layer}.ffn.b1"])),
                self.params[f"layers.{layer}.ffn.w2"],
            )
            f = ad.add(f, self.params[f"layers.{layer}.ffn.b2"])
            if p_drop:
                f = ad.dropout(f, p_drop, dropout_rng)
            h = ad.layer_norm(
                ad.add(h, f),
                self.params[f"layers.{layer}.norm2.gain"],
                self.params[f"layers.{layer}.norm2.bias"],
                LN_EPS,
            )

        aspects = ("accuracy", "completeness", "fluency", "prosodic", "total")
        utterance = ad.concat(
            [
                self._head(f"utterance.{aspect}", ad.select_index(h, 1, k))
                for k, aspect in enumerate(aspects)
            ],
            axis=1,
        )
        states = ad.slice_axis(h, 1, cfg.num_cls, cfg.num_cls + n)
        phone, word = self._sequence_heads(states, batch)
        return BatchOutput(utterance=utterance, phone=phone, word=word, mask=batch.mask.copy())


class LstmModel(_ScorerBase):
    """Stacked unidirectional LSTM with the same token sum and heads.

    Gate order inside the fused weight matrices is (input, forget, cell,
    output). All five utterance heads read the hidden state at each
    utterance's final real timestep, so trailing padding cannot influence
    utterance scores.
    """

    backbone = "lstm"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        cfg = config
        bound = 1.0 / math.sqrt(cfg.embed_dim)
        d = cfg.embed_dim
        self._init_embeddings(rng)
        for layer in range(cfg.num_layers):
            self._add_param(f"lstm.{layer}.w_ih", _uniform(rng, (d, 4 * d), bound))
            self._add_param(f"lstm.{layer}.w_hh", _uniform(rng, (d, 4 * d), bound))
            self._add_param(f"lstm.{layer}.bias", np.zeros(4 * d))
        self._init_heads(rng)
        _LOG.info("lstm scorer built: %d parameters", self.num_parameters())

    def forward(self, batch: Batch, dropout_rng: np.random.Generator | None = None) -> BatchOutput:
        cfg = self.config
        d = cfg.embed_dim
        b, n = batch.num_utterances, batch.max_len
        p_drop = cfg.dropout if dropout_rng is not None else 0.0
        seq = self._input_tokens(batch)
        for layer in range(cfg.num_layers):
            w_ih = self.params[f"lstm.{layer}.w_ih"]
            w_hh = self.params[f"lstm.{layer}.w_hh"]
            bias = self.params[f"lstm.{layer}.bias"]
            h = Tensor(np.zeros((b, d)))
            c = Tensor(np.zeros((b, d)))
            outputs = []
            for t in range(n):
                xt = ad.select_index(seq, 1, t)
                gates = ad.add(ad.add(ad.matmul(xt, w_ih), ad.matmul(h, w_hh)), bias)
                i_g = ad.sigmoid(ad.slice_axis(gates, 1, 0, d))
                f_g = ad.sigmoid(ad.slice_axis(gates, 1, d, 2 * d))
                g_g = ad.tanh(ad.slice_axis(gates, 1, 2 * d, 3 * d))
                o_g = ad.sigmoid(ad.slice_axis(gates, 1, 3 * d, 4 * d))
                c = ad.add(ad.mul(f_g, c), ad.mul(i_g, g_g))
                h = ad.mul(o_g, ad.tanh(c))
                outputs.append(h)
            seq = ad.stack(outputs, axis=1)
            if p_drop and layer < cfg.num_layers - 1:
                seq = ad.dropout(seq, p_drop, dropout_rng)

        last = ad.select_positions(seq, batch.lengths - 1)
        aspects = ("accuracy", "completeness", "fluency", "prosodic", "total")
        utterance = ad.concat([self._head(f"utterance.{a}", last) for a in aspects], axis=1)
        phone, word = self._sequence_heads(seq, batch)
        return BatchOutput(utterance=utterance, phone=phone, word=word, mask=batch.mask.copy())


def build_model(config: ModelConfig, backbone: str = "gopt", seed: int = 0):
    if backbone not in _BACKBONES:
        raise ContractError(f"backbone must be one of {_BACKBONES}, got {backbone!r}")
    cls = GoptModel if backbone == "gopt" else LstmModel
    return cls(config, seed=seed)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "GOPT" | version u32 | config_len u32 | config JSON (utf-8) | then,
# for each parameter in registry order: name_len u32, name bytes, rank u32,
# dims u32 * rank, row-major float64 little-endian data. The JSON block
# records the backbone, the ModelConfig fields, and the parameter count, so
# a reader knows exactly how many tensors to expect. Round-trips bit-exactly.


def save_checkpoint(model, path) -> None:
    path = Path(path)
    cfg = {
        "backbone": model.backbone,
        "config": asdict(model.config),
        "num_tensors": len(model.params),
    }
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f8", copy=False).tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(f"checkpoint truncated while reading {what}: "
                              f"expected {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    """Restore a model with bit-identical parameters."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        header = json.loads(_read_exact(fh, blob_len, "config block").decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = build_model(config, backbone=header["backbone"], seed=0)
        if header["num_tensors"] != len(model.params):
            raise DataFormatError(
                f"checkpoint lists {header['num_tensors']} tensors, "
                f"model defines {len(model.params)}"
            )
        for _ in range(header["num_tensors"]):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name not in model.params:
                raise DataFormatError(f"checkpoint has unknown parameter {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            expected = model.params[name].shape
            if tuple(dims) != expected:
                raise DataFormatError(
                    f"parameter {name!r} has shape {tuple(dims)} in file, expected {expected}"
                )
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"data of {name}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            model.params[name].data = np.ascontiguousarray(arr)
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing garbage after the last checkpoint tensor")
    return model
