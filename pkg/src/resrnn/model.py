"""Two-path residual recurrent regressor for frame-wise regional wall thickness.

A convolutional trunk embeds each frame and a fully-connected head produces a
per-frame preliminary estimate. A recurrent path consumes the shared
embeddings: a temporal LSTM over the frame axis (hidden width = number of
regions), whose stacked outputs are transposed and fed to a spatial LSTM over
the region axis (hidden width = number of frames). The final estimate is the
preliminary estimate plus the recurrent residual; ablation variants drop one
path or swap the plain recurrence for the circular one.
"""

from __future__ import annotations

import binascii
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ShapeError, Tensor
from .layers import CircleConfig, ConvBlockParams, FCParams, LSTMCellParams

VARIANTS = ("cnn", "rnn_plain", "rnn_circle", "resrnn_plain", "resrnn_circle")

CHECKPOINT_MAGIC = b"RWTC"
CHECKPOINT_VERSION = 1

REGION_NAMES = ("IS", "I", "IL", "AL", "A", "AS")  # counter-clockwise mid-cavity order


class CheckpointError(Exception):
    """Base class for model checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class ResRNNConfig:
    frames: int = 20
    regions: int = 6
    input_size: int = 75
    # (out_channels, kernel, stride, pad) per conv block; each block is
    # conv -> relu -> 2x2 max-pool
    conv_specs: tuple = ((8, 5, 1, 0), (16, 5, 1, 0), (32, 3, 1, 0))
    embed_dim: int = 100
    variant: str = "resrnn_circle"
    temporal_depth: int = 20
    spatial_depth: int = 6
    use_spatial: bool = True
    freeze_trunk: bool = False
    # hidden widths are forced by the architecture; explicit values must match
    temporal_hidden: int | None = None
    spatial_hidden: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.temporal_hidden is None:
            self.temporal_hidden = self.regions
        if self.spatial_hidden is None:
            self.spatial_hidden = self.frames
        if self.temporal_hidden != self.regions:
            raise ValueError(
                f"temporal_hidden must equal regions ({self.regions}), got {self.temporal_hidden}")
        if self.spatial_hidden != self.frames:
            raise ValueError(
                f"spatial_hidden must equal frames ({self.frames}), got {self.spatial_hidden}")
        if self.frames < 1 or self.regions < 1 or self.input_size < 1:
            raise ValueError("frames, regions and input_size must be positive")
        if self.temporal_depth < 1 or self.spatial_depth < 1:
            raise ValueError("circle depths must be >= 1")
        self.conv_specs = tuple(tuple(int(v) for v in s) for s in self.conv_specs)
        self.flatten_dim()  # validates the shape chain

    @property
    def circular(self) -> bool:
        return self.variant.endswith("_circle")

    def conv_shape_chain(self) -> list[tuple[int, int]]:
        """(channels, spatial extent) after each conv+pool block."""
        chain = []
        ch, s = 1, self.input_size
        for out_ch, k, stride, pad in self.conv_specs:
            if s + 2 * pad < k:
                raise ValueError(f"conv kernel {k} larger than padded extent {s + 2 * pad}")
            s = (s + 2 * pad - k) // stride + 1
            s = s // 2  # 2x2 max-pool, trailing row/column dropped
            if s < 1:
                raise ValueError("conv/pool chain collapses below 1 pixel")
            ch = out_ch
            chain.append((ch, s))
        return chain

    def flatten_dim(self) -> int:
        ch, s = self.conv_shape_chain()[-1]
        return ch * s * s


@dataclass
class ResRNNParams:
    """Full parameter set of both paths."""

    convs: list
    fc1: FCParams
    fc2: FCParams
    temporal_cell: LSTMCellParams
    spatial_cell: LSTMCellParams

    def named_tensors(self):
        """Yield (name, tensor, is_bias) over every parameter tensor, fixed order."""
        for i, c in enumerate(self.convs, start=1):
            yield f"conv{i}.kernels", c.kernels, False
            yield f"conv{i}.bias", c.bias, True
        for fc_name, fc in (("fc1", self.fc1), ("fc2", self.fc2)):
            yield f"{fc_name}.weight", fc.weight, False
            yield f"{fc_name}.bias", fc.bias, True
        for cell_name, cell in (("temporal", self.temporal_cell), ("spatial", self.spatial_cell)):
            for wname in ("W_xi", "W_xf", "W_xo", "W_xc", "W_hi", "W_hf", "W_ho", "W_hc"):
                yield f"{cell_name}.{wname}", getattr(cell, wname), False
            for bname in ("b_i", "b_f", "b_o", "b_c"):
                yield f"{cell_name}.{bname}", getattr(cell, bname), True

    def tensors(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()


def init_params(cfg: ResRNNConfig, seed: int) -> ResRNNParams:
    """Deterministic initialization of every parameter tensor of the model."""
    rng = np.random.default_rng(seed)
    convs = []
    in_ch = 1
    for out_ch, k, stride, pad in cfg.conv_specs:
        convs.append(layers.init_conv(rng, out_ch, in_ch, k, stride=stride, pad=pad))
        in_ch = out_ch
    fc1 = layers.init_fc(rng, cfg.embed_dim, cfg.flatten_dim())
    fc2 = layers.init_fc(rng, cfg.regions, cfg.embed_dim)
    temporal = layers.init_lstm(rng, cfg.regions, cfg.embed_dim)
    spatial = layers.init_lstm(rng, cfg.frames, cfg.frames)
    return ResRNNParams(convs=convs, fc1=fc1, fc2=fc2,
                        temporal_cell=temporal, spatial_cell=spatial)


# ---------------------------------------------------------------------------
# forward passes


def cnn_embed(params: ResRNNParams, cfg: ResRNNConfig, frames: Tensor) -> Tensor:
    """Embed frames (N,1,S,S) or a single (1,S,S) frame into (N, embed_dim) rows."""
    single = frames.data.ndim == 3
    x = ad.reshape(frames, (1,) + frames.shape) if single else frames
    n = x.shape[0]
    if x.shape[1] != 1 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ShapeError(f"cnn_embed: expected (N,1,{cfg.input_size},{cfg.input_size}), got {frames.shape}")
    for blk in params.convs:
        x = ad.conv2d(x, blk.kernels, stride=blk.stride, pad=blk.pad, bias=blk.bias)
        x = ad.relu(x)
        x = ad.maxpool2(x)
    flat = ad.reshape(x, (n, cfg.flatten_dim()))
    emb = ad.relu(layers.fc_forward(params.fc1, flat))
    return ad.reshape(emb, (cfg.embed_dim,)) if single else emb


def cnn_estimate(params: ResRNNParams, embedding: Tensor) -> Tensor:
    """Preliminary per-frame thickness estimate: the second fc head."""
    return layers.fc_forward(params.fc2, embedding)


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _rnn_residual_stream(params: ResRNNParams, cfg: ResRNNConfig, emb: Tensor,
                         batch: int) -> Tensor:
    """Recurrent path over embeddings (batch*F, E); returns (batch, F, L)."""
    f, l = cfg.frames, cfg.regions
    if emb.shape != (batch * f, cfg.embed_dim):
        raise ShapeError(f"rnn path: embeddings {emb.shape}, expected {(batch * f, cfg.embed_dim)}")
    if cfg.freeze_trunk:
        emb = _detach(emb)
    stream = ad.permute(ad.reshape(emb, (batch, f, cfg.embed_dim)), (1, 0, 2))  # (F,B,E)
    if cfg.circular:
        hs = layers.rnn_run_circle(params.temporal_cell, stream,
                                   CircleConfig(cfg.temporal_depth))
    else:
        hs = layers.rnn_run_plain(params.temporal_cell, stream)  # (F,B,L)
    if not cfg.use_spatial:
        return ad.permute(hs, (1, 0, 2))  # (B,F,L)
    spa_in = ad.permute(hs, (2, 1, 0))  # (L,B,F): step l sees region l across all frames
    if cfg.circular:
        spa_out = layers.rnn_run_circle(params.spatial_cell, spa_in,
                                        CircleConfig(cfg.spatial_depth))
    else:
        spa_out = layers.rnn_run_plain(params.spatial_cell, spa_in)  # (L,B,F)
    return ad.permute(spa_out, (1, 2, 0))  # (B,F,L)


def rnn_residual(params: ResRNNParams, cfg: ResRNNConfig, embeddings) -> Tensor:
    """Residual matrix (F, L) for one subject's F embedding vectors."""
    if isinstance(embeddings, Tensor):
        emb = embeddings
    else:
        rows = [e if isinstance(e, Tensor) else Tensor(e) for e in embeddings]
        emb = ad.concat_rows([ad.reshape(e, (1, e.shape[0])) for e in rows])
    if emb.shape[0] != cfg.frames:
        raise ShapeError(f"rnn_residual: {emb.shape[0]} embeddings, expected {cfg.frames}")
    return ad.reshape(_rnn_residual_stream(params, cfg, emb, 1),
                      (cfg.frames, cfg.regions))


def forward_batch(params: ResRNNParams, cfg: ResRNNConfig, x: Tensor) -> Tensor:
    """Variant dispatch over a batch: x is (B, F, S, S), result (B, F, L).

    Embeddings are computed once and shared by both paths.
    """
    if x.data.ndim != 4 or x.shape[1] != cfg.frames:
        raise ShapeError(f"forward_batch: expected (B,{cfg.frames},S,S), got {x.shape}")
    b, f = x.shape[0], cfg.frames
    flat = ad.reshape(x, (b * f, 1, cfg.input_size, cfg.input_size))
    emb = cnn_embed(params, cfg, flat)
    if cfg.variant == "cnn":
        return ad.reshape(cnn_estimate(params, emb), (b, f, cfg.regions))
    residual = _rnn_residual_stream(params, cfg, emb, b)
    if cfg.variant in ("rnn_plain", "rnn_circle"):
        return residual
    prelim = ad.reshape(cnn_estimate(params, emb), (b, f, cfg.regions))
    return ad.add(prelim, residual)


def forward(params: ResRNNParams, cfg: ResRNNConfig, sequence) -> Tensor:
    """Estimate the (F, L) thickness matrix for one subject's frame sequence."""
    if isinstance(sequence, Tensor):
        seq = sequence
    else:
        arr = np.stack([np.asarray(fr, dtype=np.float64).reshape(cfg.input_size, cfg.input_size)
                        for fr in sequence])
        seq = Tensor(arr)
    if seq.shape != (cfg.frames, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"forward: expected {(cfg.frames, cfg.input_size, cfg.input_size)}, got {seq.shape}")
    out = forward_batch(params, cfg, ad.reshape(seq, (1,) + seq.shape))
    return ad.reshape(out, (cfg.frames, cfg.regions))


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian):
#   magic "RWTC" | u32 version | u32 header length | header (UTF-8 JSON)
#   | raw float64 LE parameter payloads in header order | u32 CRC-32
# The CRC covers everything between the magic and the CRC field. The header
# holds the config record and one {name, shape} entry per parameter.


def save_checkpoint(path, cfg: ResRNNConfig, params: ResRNNParams) -> None:
    entries = [{"name": name, "shape": list(t.shape)} for name, t, _ in params.named_tensors()]
    header = json.dumps({"config": asdict(cfg), "params": entries}).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(header))
    body += header
    for _, t, _ in params.named_tensors():
        body += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    crc = binascii.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[ResRNNConfig, ResRNNParams]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a model checkpoint")
    body, crc_stored = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if binascii.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    version = struct.unpack_from("<I", body, 0)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    hlen = struct.unpack_from("<I", body, 4)[0]
    header = json.loads(body[8:8 + hlen].decode("utf-8"))
    cfg_dict = dict(header["config"])
    cfg_dict["conv_specs"] = tuple(tuple(s) for s in cfg_dict["conv_specs"])
    cfg = ResRNNConfig(**cfg_dict)
    params = init_params(cfg, seed=0)
    offset = 8 + hlen
    by_name = {name: t for name, t, _ in params.named_tensors()}
    for entry in header["params"]:
        t = by_name[entry["name"]]
        shape = tuple(entry["shape"])
        if t.shape != shape:
            raise CheckpointCorruptError(
                f"{path}: parameter {entry['name']} has shape {shape}, expected {t.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        t.data = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointCorruptError(f"{path}: trailing bytes in checkpoint payload")
    return cfg, params
